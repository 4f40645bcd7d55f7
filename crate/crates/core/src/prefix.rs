//! IPv4 prefixes and netblock files.

use std::fmt;
use std::io::BufRead;
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PrefixError {
    #[error("malformed prefix `{0}`, expected a.b.c.d/len")]
    Malformed(String),
    #[error("prefix length {0} out of range 0..=32")]
    LengthOutOfRange(u32),
    #[error("prefix `{0}` has host bits set below its length")]
    HostBitsSet(String),
}

/// An IPv4 network: base address with all host bits cleared, plus a length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IpPrefix {
    base: u32,
    len: u8,
}

#[inline]
fn mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - len as u32)
    }
}

impl IpPrefix {
    pub fn new(base: Ipv4Addr, len: u8) -> Result<Self, PrefixError> {
        if len > 32 {
            return Err(PrefixError::LengthOutOfRange(len as u32));
        }
        let raw = u32::from(base);
        if raw & !mask(len) != 0 {
            return Err(PrefixError::HostBitsSet(format!("{base}/{len}")));
        }
        Ok(Self { base: raw, len })
    }

    /// The prefix of length `len` containing `addr`.
    pub fn containing(addr: Ipv4Addr, len: u8) -> Self {
        assert!(len <= 32);
        Self {
            base: u32::from(addr) & mask(len),
            len,
        }
    }

    pub fn base(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.base)
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    /// First address as an integer.
    pub fn first(&self) -> u32 {
        self.base
    }

    /// Last address as an integer (the broadcast address for lengths < 31).
    pub fn last(&self) -> u32 {
        self.base | !mask(self.len)
    }

    pub fn size(&self) -> u64 {
        1u64 << (32 - self.len as u32)
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & mask(self.len) == self.base
    }

    pub fn covers(&self, other: &IpPrefix) -> bool {
        self.len <= other.len && other.base & mask(self.len) == self.base
    }

    /// The `index`-th address of the prefix, if inside it.
    pub fn nth(&self, index: u64) -> Option<Ipv4Addr> {
        (index < self.size()).then(|| Ipv4Addr::from(self.base + index as u32))
    }
}

impl fmt::Display for IpPrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base(), self.len)
    }
}

/// Parses `a.b.c.d/len`. Host bits below `len` must be zero.
pub fn parse_prefix(text: &str) -> Result<IpPrefix, PrefixError> {
    let text = text.trim();
    let (addr, len) = text
        .split_once('/')
        .ok_or_else(|| PrefixError::Malformed(text.to_string()))?;
    let addr: Ipv4Addr = addr.parse().map_err(|_| PrefixError::Malformed(text.to_string()))?;
    if len.is_empty() || !len.bytes().all(|b| b.is_ascii_digit()) || len.len() > 3 {
        return Err(PrefixError::Malformed(text.to_string()));
    }
    let len: u32 = len.parse().map_err(|_| PrefixError::Malformed(text.to_string()))?;
    if len > 32 {
        return Err(PrefixError::LengthOutOfRange(len));
    }
    IpPrefix::new(addr, len as u8)
}

impl FromStr for IpPrefix {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_prefix(s)
    }
}

impl Serialize for IpPrefix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IpPrefix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_prefix(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NetblockError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: PrefixError,
    },
}

/// Reads a netblock list: one CIDR per line, `#` starts a comment, blank lines ignored.
pub fn read_netblocks<R: BufRead>(reader: R, origin: &str) -> Result<Vec<IpPrefix>, NetblockError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| NetblockError::Io {
            path: origin.to_string(),
            source,
        })?;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let prefix = parse_prefix(content).map_err(|source| NetblockError::Parse {
            path: origin.to_string(),
            line: idx + 1,
            source,
        })?;
        out.push(prefix);
    }
    Ok(out)
}

pub fn load_netblock_file(path: &Path) -> Result<Vec<IpPrefix>, NetblockError> {
    let file = std::fs::File::open(path).map_err(|source| NetblockError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_netblocks(std::io::BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_valid_prefixes() {
        let p = parse_prefix("10.0.0.0/8").unwrap();
        assert_eq!(p.base(), Ipv4Addr::new(10, 0, 0, 0));
        assert_eq!(p.len(), 8);
        let p = parse_prefix("200.87.0.0/17").unwrap();
        assert_eq!(p.base(), Ipv4Addr::new(200, 87, 0, 0));
        assert_eq!(p.len(), 17);
        assert_eq!(parse_prefix("0.0.0.0/0").unwrap().size(), 1 << 32);
    }

    #[test]
    fn rejects_host_bits() {
        assert_eq!(
            parse_prefix("10.0.0.1/8"),
            Err(PrefixError::HostBitsSet("10.0.0.1/8".into()))
        );
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "10.0.0.0",
            "10.0.0/8",
            "10.0.0.0/",
            "10.0.0.0/x",
            "10.0.0.0/-1",
            "/8",
            "",
        ] {
            assert!(matches!(parse_prefix(bad), Err(PrefixError::Malformed(_))), "{bad}");
        }
        assert_eq!(parse_prefix("10.0.0.0/33"), Err(PrefixError::LengthOutOfRange(33)));
    }

    #[test]
    fn netblock_file_comments_and_blanks() {
        let text = "# country\n\n10.0.0.0/8   # trailing\n   \n192.168.0.0/16\n";
        let blocks = read_netblocks(text.as_bytes(), "mem").unwrap();
        assert_eq!(blocks.len(), 2);
    }

    #[test]
    fn netblock_file_reports_line() {
        let text = "10.0.0.0/8\n\n10.0.0.1/8\n";
        match read_netblocks(text.as_bytes(), "mem") {
            Err(NetblockError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn display_parse_roundtrip(addr in any::<u32>(), len in 0u8..=32) {
            let p = IpPrefix::containing(Ipv4Addr::from(addr), len);
            prop_assert_eq!(parse_prefix(&p.to_string()).unwrap(), p);
        }

        #[test]
        fn contains_matches_range(addr in any::<u32>(), base in any::<u32>(), len in 0u8..=32) {
            let p = IpPrefix::containing(Ipv4Addr::from(base), len);
            prop_assert_eq!(p.contains(Ipv4Addr::from(addr)), p.first() <= addr && addr <= p.last());
        }
    }
}
