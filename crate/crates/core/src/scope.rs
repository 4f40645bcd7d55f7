//! Address scoping: which addresses belong to the IXP, the country, private space
//! or the rest of the world.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::prefix::IpPrefix;

/// Where an address sits relative to the measured country.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Membership {
    Ixp,
    Domestic,
    Private,
    Foreign,
}

impl Membership {
    /// IXP, domestic and private addresses all count as in-country.
    pub fn is_in_country(self) -> bool {
        !matches!(self, Membership::Foreign)
    }
}

/// A set of prefixes with set-union semantics.
///
/// Prefixes are kept as given (for longest-prefix queries) and additionally
/// flattened into sorted, disjoint address ranges so membership is a binary search.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixSet {
    prefixes: Vec<IpPrefix>,
    ranges: Vec<(u32, u32)>,
}

impl PrefixSet {
    pub fn new(prefixes: impl IntoIterator<Item = IpPrefix>) -> Self {
        let mut prefixes: Vec<IpPrefix> = prefixes.into_iter().collect();
        prefixes.sort();
        prefixes.dedup();

        let mut spans: Vec<(u32, u32)> = prefixes.iter().map(|p| (p.first(), p.last())).collect();
        spans.sort_unstable();
        let mut ranges: Vec<(u32, u32)> = Vec::with_capacity(spans.len());
        for (lo, hi) in spans {
            match ranges.last_mut() {
                Some(last) if (last.1 as u64) + 1 >= lo as u64 => last.1 = last.1.max(hi),
                _ => ranges.push((lo, hi)),
            }
        }
        Self { prefixes, ranges }
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    pub fn prefixes(&self) -> &[IpPrefix] {
        &self.prefixes
    }

    /// Disjoint, ascending, non-adjacent address ranges covering the union.
    pub fn ranges(&self) -> &[(u32, u32)] {
        &self.ranges
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        let a = u32::from(addr);
        let idx = self.ranges.partition_point(|&(lo, _)| lo <= a);
        idx > 0 && self.ranges[idx - 1].1 >= a
    }

    /// The most specific member prefix containing `addr`.
    pub fn longest_match(&self, addr: Ipv4Addr) -> Option<IpPrefix> {
        self.prefixes
            .iter()
            .filter(|p| p.contains(addr))
            .max_by_key(|p| p.len())
            .copied()
    }

    /// Number of distinct addresses covered.
    pub fn address_count(&self) -> u64 {
        self.ranges.iter().map(|&(lo, hi)| (hi - lo) as u64 + 1).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScopeError {
    #[error("country prefix set is empty")]
    NoCountryPrefixes,
    #[error("IXP prefix set is empty")]
    NoIxpPrefixes,
}

/// The RFC 1918 blocks.
pub fn private_prefixes() -> [IpPrefix; 3] {
    [
        IpPrefix::new(Ipv4Addr::new(10, 0, 0, 0), 8).unwrap(),
        IpPrefix::new(Ipv4Addr::new(172, 16, 0, 0), 12).unwrap(),
        IpPrefix::new(Ipv4Addr::new(192, 168, 0, 0), 16).unwrap(),
    ]
}

/// Country allocation, IXP subnet and private space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressScope {
    country: PrefixSet,
    ixp: PrefixSet,
    private: PrefixSet,
}

impl AddressScope {
    pub fn new(
        country: impl IntoIterator<Item = IpPrefix>,
        ixp: impl IntoIterator<Item = IpPrefix>,
    ) -> Result<Self, ScopeError> {
        let country = PrefixSet::new(country);
        let ixp = PrefixSet::new(ixp);
        if country.is_empty() {
            return Err(ScopeError::NoCountryPrefixes);
        }
        if ixp.is_empty() {
            return Err(ScopeError::NoIxpPrefixes);
        }
        Ok(Self {
            country,
            ixp,
            private: PrefixSet::new(private_prefixes()),
        })
    }

    pub fn country(&self) -> &PrefixSet {
        &self.country
    }

    pub fn ixp(&self) -> &PrefixSet {
        &self.ixp
    }

    pub fn private(&self) -> &PrefixSet {
        &self.private
    }

    /// Precedence is Ixp > Private > Domestic > Foreign.
    pub fn membership(&self, addr: Ipv4Addr) -> Membership {
        if self.ixp.contains(addr) {
            Membership::Ixp
        } else if self.private.contains(addr) {
            Membership::Private
        } else if self.country.contains(addr) {
            Membership::Domestic
        } else {
            Membership::Foreign
        }
    }
}
