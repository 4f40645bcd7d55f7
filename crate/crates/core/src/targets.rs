//! Target selection: split country netblocks into /24 networks and pick one
//! destination per network, preferring hosts with an active service.

use std::collections::BTreeSet;
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prefix::{load_netblock_file, IpPrefix, NetblockError};
use crate::scope::PrefixSet;
use crate::services::ServiceKey;
use crate::util::mix64;

#[derive(Debug, thiserror::Error)]
pub enum TargetError {
    #[error("prefix {0} is longer than /24")]
    LongerThan24(IpPrefix),
    #[error(transparent)]
    Netblock(#[from] NetblockError),
    #[error("netblock file {0} contains no prefixes")]
    Empty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Service,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub network: IpPrefix,
    pub addr: Ipv4Addr,
    pub mode: TargetMode,
}

/// Splits `prefix` into its /24 networks, ascending.
pub fn split_to_slash24(prefix: IpPrefix) -> Result<Vec<IpPrefix>, TargetError> {
    if prefix.len() > 24 {
        return Err(TargetError::LongerThan24(prefix));
    }
    let count = 1u32 << (24 - prefix.len());
    Ok((0..count)
        .map(|i| IpPrefix::containing(Ipv4Addr::from(prefix.first() + (i << 8)), 24))
        .collect())
}

fn usable_host(addr: Ipv4Addr) -> bool {
    !matches!(addr.octets()[3], 0 | 255)
}

/// Picks the probe destination for one /24.
///
/// The lowest active-service address inside the network wins; otherwise a host
/// `.1..=.254` drawn from a PRNG seeded by `(seed, network)`.
pub fn choose_target(network: IpPrefix, active: &BTreeSet<ServiceKey>, seed: u64) -> Target {
    assert_eq!(network.len(), 24, "targets are chosen per /24");
    let lo = (network.base(), 0u16);
    let hi = (Ipv4Addr::from(network.last()), u16::MAX);
    if let Some(&(addr, _)) = active.range(lo..=hi).find(|(a, _)| usable_host(*a)) {
        return Target {
            network,
            addr,
            mode: TargetMode::Service,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(network.first() as u64)));
    let host: u32 = rng.random_range(1..=254);
    Target {
        network,
        addr: Ipv4Addr::from(network.first() + host),
        mode: TargetMode::Random,
    }
}

/// One target per /24 touched by the union of `blocks`, ascending by network.
///
/// Blocks longer than /24 contribute the /24 that contains them.
pub fn targets_for_blocks(blocks: &[IpPrefix], active: &BTreeSet<ServiceKey>, seed: u64) -> Vec<Target> {
    let set = PrefixSet::new(blocks.iter().copied());
    let mut nets: Vec<u32> = Vec::new();
    for &(lo, hi) in set.ranges() {
        for n in (lo >> 8)..=(hi >> 8) {
            if nets.last() != Some(&n) {
                nets.push(n);
            }
        }
    }
    nets.into_iter()
        .map(|n| choose_target(IpPrefix::containing(Ipv4Addr::from(n << 8), 24), active, seed))
        .collect()
}

pub fn build_target_list(
    country_file: &Path,
    active: &BTreeSet<ServiceKey>,
    seed: u64,
) -> Result<Vec<Target>, TargetError> {
    let blocks = load_netblock_file(country_file)?;
    if blocks.is_empty() {
        return Err(TargetError::Empty(country_file.display().to_string()));
    }
    Ok(targets_for_blocks(&blocks, active, seed))
}

pub fn write_targets_jsonl<W: Write>(mut out: W, targets: &[Target]) -> std::io::Result<()> {
    for t in targets {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Plain list, one address per line.
pub fn write_targets_text<W: Write>(mut out: W, targets: &[Target]) -> std::io::Result<()> {
    for t in targets {
        writeln!(out, "{}", t.addr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefix::parse_prefix;
    use proptest::prelude::*;

    fn p(s: &str) -> IpPrefix {
        parse_prefix(s).unwrap()
    }

    #[test]
    fn split_examples() {
        let got: Vec<String> = split_to_slash24(p("10.0.0.0/22"))
            .unwrap()
            .iter()
            .map(|x| x.to_string())
            .collect();
        assert_eq!(got, ["10.0.0.0/24", "10.0.1.0/24", "10.0.2.0/24", "10.0.3.0/24"]);
        assert_eq!(split_to_slash24(p("10.0.0.0/24")).unwrap(), vec![p("10.0.0.0/24")]);
        assert!(matches!(
            split_to_slash24(p("10.0.0.0/25")),
            Err(TargetError::LongerThan24(_))
        ));
    }

    #[test]
    fn service_target_lowest_address() {
        let net = p("200.87.1.0/24");
        let mut active = BTreeSet::new();
        active.insert((Ipv4Addr::new(200, 87, 1, 10), 80));
        let t = choose_target(net, &active, 1);
        assert_eq!((t.addr, t.mode), (Ipv4Addr::new(200, 87, 1, 10), TargetMode::Service));

        active.insert((Ipv4Addr::new(200, 87, 1, 3), 443));
        active.insert((Ipv4Addr::new(200, 87, 2, 1), 22));
        active.insert((Ipv4Addr::new(200, 87, 0, 200), 22));
        let t = choose_target(net, &active, 1);
        assert_eq!((t.addr, t.mode), (Ipv4Addr::new(200, 87, 1, 3), TargetMode::Service));
    }

    #[test]
    fn service_on_broadcast_is_skipped() {
        let net = p("200.87.1.0/24");
        let active: BTreeSet<_> = [(Ipv4Addr::new(200, 87, 1, 255), 80), (Ipv4Addr::new(200, 87, 1, 0), 80)]
            .into_iter()
            .collect();
        assert_eq!(choose_target(net, &active, 1).mode, TargetMode::Random);
    }

    #[test]
    fn random_target_is_reproducible() {
        let net = p("200.87.1.0/24");
        let none = BTreeSet::new();
        let a = choose_target(net, &none, 42);
        let b = choose_target(net, &none, 42);
        assert_eq!(a, b);
        assert_eq!(a.mode, TargetMode::Random);
        assert!(net.contains(a.addr) && usable_host(a.addr));
    }

    #[test]
    fn union_dedups_overlaps() {
        let none = BTreeSet::new();
        assert_eq!(targets_for_blocks(&[p("10.0.0.0/23")], &none, 0).len(), 2);
        assert_eq!(
            targets_for_blocks(&[p("10.0.0.0/23"), p("10.0.0.0/24")], &none, 0).len(),
            2
        );
        // a /26 yields the /24 that holds it
        let t = targets_for_blocks(&[p("10.9.9.64/26")], &none, 0);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].network, p("10.9.9.0/24"));
    }

    #[test]
    fn country_scale_count() {
        // 1,305,600 addresses split over uneven allocations
        let blocks = [
            p("200.87.0.0/16"),
            p("181.114.0.0/15"),
            p("190.104.0.0/14"),
            p("201.222.0.0/16"),
            p("186.2.0.0/16"),
        ];
        let covered: u64 = PrefixSet::new(blocks).address_count();
        let extra = (1_305_600 - covered) / 256;
        let mut all = blocks.to_vec();
        for i in 0..extra as u32 {
            all.push(IpPrefix::containing(
                Ipv4Addr::from(u32::from(Ipv4Addr::new(45, 0, 0, 0)) + (i << 8)),
                24,
            ));
        }
        let targets = targets_for_blocks(&all, &BTreeSet::new(), 9);
        assert_eq!(targets.len(), 5_100);
        assert!(targets.windows(2).all(|w| w[0].network < w[1].network));
    }

    #[test]
    fn build_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bo.txt");
        std::fs::write(&path, "# bo\n10.0.0.0/23\n10.0.0.0/24\n").unwrap();
        assert_eq!(build_target_list(&path, &BTreeSet::new(), 3).unwrap().len(), 2);
        std::fs::write(&path, "# nothing\n").unwrap();
        assert!(matches!(
            build_target_list(&path, &BTreeSet::new(), 3),
            Err(TargetError::Empty(_))
        ));
        std::fs::write(&path, "10.0.0.0/23\nbogus\n").unwrap();
        let err = build_target_list(&path, &BTreeSet::new(), 3).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn target_json_shape() {
        let t = choose_target(p("10.0.0.0/24"), &BTreeSet::new(), 5);
        let line = serde_json::to_string(&t).unwrap();
        assert!(line.starts_with(r#"{"network":"10.0.0.0/24","addr":"10.0.0."#));
        assert!(line.ends_with(r#","mode":"random"}"#));
    }

    proptest! {
        #[test]
        fn split_covers_exactly(base in any::<u32>(), len in 12u8..=24) {
            let prefix = IpPrefix::containing(Ipv4Addr::from(base), len);
            let parts = split_to_slash24(prefix).unwrap();
            prop_assert_eq!(parts.iter().map(|q| q.size()).sum::<u64>(), prefix.size());
            for w in parts.windows(2) {
                prop_assert_eq!(w[0].last() as u64 + 1, w[1].first() as u64);
            }
            prop_assert_eq!(parts[0].first(), prefix.first());
            prop_assert_eq!(parts.last().unwrap().last(), prefix.last());
            prop_assert!(parts.iter().all(|q| q.len() == 24 && prefix.covers(q)));
        }

        #[test]
        fn targets_never_network_or_broadcast(net in any::<u32>(), seed in any::<u64>(), svc in any::<u8>()) {
            let network = IpPrefix::containing(Ipv4Addr::from(net), 24);
            let mut active = BTreeSet::new();
            active.insert((Ipv4Addr::from(network.first() + svc as u32), 80));
            for t in [choose_target(network, &active, seed), choose_target(network, &BTreeSet::new(), seed)] {
                prop_assert!(network.contains(t.addr));
                prop_assert!(usable_host(t.addr));
            }
        }
    }
}
