//! Fixtures shared by the benchmarks.

use std::net::Ipv4Addr;

use ixpwatch_core::{mix_all, AddressScope, Hop, IpPrefix, TraceRecord};

pub fn bolivia_scope() -> AddressScope {
    let p = |s: &str| s.parse::<IpPrefix>().unwrap();
    AddressScope::new([p("200.87.0.0/16"), p("181.114.0.0/17")], [p("190.94.0.0/24")]).unwrap()
}

/// `n` reached traces of 6 to 13 hops mixing domestic, IXP and foreign routers.
pub fn synthetic_traces(n: usize) -> Vec<TraceRecord> {
    (0..n)
        .map(|i| {
            let r = |k: u64| mix_all(&[i as u64, k]);
            let len = 6 + (r(0) % 8) as u8;
            let dst = Ipv4Addr::new(200, 87, (r(1) % 256) as u8, 9);
            let hops = (1..=len)
                .map(|ttl| {
                    if ttl == len {
                        return Hop::reply(ttl, dst, 1000 * ttl as u64);
                    }
                    let addr = match r(ttl as u64 + 10) % 10 {
                        0 => Ipv4Addr::new(190, 94, 0, 1),
                        1 => Ipv4Addr::new(4, 68, 110, ttl),
                        2 => return Hop::star(ttl),
                        _ => Ipv4Addr::new(200, 87, ttl, 1),
                    };
                    Hop::reply(ttl, addr, 1000 * ttl as u64)
                })
                .collect();
            TraceRecord::new(
                format!("b-{i}"),
                "bench",
                1_402_876_800 + i as i64,
                Ipv4Addr::new(200, 87, 0, 100),
                dst,
                1,
                hops,
            )
            .unwrap()
        })
        .collect()
}
