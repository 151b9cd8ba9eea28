//! Switch and transceiver cost accounting for static Clos fabrics and the
//! hybrid fabric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    /// Three-tier non-blocking fat-tree.
    FatTree,
    /// Fat-tree with 3:1 oversubscription at the ToR.
    FatTreeOs3,
    #[serde(rename = "rfabric")]
    RFabric,
}

impl TopologyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fat-tree" => Ok(TopologyKind::FatTree),
            "fat-tree-os3" => Ok(TopologyKind::FatTreeOs3),
            "rfabric" => Ok(TopologyKind::RFabric),
            other => Err(Error::config(format!("unknown topology {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TopologyKind::FatTree => "fat-tree",
            TopologyKind::FatTreeOs3 => "fat-tree-os3",
            TopologyKind::RFabric => "rfabric",
        }
    }
}

/// Unit prices in arbitrary currency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub eps_port: f64,
    pub ocs_port: f64,
    pub transceiver: f64,
    /// Fraction of ToR uplinks that also get a core-OCS port.
    pub core_fraction: f64,
}

impl Default for PriceTable {
    fn default() -> Self {
        PriceTable { eps_port: 700.0, ocs_port: 500.0, transceiver: 900.0, core_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub eps_switches: u64,
    pub eps_ports: u64,
    pub ocs_ports: u64,
    pub ocs_devices: u64,
    pub transceivers: u64,
    pub eps_cost: f64,
    pub ocs_cost: f64,
    pub transceiver_cost: f64,
    pub total: f64,
}

fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Device and transceiver counts for `endpoints` NIC ports at EPS `radix`.
/// OCS devices are sized by `ocs_radix`.
pub fn network_cost(
    kind: TopologyKind,
    endpoints: u64,
    radix: u32,
    ocs_radix: u32,
    prices: &PriceTable,
) -> Result<CostBreakdown> {
    if radix < 4 || radix % 4 != 0 {
        return Err(Error::config(format!("switch radix must be a positive multiple of 4, got {radix}")));
    }
    if endpoints == 0 {
        return Ok(CostBreakdown::default());
    }
    let k = radix as u64;
    let n = endpoints;
    let mut c = CostBreakdown::default();
    match kind {
        TopologyKind::FatTree => {
            let edge = div_ceil(2 * n, k);
            let agg = edge;
            let core = div_ceil(n, k);
            c.eps_switches = edge + agg + core;
            // host-edge, edge-agg, agg-core links, two transceivers each
            c.transceivers = 6 * n;
        }
        TopologyKind::FatTreeOs3 => {
            let down = 3 * k / 4;
            let edge = div_ceil(n, down);
            let up = edge * (k / 4);
            let agg = div_ceil(2 * up, k);
            let core = div_ceil(up, k);
            c.eps_switches = edge + agg + core;
            c.transceivers = 2 * (n + 2 * up);
        }
        TopologyKind::RFabric => {
            let tors = div_ceil(2 * n, k);
            c.eps_switches = tors;
            let uplinks = tors * k / 2;
            c.ocs_ports = uplinks + (uplinks as f64 * prices.core_fraction).ceil() as u64;
            c.ocs_devices = div_ceil(c.ocs_ports, ocs_radix.max(1) as u64);
            // OCS is transparent: only host-ToR links and ToR uplinks carry optics
            c.transceivers = 2 * n + uplinks;
        }
    }
    c.eps_ports = c.eps_switches * k;
    c.eps_cost = c.eps_ports as f64 * prices.eps_port;
    c.ocs_cost = c.ocs_ports as f64 * prices.ocs_port;
    c.transceiver_cost = c.transceivers as f64 * prices.transceiver;
    c.total = c.eps_cost + c.ocs_cost + c.transceiver_cost;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_endpoints_cost_nothing() {
        for kind in [TopologyKind::FatTree, TopologyKind::FatTreeOs3, TopologyKind::RFabric] {
            assert_eq!(network_cost(kind, 0, 64, 320, &PriceTable::default()).unwrap().total, 0.0);
        }
    }

    #[test]
    fn full_fat_tree_matches_clos_counts() {
        // k-ary fat-tree hosts k^3/4 endpoints with 5k^2/4 switches
        for k in [8u64, 16, 64] {
            let n = k * k * k / 4;
            let c = network_cost(TopologyKind::FatTree, n, k as u32, 320, &PriceTable::default()).unwrap();
            assert_eq!(c.eps_switches, 5 * k * k / 4);
            assert_eq!(c.transceivers, 6 * n);
        }
    }

    #[test]
    fn rfabric_uses_fewer_transceivers_and_costs_less() {
        let p = PriceTable::default();
        for n in [256u64, 1024, 8192] {
            let ft = network_cost(TopologyKind::FatTree, n, 64, 320, &p).unwrap();
            let rf = network_cost(TopologyKind::RFabric, n, 64, 320, &p).unwrap();
            let os = network_cost(TopologyKind::FatTreeOs3, n, 64, 320, &p).unwrap();
            assert!(rf.transceivers < ft.transceivers);
            assert!(rf.total < ft.total);
            assert!(os.total < ft.total);
        }
    }

    #[test]
    fn bad_radix_and_names_are_config_errors() {
        assert!(network_cost(TopologyKind::FatTree, 10, 6, 320, &PriceTable::default()).unwrap_err().is_config());
        assert!(TopologyKind::parse("torus").unwrap_err().is_config());
        assert_eq!(TopologyKind::parse("fat-tree-os3").unwrap(), TopologyKind::FatTreeOs3);
    }
}
