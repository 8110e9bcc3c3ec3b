//! Hypercube interconnect model.
//!
//! Nodes carry `d`-bit labels and two nodes are linked iff their labels
//! differ in exactly one bit. Each link dimension is classified as on-chip
//! or off-chip; the class selects a latency multiplier that scales every
//! communication cost charged over the link. Off-chip single hops are the
//! normalisation point (multiplier 1.0).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest dimension the simulator will instantiate (2^16 cores).
pub const MAX_DIMENSION: u32 = 16;

/// Default on-chip multiplier, from the measured 15.05µs vs 18.9µs level times.
pub const DEFAULT_ON_CHIP_MULTIPLIER: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("node {label} out of range for a {nodes}-node hypercube")]
    NodeOutOfRange { label: u32, nodes: u32 },
    #[error("nodes {a} and {b} are not adjacent")]
    NotAdjacent { a: u32, b: u32 },
    #[error("chip dimension {dim} out of range for dimension {d}")]
    ChipDimOutOfRange { dim: u32, d: u32 },
    #[error("dimension {0} exceeds the supported maximum of {MAX_DIMENSION}")]
    DimensionTooLarge(u32),
    #[error("invalid link multiplier {0}: must be finite and > 0")]
    BadMultiplier(f64),
    #[error("{0} is not a power of two")]
    NotPowerOfTwo(u64),
}

/// A node label in `[0, 2^d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn label(self) -> u32 {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkClass {
    OnChip,
    OffChip,
}

/// Latency multipliers per link class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkCosts {
    pub on_chip: f64,
    pub off_chip: f64,
}

impl Default for LinkCosts {
    fn default() -> Self {
        LinkCosts {
            on_chip: DEFAULT_ON_CHIP_MULTIPLIER,
            off_chip: 1.0,
        }
    }
}

impl LinkCosts {
    /// Every link costs the same as an off-chip hop.
    pub fn uniform() -> Self {
        LinkCosts {
            on_chip: 1.0,
            off_chip: 1.0,
        }
    }

    pub fn with_on_chip(on_chip: f64) -> Result<Self, TopologyError> {
        if !(on_chip.is_finite() && on_chip > 0.0) {
            return Err(TopologyError::BadMultiplier(on_chip));
        }
        Ok(LinkCosts {
            on_chip,
            off_chip: 1.0,
        })
    }

    pub fn multiplier(&self, class: LinkClass) -> f64 {
        match class {
            LinkClass::OnChip => self.on_chip,
            LinkClass::OffChip => self.off_chip,
        }
    }
}

/// A `d`-dimensional hypercube with a set of intra-chip link dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypercube {
    dim: u32,
    chip_dims: BTreeSet<u32>,
    costs: LinkCosts,
}

impl Hypercube {
    /// Builds a hypercube with the default chip mapping: the two most
    /// significant dimensions are intra-chip.
    pub fn new(dim: u32) -> Result<Self, TopologyError> {
        let chip_dims = Self::default_chip_dims(dim);
        Self::with_chip_dims(dim, chip_dims, LinkCosts::default())
    }

    /// Builds a hypercube where every link is off-chip.
    pub fn uniform(dim: u32) -> Result<Self, TopologyError> {
        Self::with_chip_dims(dim, BTreeSet::new(), LinkCosts::uniform())
    }

    pub fn with_chip_dims(
        dim: u32,
        chip_dims: BTreeSet<u32>,
        costs: LinkCosts,
    ) -> Result<Self, TopologyError> {
        if dim > MAX_DIMENSION {
            return Err(TopologyError::DimensionTooLarge(dim));
        }
        if let Some(&bad) = chip_dims.iter().find(|&&k| k >= dim) {
            return Err(TopologyError::ChipDimOutOfRange { dim: bad, d: dim });
        }
        for m in [costs.on_chip, costs.off_chip] {
            if !(m.is_finite() && m > 0.0) {
                return Err(TopologyError::BadMultiplier(m));
            }
        }
        Ok(Hypercube {
            dim,
            chip_dims,
            costs,
        })
    }

    /// `{d-2, d-1}` restricted to valid dimensions.
    pub fn default_chip_dims(dim: u32) -> BTreeSet<u32> {
        (dim.saturating_sub(2)..dim).collect()
    }

    /// Hypercube sized for `p` processors; `p` must be a power of two.
    pub fn dimension_for(p: u64) -> Result<u32, TopologyError> {
        if p == 0 || !p.is_power_of_two() {
            return Err(TopologyError::NotPowerOfTwo(p));
        }
        Ok(p.trailing_zeros())
    }

    pub fn dimension(&self) -> u32 {
        self.dim
    }

    pub fn chip_dims(&self) -> &BTreeSet<u32> {
        &self.chip_dims
    }

    pub fn link_costs(&self) -> LinkCosts {
        self.costs
    }

    pub fn node_count(&self) -> u32 {
        1 << self.dim
    }

    /// `d * 2^(d-1)`.
    pub fn edge_count(&self) -> u64 {
        if self.dim == 0 {
            0
        } else {
            u64::from(self.dim) << (self.dim - 1)
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.node_count()).map(NodeId)
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n.0 < self.node_count()
    }

    pub fn check(&self, n: NodeId) -> Result<NodeId, TopologyError> {
        if self.contains(n) {
            Ok(n)
        } else {
            Err(TopologyError::NodeOutOfRange {
                label: n.0,
                nodes: self.node_count(),
            })
        }
    }

    pub fn adjacent(&self, a: NodeId, b: NodeId) -> Result<bool, TopologyError> {
        self.check(a)?;
        self.check(b)?;
        Ok((a.0 ^ b.0).is_power_of_two())
    }

    pub fn hop_distance(&self, a: NodeId, b: NodeId) -> Result<u32, TopologyError> {
        self.check(a)?;
        self.check(b)?;
        Ok((a.0 ^ b.0).count_ones())
    }

    pub fn neighbours(&self, n: NodeId) -> Result<Vec<NodeId>, TopologyError> {
        self.check(n)?;
        Ok((0..self.dim).map(|k| NodeId(n.0 ^ (1 << k))).collect())
    }

    /// Each undirected edge once, as `(low, high)` pairs.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.nodes().flat_map(move |n| {
            (0..self.dim)
                .filter(move |k| n.0 & (1 << k) == 0)
                .map(move |k| (n, NodeId(n.0 | (1 << k))))
        })
    }

    pub fn link_class(&self, a: NodeId, b: NodeId) -> Result<LinkClass, TopologyError> {
        if !self.adjacent(a, b)? {
            return Err(TopologyError::NotAdjacent { a: a.0, b: b.0 });
        }
        Ok(self.class_of_dim((a.0 ^ b.0).trailing_zeros()))
    }

    fn class_of_dim(&self, k: u32) -> LinkClass {
        if self.chip_dims.contains(&k) {
            LinkClass::OnChip
        } else {
            LinkClass::OffChip
        }
    }

    /// Sum of per-hop multipliers along the dimension-ordered route from
    /// `a` to `b` (lowest differing bit first). Zero for `a == b`.
    pub fn path_multiplier(&self, a: NodeId, b: NodeId) -> Result<f64, TopologyError> {
        self.check(a)?;
        self.check(b)?;
        let mut diff = a.0 ^ b.0;
        let mut total = 0.0;
        while diff != 0 {
            let k = diff.trailing_zeros();
            total += self.costs.multiplier(self.class_of_dim(k));
            diff &= diff - 1;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chip45() -> Hypercube {
        Hypercube::with_chip_dims(6, [4, 5].into_iter().collect(), LinkCosts::default()).unwrap()
    }

    #[test]
    fn adjacency_examples() {
        let h = Hypercube::new(6).unwrap();
        assert!(h.adjacent(NodeId(0b000000), NodeId(0b000001)).unwrap());
        assert!(!h.adjacent(NodeId(5), NodeId(6)).unwrap());
        assert_eq!(h.edge_count(), 192);
        assert_eq!(h.edges().count(), 192);
    }

    #[test]
    fn edge_count_matches_enumeration() {
        for d in 0..=8 {
            let h = Hypercube::uniform(d).unwrap();
            let mut brute = 0u64;
            for a in 0..h.node_count() {
                for b in (a + 1)..h.node_count() {
                    if (a ^ b).count_ones() == 1 {
                        brute += 1;
                    }
                }
            }
            assert_eq!(h.edge_count(), brute, "d={d}");
        }
    }

    #[test]
    fn hop_distance_examples() {
        let h = Hypercube::new(6).unwrap();
        assert_eq!(h.hop_distance(NodeId(0), NodeId(0)).unwrap(), 0);
        assert_eq!(h.hop_distance(NodeId(0), NodeId(63)).unwrap(), 6);
        assert_eq!(h.hop_distance(NodeId(8), NodeId(12)).unwrap(), 1);
    }

    #[test]
    fn out_of_range_labels() {
        let h = Hypercube::new(3).unwrap();
        assert_eq!(
            h.adjacent(NodeId(8), NodeId(0)),
            Err(TopologyError::NodeOutOfRange { label: 8, nodes: 8 })
        );
        assert!(h.hop_distance(NodeId(0), NodeId(9)).is_err());
    }

    #[test]
    fn link_class_examples() {
        let h = chip45();
        assert_eq!(h.link_class(NodeId(0), NodeId(32)).unwrap(), LinkClass::OnChip);
        assert_eq!(h.link_class(NodeId(0), NodeId(1)).unwrap(), LinkClass::OffChip);
        assert_eq!(
            h.link_class(NodeId(0), NodeId(3)),
            Err(TopologyError::NotAdjacent { a: 0, b: 3 })
        );
        let flat = Hypercube::uniform(6).unwrap();
        for (a, b) in flat.edges() {
            assert_eq!(flat.link_class(a, b).unwrap(), LinkClass::OffChip);
        }
    }

    #[test]
    fn default_chip_dims_are_top_two() {
        assert_eq!(Hypercube::default_chip_dims(6), [4, 5].into_iter().collect());
        assert_eq!(Hypercube::default_chip_dims(1), [0].into_iter().collect());
        assert!(Hypercube::default_chip_dims(0).is_empty());
        assert_eq!(Hypercube::new(6).unwrap(), chip45());
    }

    #[test]
    fn rejects_bad_configuration() {
        assert_eq!(
            Hypercube::with_chip_dims(3, [3].into_iter().collect(), LinkCosts::default()),
            Err(TopologyError::ChipDimOutOfRange { dim: 3, d: 3 })
        );
        assert!(LinkCosts::with_on_chip(0.0).is_err());
        assert!(Hypercube::uniform(MAX_DIMENSION + 1).is_err());
        assert_eq!(Hypercube::dimension_for(64).unwrap(), 6);
        assert_eq!(Hypercube::dimension_for(3), Err(TopologyError::NotPowerOfTwo(3)));
    }

    #[test]
    fn path_multiplier_sums_hops() {
        let h = chip45();
        assert_eq!(h.path_multiplier(NodeId(0), NodeId(0)).unwrap(), 0.0);
        assert_eq!(h.path_multiplier(NodeId(0), NodeId(1)).unwrap(), 1.0);
        assert_eq!(h.path_multiplier(NodeId(0), NodeId(16)).unwrap(), 0.8);
        assert!((h.path_multiplier(NodeId(0), NodeId(0b110001)).unwrap() - 2.6).abs() < 1e-12);
    }

    #[test]
    fn degrees_sum_to_twice_edges() {
        for d in 0..=7 {
            let h = Hypercube::uniform(d).unwrap();
            let total: usize = h.nodes().map(|n| h.neighbours(n).unwrap().len()).sum();
            assert_eq!(total as u64, 2 * h.edge_count());
            for n in h.nodes() {
                assert_eq!(h.neighbours(n).unwrap().len(), d as usize);
            }
        }
    }
}
