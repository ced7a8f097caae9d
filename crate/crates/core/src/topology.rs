//! Machine model: `N` nodes, `M` GPUs per node, `K` NICs per node.
//!
//! Global ranks are numbered node-major, `g = node * M + local`, so that the
//! rank-ordered concatenation produced by an all-gather is also the
//! concatenation by `(node, local)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    num_nodes: usize,
    gpus_per_node: usize,
    nics_per_node: usize,
}

/// A global rank in `[0, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RankId(pub usize);

impl RankId {
    pub fn global(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for RankId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    /// GPUs sharing local index `local_rank` across every node.
    InterNode {
        local_rank: usize,
    },
    /// All GPUs of `node`.
    IntraNode {
        node: usize,
    },
    World,
}

/// An ordered list of global ranks forming a (sub-)communicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub kind: GroupKind,
    pub members: Vec<RankId>,
}

impl GroupSpec {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn position(&self, rank: RankId) -> Option<usize> {
        self.members.iter().position(|&m| m == rank)
    }
}

/// Validates and builds a topology.
pub fn build_topology(num_nodes: usize, gpus_per_node: usize, nics_per_node: usize) -> Result<Topology> {
    Topology::new(num_nodes, gpus_per_node, nics_per_node)
}

impl Topology {
    pub fn new(num_nodes: usize, gpus_per_node: usize, nics_per_node: usize) -> Result<Self> {
        if num_nodes == 0 || gpus_per_node == 0 || nics_per_node == 0 {
            return Err(Error::InvalidTopology(format!(
                "all counts must be positive (nodes={num_nodes}, gpus_per_node={gpus_per_node}, nics_per_node={nics_per_node})"
            )));
        }
        if !gpus_per_node.is_multiple_of(nics_per_node) {
            return Err(Error::InvalidTopology(format!(
                "nics_per_node={nics_per_node} does not divide gpus_per_node={gpus_per_node}"
            )));
        }
        Ok(Self {
            num_nodes,
            gpus_per_node,
            nics_per_node,
        })
    }

    /// `N`
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// `M`
    pub fn gpus_per_node(&self) -> usize {
        self.gpus_per_node
    }

    /// `K`
    pub fn nics_per_node(&self) -> usize {
        self.nics_per_node
    }

    /// Total ranks `p = N * M`.
    pub fn world_size(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    pub fn gpus_per_nic(&self) -> usize {
        self.gpus_per_node / self.nics_per_node
    }

    pub fn rank(&self, node: usize, local: usize) -> RankId {
        debug_assert!(node < self.num_nodes && local < self.gpus_per_node);
        RankId(node * self.gpus_per_node + local)
    }

    pub fn node_of(&self, rank: RankId) -> usize {
        rank.0 / self.gpus_per_node
    }

    pub fn local_of(&self, rank: RankId) -> usize {
        rank.0 % self.gpus_per_node
    }

    pub fn contains(&self, rank: RankId) -> bool {
        rank.0 < self.world_size()
    }

    /// NIC serving `rank`: consecutive blocks of `M / K` local ranks share a NIC.
    pub fn nic_of(&self, rank: RankId) -> usize {
        self.nic_of_local(self.local_of(rank))
    }

    pub fn nic_of_local(&self, local: usize) -> usize {
        local / self.gpus_per_nic()
    }

    /// Members `[node * M + local_rank for node in 0..N]`.
    pub fn inter_node_group(&self, local_rank: usize) -> Result<GroupSpec> {
        if local_rank >= self.gpus_per_node {
            return Err(Error::IndexOutOfRange {
                index: local_rank,
                limit: self.gpus_per_node,
            });
        }
        Ok(GroupSpec {
            kind: GroupKind::InterNode { local_rank },
            members: (0..self.num_nodes).map(|n| self.rank(n, local_rank)).collect(),
        })
    }

    /// Members `[node * M + j for j in 0..M]`.
    pub fn intra_node_group(&self, node: usize) -> Result<GroupSpec> {
        if node >= self.num_nodes {
            return Err(Error::IndexOutOfRange {
                index: node,
                limit: self.num_nodes,
            });
        }
        Ok(GroupSpec {
            kind: GroupKind::IntraNode { node },
            members: (0..self.gpus_per_node).map(|j| self.rank(node, j)).collect(),
        })
    }

    pub fn world_group(&self) -> GroupSpec {
        GroupSpec {
            kind: GroupKind::World,
            members: (0..self.world_size()).map(RankId).collect(),
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{} ({} NICs/node)",
            self.num_nodes, self.gpus_per_node, self.nics_per_node
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn members(g: &GroupSpec) -> Vec<usize> {
        g.members.iter().map(|r| r.0).collect()
    }

    #[test]
    fn singleton_topology() {
        let t = build_topology(1, 1, 1).unwrap();
        assert_eq!(t.world_size(), 1);
    }

    #[test]
    fn eight_gpus_four_nics() {
        let t = build_topology(2, 8, 4).unwrap();
        assert_eq!(t.world_size(), 16);
        assert_eq!(t.gpus_per_nic(), 2);
    }

    #[test]
    fn rejects_non_dividing_nic_count() {
        assert!(matches!(build_topology(2, 8, 3), Err(Error::InvalidTopology(_))));
        assert!(matches!(build_topology(0, 8, 4), Err(Error::InvalidTopology(_))));
        assert!(matches!(build_topology(2, 0, 1), Err(Error::InvalidTopology(_))));
        assert!(matches!(build_topology(2, 8, 0), Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn inter_node_groups() {
        let t = build_topology(2, 2, 1).unwrap();
        assert_eq!(members(&t.inter_node_group(0).unwrap()), vec![0, 2]);
        assert_eq!(members(&t.inter_node_group(1).unwrap()), vec![1, 3]);
        let t = build_topology(3, 2, 1).unwrap();
        assert!(matches!(
            t.inter_node_group(2),
            Err(Error::IndexOutOfRange { index: 2, limit: 2 })
        ));
    }

    #[test]
    fn intra_node_groups() {
        let t = build_topology(2, 2, 1).unwrap();
        assert_eq!(members(&t.intra_node_group(1).unwrap()), vec![2, 3]);
        assert!(matches!(t.intra_node_group(2), Err(Error::IndexOutOfRange { .. })));
        let t = build_topology(1, 4, 1).unwrap();
        assert_eq!(members(&t.intra_node_group(0).unwrap()), vec![0, 1, 2, 3]);
    }

    #[test]
    fn nic_mapping() {
        let t = build_topology(1, 8, 4).unwrap();
        assert_eq!(t.nic_of(RankId(1)), 0);
        assert_eq!(t.nic_of(RankId(7)), 3);
        let t = build_topology(1, 4, 1).unwrap();
        assert_eq!(t.nic_of(RankId(3)), 0);
    }

    fn topo_strategy() -> impl Strategy<Value = Topology> {
        (1usize..6, prop::sample::select(vec![1usize, 2, 4, 6, 8]), 0usize..4).prop_map(|(n, m, k_pick)| {
            let divisors: Vec<usize> = (1..=m).filter(|k| m % k == 0).collect();
            let k = divisors[k_pick % divisors.len()];
            Topology::new(n, m, k).unwrap()
        })
    }

    proptest! {
        #[test]
        fn groups_partition_the_world(t in topo_strategy()) {
            let p = t.world_size();
            let mut inter_seen = vec![0usize; p];
            for j in 0..t.gpus_per_node() {
                let g = t.inter_node_group(j).unwrap();
                prop_assert_eq!(g.len(), t.num_nodes());
                for (n, r) in g.members.iter().enumerate() {
                    prop_assert_eq!(t.local_of(*r), j);
                    prop_assert_eq!(t.node_of(*r), n);
                    inter_seen[r.0] += 1;
                }
            }
            let mut intra_seen = vec![0usize; p];
            for n in 0..t.num_nodes() {
                let g = t.intra_node_group(n).unwrap();
                prop_assert_eq!(g.len(), t.gpus_per_node());
                for (j, r) in g.members.iter().enumerate() {
                    prop_assert_eq!(t.local_of(*r), j);
                    intra_seen[r.0] += 1;
                }
            }
            prop_assert!(inter_seen.iter().all(|&c| c == 1));
            prop_assert!(intra_seen.iter().all(|&c| c == 1));
        }

        #[test]
        fn rank_numbering_round_trips(t in topo_strategy()) {
            for g in 0..t.world_size() {
                let r = RankId(g);
                prop_assert_eq!(t.rank(t.node_of(r), t.local_of(r)), r);
            }
        }

        #[test]
        fn nics_serve_equal_consecutive_blocks(t in topo_strategy()) {
            let mut served = vec![0usize; t.nics_per_node()];
            for local in 0..t.gpus_per_node() {
                let nic = t.nic_of_local(local);
                prop_assert!(nic < t.nics_per_node());
                prop_assert_eq!(nic, local / t.gpus_per_nic());
                served[nic] += 1;
            }
            prop_assert!(served.iter().all(|&s| s == t.gpus_per_nic()));
        }
    }
}
