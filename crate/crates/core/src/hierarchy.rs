//! Two-level all-gather and reduce-scatter.
//!
//! All-gather: the `M` inter-node sub-communicators gather concurrently,
//! then each node gathers internally, then a local transpose restores global
//! rank order. Reduce-scatter runs the mirror image: local transpose,
//! intra-node reduce-scatter, inter-node reduce-scatter.

use crate::collectives::{self, CollectiveKind, FlatAlgorithm};
use crate::costmodel::Selector;
use crate::error::{Error, Result};
use crate::topology::Topology;
use crate::transport::{Communicator, Context};

/// Inter-node algorithm choice for a hierarchical collective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterAlgorithm {
    Ring,
    Recursive,
    /// Resolved per call from the node count and message size.
    Auto,
}

impl std::fmt::Display for InterAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InterAlgorithm::Ring => "ring",
            InterAlgorithm::Recursive => "recursive",
            InterAlgorithm::Auto => "auto",
        })
    }
}

impl std::str::FromStr for InterAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(InterAlgorithm::Ring),
            "recursive" | "rec" => Ok(InterAlgorithm::Recursive),
            "auto" => Ok(InterAlgorithm::Auto),
            other => Err(Error::InvalidConfig(format!("unknown inter-node algorithm `{other}`"))),
        }
    }
}

impl From<FlatAlgorithm> for InterAlgorithm {
    fn from(a: FlatAlgorithm) -> Self {
        match a {
            FlatAlgorithm::Ring => InterAlgorithm::Ring,
            FlatAlgorithm::Recursive => InterAlgorithm::Recursive,
        }
    }
}

/// Any collective algorithm offered by the library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Flat(FlatAlgorithm),
    Hierarchical(InterAlgorithm),
}

impl Algorithm {
    pub const RING: Algorithm = Algorithm::Flat(FlatAlgorithm::Ring);
    pub const RECURSIVE: Algorithm = Algorithm::Flat(FlatAlgorithm::Recursive);

    /// Runs the algorithm on a world communicator laid out as `topo`.
    pub fn execute(
        &self,
        topo: Topology,
        collective: CollectiveKind,
        world: &Communicator<'_>,
        input: &[f32],
    ) -> Result<Vec<f32>> {
        match *self {
            Algorithm::Flat(a) => collectives::run_collective(world, collective, a, input),
            Algorithm::Hierarchical(inter) => HierPlan::new(topo, collective, inter)?.execute(world, input),
        }
    }

    /// Replaces [`InterAlgorithm::Auto`] by the choice the analytic
    /// selector makes for a collective whose full buffer is `m_bytes`.
    pub fn resolve(&self, topo: &Topology, m_bytes: f64, params: &crate::costmodel::CostParams) -> Result<Algorithm> {
        match *self {
            Algorithm::Hierarchical(InterAlgorithm::Auto) => {
                let plan = HierPlan::new(*topo, CollectiveKind::AllGather, InterAlgorithm::Auto)?
                    .with_selector(Selector::Analytic(*params));
                Ok(Algorithm::Hierarchical(plan.resolve_inter(m_bytes)?.into()))
            }
            other => Ok(other),
        }
    }

    /// Whether the algorithm can run on `topo`.
    pub fn supports(&self, topo: &Topology) -> Result<()> {
        match *self {
            Algorithm::Flat(FlatAlgorithm::Recursive) if !topo.world_size().is_power_of_two() => {
                Err(Error::NonPowerOfTwo(topo.world_size()))
            }
            Algorithm::Hierarchical(InterAlgorithm::Recursive) if !topo.num_nodes().is_power_of_two() => {
                Err(Error::NonPowerOfTwo(topo.num_nodes()))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algorithm::Flat(a) => write!(f, "{a}"),
            Algorithm::Hierarchical(i) => write!(f, "hierarchical-{i}"),
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Algorithm::RING),
            "recursive" | "rec" => Ok(Algorithm::RECURSIVE),
            "hierarchical" => Ok(Algorithm::Hierarchical(InterAlgorithm::Auto)),
            other => match other.strip_prefix("hierarchical-") {
                Some(inter) => Ok(Algorithm::Hierarchical(inter.parse()?)),
                None => Err(Error::InvalidConfig(format!("unknown algorithm `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct HierPlan {
    topo: Topology,
    inter: InterAlgorithm,
    collective: CollectiveKind,
    selector: Selector,
}

impl HierPlan {
    pub fn new(topo: Topology, collective: CollectiveKind, inter: InterAlgorithm) -> Result<Self> {
        let n = topo.num_nodes();
        if inter == InterAlgorithm::Recursive && !n.is_power_of_two() {
            return Err(Error::NonPowerOfTwo(n));
        }
        Ok(Self {
            topo,
            inter,
            collective,
            selector: Selector::default(),
        })
    }

    /// Replaces the analytic default used by [`InterAlgorithm::Auto`].
    pub fn with_selector(mut self, selector: Selector) -> Self {
        self.selector = selector;
        self
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn inter(&self) -> InterAlgorithm {
        self.inter
    }

    pub fn collective(&self) -> CollectiveKind {
        self.collective
    }

    /// Concrete inter-node algorithm for a collective whose full buffer is
    /// `m_bytes`.
    pub fn resolve_inter(&self, m_bytes: f64) -> Result<FlatAlgorithm> {
        match self.inter {
            InterAlgorithm::Ring => Ok(FlatAlgorithm::Ring),
            InterAlgorithm::Recursive => Ok(FlatAlgorithm::Recursive),
            InterAlgorithm::Auto if self.topo.num_nodes() < 2 => Ok(FlatAlgorithm::Ring),
            InterAlgorithm::Auto => self.selector.choose(self.topo.num_nodes(), m_bytes),
        }
    }

    /// Runs the plan's collective on a world communicator.
    pub fn execute(&self, world: &Communicator<'_>, input: &[f32]) -> Result<Vec<f32>> {
        match self.collective {
            CollectiveKind::AllGather => hier_all_gather(self, world, input),
            CollectiveKind::ReduceScatter => hier_reduce_scatter(self, world, input),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockOrdering {
    /// Block `g` belongs to global rank `g = n*M + j`.
    GlobalRankMajor,
    /// Block `j*N + n` belongs to global rank `n*M + j`.
    LocalMajor,
}

/// A buffer viewed as `block_count` equal blocks in a given order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub block_count: usize,
    pub block_len: usize,
    pub ordering: BlockOrdering,
}

impl BlockLayout {
    pub fn new(buf_len: usize, block_count: usize, ordering: BlockOrdering) -> Result<Self> {
        if block_count == 0 || !buf_len.is_multiple_of(block_count) {
            return Err(Error::NotDivisible {
                len: buf_len,
                parts: block_count,
            });
        }
        Ok(Self {
            block_count,
            block_len: buf_len / block_count,
            ordering,
        })
    }

    pub fn len(&self) -> usize {
        self.block_count * self.block_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, i: usize) -> std::ops::Range<usize> {
        i * self.block_len..(i + 1) * self.block_len
    }
}

fn transpose_blocks(buf: &[f32], rows: usize, cols: usize, block_len: usize) -> Result<Vec<f32>> {
    let expected = rows * cols * block_len;
    if buf.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: buf.len(),
        });
    }
    let mut out = vec![0f32; expected];
    for r in 0..rows {
        for c in 0..cols {
            let src = (r * cols + c) * block_len;
            let dst = (c * rows + r) * block_len;
            out[dst..dst + block_len].copy_from_slice(&buf[src..src + block_len]);
        }
    }
    Ok(out)
}

/// Treats `buf` as an `M x N` matrix of blocks (row `j`, column `n`) and
/// returns its `N x M` transpose: output block `n*M + j` is input block
/// `j*N + n`.
pub fn shuffle_local_major_to_global(
    buf: &[f32],
    n_nodes: usize,
    m_local: usize,
    block_len: usize,
) -> Result<Vec<f32>> {
    transpose_blocks(buf, m_local, n_nodes, block_len)
}

/// Inverse of [`shuffle_local_major_to_global`].
pub fn shuffle_global_to_local_major(
    buf: &[f32],
    n_nodes: usize,
    m_local: usize,
    block_len: usize,
) -> Result<Vec<f32>> {
    transpose_blocks(buf, n_nodes, m_local, block_len)
}

struct SubComms<'t> {
    inter: Communicator<'t>,
    intra: Communicator<'t>,
}

fn split<'t>(topo: &Topology, world: &Communicator<'t>) -> Result<SubComms<'t>> {
    if world.size() != topo.world_size() {
        return Err(Error::InvalidConfig(format!(
            "communicator has {} ranks but topology {} has {}",
            world.size(),
            topo,
            topo.world_size()
        )));
    }
    let g = world.index();
    let g = crate::topology::RankId(g);
    let (node, local) = (topo.node_of(g), topo.local_of(g));
    let to_global =
        |group: crate::topology::GroupSpec| -> Vec<_> { group.members.iter().map(|r| world.members()[r.0]).collect() };
    let inter = world.split(to_global(topo.inter_node_group(local)?), Context::INTER_NODE)?;
    let intra = world.split(to_global(topo.intra_node_group(node)?), Context::INTRA_NODE)?;
    Ok(SubComms { inter, intra })
}

/// Hierarchical all-gather of `n` elements per rank into `p * n`, identical
/// to a flat all-gather on `world`.
pub fn hier_all_gather(plan: &HierPlan, world: &Communicator<'_>, input: &[f32]) -> Result<Vec<f32>> {
    let topo = &plan.topo;
    let inter_alg = plan.resolve_inter((topo.world_size() * input.len() * 4) as f64)?;
    let subs = split(topo, world)?;
    let across = collectives::all_gather(&subs.inter, inter_alg, input)?;
    let local_major = collectives::ring_all_gather(&subs.intra, &across)?;
    shuffle_local_major_to_global(&local_major, topo.num_nodes(), topo.gpus_per_node(), input.len())
}

/// Hierarchical reduce-scatter of `p * n` elements per rank into chunk `g`
/// of `n` elements, identical to a flat reduce-scatter on `world`.
pub fn hier_reduce_scatter(plan: &HierPlan, world: &Communicator<'_>, input: &[f32]) -> Result<Vec<f32>> {
    let topo = &plan.topo;
    let p = topo.world_size();
    if !input.len().is_multiple_of(p) {
        return Err(Error::NotDivisible {
            len: input.len(),
            parts: p,
        });
    }
    let inter_alg = plan.resolve_inter((input.len() * 4) as f64)?;
    let subs = split(topo, world)?;
    let local_major = shuffle_global_to_local_major(input, topo.num_nodes(), topo.gpus_per_node(), input.len() / p)?;
    let node_sum = collectives::ring_reduce_scatter(&subs.intra, &local_major)?;
    collectives::reduce_scatter(&subs.inter, inter_alg, &node_sum)
}
