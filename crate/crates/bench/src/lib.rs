//! Shared fixtures for the criterion benchmarks in `benches/`.

use hiercoll::transport::inprocess::InProcessWorld;
use hiercoll::{Algorithm, CollectiveKind, Topology};

/// A reusable in-process world with fixed per-rank inputs.
pub struct Fixture {
    pub topo: Topology,
    pub collective: CollectiveKind,
    world: InProcessWorld,
    inputs: Vec<Vec<f32>>,
}

impl Fixture {
    /// `m_bytes` is the full buffer of the collective.
    pub fn new(topo: Topology, collective: CollectiveKind, m_bytes: usize) -> Self {
        let p = topo.world_size();
        let elems = m_bytes / 4;
        let len = match collective {
            CollectiveKind::AllGather => elems / p,
            CollectiveKind::ReduceScatter => elems,
        };
        Self {
            topo,
            collective,
            world: InProcessWorld::new(p),
            inputs: (0..p).map(|r| vec![r as f32; len]).collect(),
        }
    }

    /// One collective call on every rank; returns rank 0's output length.
    pub fn run(&self, algorithm: Algorithm) -> usize {
        let out = self.world.run(|comm| {
            algorithm
                .execute(self.topo, self.collective, comm, &self.inputs[comm.index()])
                .expect("collective")
                .len()
        });
        out[0]
    }
}
