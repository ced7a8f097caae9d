//! Message schedules of every algorithm, generated step by step without
//! running the algorithms, plus conversion of transport logs into the same
//! step form.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::collectives::{exact_log2, CollectiveKind, FlatAlgorithm};
use crate::error::{Error, Result};
use crate::topology::Topology;
use crate::transport::{tags, Context, LogEntry};

/// Which communicator a step runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// The world communicator of a single-level algorithm.
    Flat,
    Inter,
    Intra,
}

impl Phase {
    pub fn from_context(ctx: Context) -> Option<Phase> {
        match ctx {
            c if c == Context::WORLD => Some(Phase::Flat),
            c if c == Context::INTER_NODE => Some(Phase::Inter),
            c if c == Context::INTRA_NODE => Some(Phase::Intra),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimMessage {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepHeader {
    pub phase: Phase,
    /// Step index within its phase.
    pub index: u32,
    /// Every message of the step is reduced into the receiver's buffer.
    pub reduce: bool,
}

/// A fully materialized step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub header: StepHeader,
    pub messages: Vec<SimMessage>,
}

#[derive(Debug, Clone, Copy)]
struct PhasePlan {
    phase: Phase,
    algorithm: FlatAlgorithm,
    /// Communicator size.
    group: usize,
    /// Bytes of one rank's block within this phase.
    block: u64,
}

/// The step structure of one collective call over a topology.
#[derive(Debug, Clone)]
pub struct Schedule {
    topo: Topology,
    collective: CollectiveKind,
    phases: Vec<PhasePlan>,
}

impl Schedule {
    /// `inter` is `None` for a flat algorithm on the world communicator and
    /// `Some(alg)` for the hierarchical algorithm with `alg` between nodes.
    /// `m_bytes` is the full buffer and must split into `p` equal blocks.
    pub fn new(
        topo: Topology,
        collective: CollectiveKind,
        flat: FlatAlgorithm,
        inter: Option<FlatAlgorithm>,
        m_bytes: u64,
    ) -> Result<Self> {
        let p = topo.world_size();
        let (n, m) = (topo.num_nodes(), topo.gpus_per_node());
        if !m_bytes.is_multiple_of(p as u64) {
            return Err(Error::NotDivisible {
                len: m_bytes as usize,
                parts: p,
            });
        }
        let b = m_bytes / p as u64;
        let phases = match inter {
            None => vec![PhasePlan {
                phase: Phase::Flat,
                algorithm: flat,
                group: p,
                block: b,
            }],
            Some(alg) => {
                let across = PhasePlan {
                    phase: Phase::Inter,
                    algorithm: alg,
                    group: n,
                    block: b,
                };
                let within = PhasePlan {
                    phase: Phase::Intra,
                    algorithm: FlatAlgorithm::Ring,
                    group: m,
                    block: b * n as u64,
                };
                match collective {
                    CollectiveKind::AllGather => vec![across, within],
                    CollectiveKind::ReduceScatter => vec![within, across],
                }
            }
        };
        for ph in &phases {
            if ph.algorithm == FlatAlgorithm::Recursive && exact_log2(ph.group).is_none() {
                return Err(Error::NonPowerOfTwo(ph.group));
            }
        }
        Ok(Self {
            topo,
            collective,
            phases,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn collective(&self) -> CollectiveKind {
        self.collective
    }

    pub fn num_steps(&self) -> usize {
        self.phases.iter().map(|ph| steps_of(ph.algorithm, ph.group)).sum()
    }

    /// Calls `f` once per step in execution order. The message slice is
    /// reused between calls.
    pub fn visit(&self, mut f: impl FnMut(StepHeader, &[SimMessage])) {
        let mut buf = Vec::with_capacity(self.topo.world_size());
        let reduce = self.collective == CollectiveKind::ReduceScatter;
        for ph in &self.phases {
            for k in 0..steps_of(ph.algorithm, ph.group) {
                buf.clear();
                for g in 0..self.groups(ph.phase) {
                    self.emit(ph, k, g, &mut buf);
                }
                f(
                    StepHeader {
                        phase: ph.phase,
                        index: k as u32,
                        reduce,
                    },
                    &buf,
                );
            }
        }
    }

    pub fn steps(&self) -> Vec<Step> {
        let mut out = Vec::with_capacity(self.num_steps());
        self.visit(|header, msgs| {
            out.push(Step {
                header,
                messages: msgs.to_vec(),
            })
        });
        out
    }

    fn groups(&self, phase: Phase) -> usize {
        match phase {
            Phase::Flat => 1,
            Phase::Inter => self.topo.gpus_per_node(),
            Phase::Intra => self.topo.num_nodes(),
        }
    }

    /// Global rank of member `i` of group `g` in `phase`.
    fn member(&self, phase: Phase, g: usize, i: usize) -> usize {
        let m = self.topo.gpus_per_node();
        match phase {
            Phase::Flat => i,
            Phase::Inter => i * m + g,
            Phase::Intra => g * m + i,
        }
    }

    fn emit(&self, ph: &PhasePlan, k: usize, g: usize, out: &mut Vec<SimMessage>) {
        let size = ph.group;
        let reduce_scatter = self.collective == CollectiveKind::ReduceScatter;
        for i in 0..size {
            let (peer, blocks) = match ph.algorithm {
                FlatAlgorithm::Ring => ((i + 1) % size, 1u64),
                FlatAlgorithm::Recursive if reduce_scatter => {
                    // distance doubles while the exchanged half shrinks
                    (i ^ (1 << k), (size >> (k + 1)) as u64)
                }
                FlatAlgorithm::Recursive => {
                    let levels = size.trailing_zeros() as usize;
                    // distance halves while the accumulated set doubles
                    (i ^ (1 << (levels - 1 - k)), 1u64 << k)
                }
            };
            out.push(SimMessage {
                src: self.member(ph.phase, g, i),
                dst: self.member(ph.phase, g, peer),
                bytes: blocks * ph.block,
            });
        }
    }
}

fn steps_of(alg: FlatAlgorithm, group: usize) -> usize {
    match alg {
        FlatAlgorithm::Ring => group.saturating_sub(1),
        FlatAlgorithm::Recursive => group.trailing_zeros() as usize,
    }
}

/// Groups a transport log into steps keyed by `(context, sequence, step)`
/// in order of first appearance. Barrier traffic is dropped.
pub fn steps_from_log(log: &[LogEntry], collective: CollectiveKind) -> Result<Vec<Step>> {
    let mut index: HashMap<(Context, u16, u32), usize> = HashMap::new();
    let mut steps: Vec<Step> = Vec::new();
    for e in log {
        let ctx = tags::context(e.tag);
        if ctx.is_barrier() {
            continue;
        }
        let phase = Phase::from_context(ctx)
            .ok_or_else(|| Error::Unsupported(format!("log entry in unknown context {}", ctx.id())))?;
        let key = (ctx, tags::sequence(e.tag), tags::step(e.tag));
        let slot = *index.entry(key).or_insert_with(|| {
            steps.push(Step {
                header: StepHeader {
                    phase,
                    index: key.2,
                    reduce: collective == CollectiveKind::ReduceScatter,
                },
                messages: Vec::new(),
            });
            steps.len() - 1
        });
        steps[slot].messages.push(SimMessage {
            src: e.src,
            dst: e.dst,
            bytes: e.bytes as u64,
        });
    }
    Ok(steps)
}
