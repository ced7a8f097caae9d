//! Bulk-synchronous step timing over NIC, link, rank and reduction
//! resources.

use serde::Serialize;

use crate::topology::RankId;

use super::schedule::{Phase, SimMessage, StepHeader};
use super::{NicCount, NicCounters, NicPolicy, PhysTopology, SimConfig};

/// A timed resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Resource {
    NicEgress {
        node: usize,
        nic: usize,
    },
    NicIngress {
        node: usize,
        nic: usize,
    },
    /// Directed link from `from` to its ring neighbour `to`.
    Link {
        from: usize,
        to: usize,
    },
    RankEgress {
        rank: usize,
    },
    Reduce {
        rank: usize,
    },
}

/// NIC attribution of one message in a trace. `None` on both sides for
/// intra-node traffic; `None` on a side whose bytes were striped over every
/// NIC of the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NicRoute {
    pub nic_src: Option<usize>,
    pub nic_dst: Option<usize>,
}

pub(crate) struct Engine<'c> {
    cfg: &'c SimConfig,
    gamma: f64,
    nic_out: Vec<f64>,
    nic_in: Vec<f64>,
    links: Vec<f64>,
    rank_out: Vec<f64>,
    reduce: Vec<f64>,
    pub(crate) counters: Vec<NicCount>,
}

impl<'c> Engine<'c> {
    pub(crate) fn new(cfg: &'c SimConfig) -> Self {
        let t = &cfg.topo;
        let nics = t.num_nodes() * t.nics_per_node();
        let p = t.world_size();
        Self {
            cfg,
            gamma: cfg.gamma(),
            nic_out: vec![0.0; nics],
            nic_in: vec![0.0; nics],
            links: vec![0.0; 2 * t.num_nodes()],
            rank_out: vec![0.0; p],
            reduce: vec![0.0; p],
            counters: vec![NicCount::default(); t.nics_per_node()],
        }
    }

    fn k(&self) -> usize {
        self.cfg.topo.nics_per_node()
    }

    fn packets(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.cfg.params.packet_bytes)
    }

    fn nic_send(&mut self, node: usize, nic: usize, bytes: u64) {
        let p = self.cfg.params;
        let i = node * self.k() + nic;
        self.nic_out[i] += p.alpha_inter + p.beta_inter * bytes as f64;
        let pk = self.packets(bytes);
        let c = &mut self.counters[nic];
        c.bytes_out += bytes;
        c.non_posted_pkts += pk;
    }

    fn nic_recv(&mut self, node: usize, nic: usize, bytes: u64) {
        let p = self.cfg.params;
        let i = node * self.k() + nic;
        self.nic_in[i] += p.alpha_inter + p.beta_inter * bytes as f64;
        let pk = self.packets(bytes);
        let c = &mut self.counters[nic];
        c.bytes_in += bytes;
        c.posted_pkts += pk;
    }

    fn charge_links(&mut self, src_node: usize, dst_node: usize, bytes: u64) {
        let n = self.cfg.topo.num_nodes();
        let fwd = (dst_node + n - src_node) % n;
        let back = n - fwd;
        let clockwise = fwd < back || (fwd == back && src_node < dst_node);
        let cost = self.cfg.params.beta_inter * bytes as f64;
        let mut at = src_node;
        if clockwise {
            for _ in 0..fwd {
                self.links[2 * at] += cost;
                at = (at + 1) % n;
            }
        } else {
            for _ in 0..back {
                self.links[2 * at + 1] += cost;
                at = (at + n - 1) % n;
            }
        }
    }

    fn charge_message(&mut self, phase: Phase, reduce: bool, m: &SimMessage) -> NicRoute {
        let topo = self.cfg.topo;
        let (sn, dn) = (topo.node_of(RankId(m.src)), topo.node_of(RankId(m.dst)));
        if reduce {
            self.reduce[m.dst] += self.gamma * m.bytes as f64;
        }
        if sn == dn {
            let p = &self.cfg.params;
            self.rank_out[m.src] += p.alpha_intra + p.beta_intra * m.bytes as f64;
            return NicRoute {
                nic_src: None,
                nic_dst: None,
            };
        }
        if self.cfg.phys_topology == PhysTopology::RingOfNodes {
            self.charge_links(sn, dn, m.bytes);
        }
        let k = self.k();
        match self.cfg.nic_policy {
            NicPolicy::SingleNic => {
                self.nic_send(sn, 0, m.bytes);
                self.nic_recv(dn, k - 1, m.bytes);
                NicRoute {
                    nic_src: Some(0),
                    nic_dst: Some(k - 1),
                }
            }
            NicPolicy::Balanced if phase == Phase::Flat && k > 1 => {
                let base = m.bytes / k as u64;
                let extra = (m.bytes % k as u64) as usize;
                let frags = if m.bytes == 0 { 1 } else { k.min(m.bytes as usize) };
                for nic in 0..frags {
                    let len = base + u64::from(nic < extra);
                    self.nic_send(sn, nic, len);
                    self.nic_recv(dn, nic, len);
                }
                NicRoute {
                    nic_src: None,
                    nic_dst: None,
                }
            }
            NicPolicy::Balanced => {
                let (src_nic, dst_nic) = (topo.nic_of(RankId(m.src)), topo.nic_of(RankId(m.dst)));
                self.nic_send(sn, src_nic, m.bytes);
                self.nic_recv(dn, dst_nic, m.bytes);
                NicRoute {
                    nic_src: Some(src_nic),
                    nic_dst: Some(dst_nic),
                }
            }
        }
    }

    /// Charges one step and returns its makespan.
    pub(crate) fn step(&mut self, header: StepHeader, msgs: &[SimMessage]) -> f64 {
        for m in msgs {
            self.charge_message(header.phase, header.reduce, m);
        }
        self.close_step()
    }

    fn close_step(&mut self) -> f64 {
        let mut makespan = 0f64;
        for arr in [
            &mut self.nic_out,
            &mut self.nic_in,
            &mut self.links,
            &mut self.rank_out,
            &mut self.reduce,
        ] {
            for v in arr.iter_mut() {
                makespan = makespan.max(*v);
                *v = 0.0;
            }
        }
        makespan
    }

    /// Non-zero busy times of the pending step, without resetting them.
    pub(crate) fn busy(&self) -> Vec<(Resource, f64)> {
        let k = self.k();
        let n = self.cfg.topo.num_nodes();
        let mut out = Vec::new();
        let mut push = |r: Resource, v: f64| {
            if v > 0.0 {
                out.push((r, v));
            }
        };
        for (i, &v) in self.nic_out.iter().enumerate() {
            push(
                Resource::NicEgress {
                    node: i / k,
                    nic: i % k,
                },
                v,
            );
        }
        for (i, &v) in self.nic_in.iter().enumerate() {
            push(
                Resource::NicIngress {
                    node: i / k,
                    nic: i % k,
                },
                v,
            );
        }
        for (i, &v) in self.links.iter().enumerate() {
            let from = i / 2;
            let to = if i % 2 == 0 { (from + 1) % n } else { (from + n - 1) % n };
            push(Resource::Link { from, to }, v);
        }
        for (rank, &v) in self.rank_out.iter().enumerate() {
            push(Resource::RankEgress { rank }, v);
        }
        for (rank, &v) in self.reduce.iter().enumerate() {
            push(Resource::Reduce { rank }, v);
        }
        out
    }

    /// Like [`Engine::step`] but also reports per-resource busy time.
    pub(crate) fn step_traced(
        &mut self,
        header: StepHeader,
        msgs: &[SimMessage],
        routes: &mut Vec<NicRoute>,
    ) -> (f64, Vec<(Resource, f64)>) {
        for m in msgs {
            let r = self.charge_message(header.phase, header.reduce, m);
            routes.push(r);
        }
        let busy = self.busy();
        (self.close_step(), busy)
    }

    pub(crate) fn finish(self) -> NicCounters {
        NicCounters { per_nic: self.counters }
    }
}
