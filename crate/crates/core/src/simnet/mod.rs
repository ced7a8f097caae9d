//! Deterministic virtual-time network simulator.
//!
//! A collective's schedule is replayed in bulk-synchronous steps. Within a
//! step every message charges its resources and the step lasts as long as
//! the busiest resource:
//!
//! * inter-node message of `b` bytes: `alpha_inter + beta_inter * b` on the
//!   source NIC (egress) and on the destination NIC (ingress); on a
//!   ring-of-nodes machine additionally `beta_inter * b` on every directed
//!   ring link of its shortest path (ties at half the ring go clockwise when
//!   `src < dst`);
//! * intra-node message: `alpha_intra + beta_intra * b` on the sending rank;
//! * reduce-scatter: `gamma * b` on the receiving rank.
//!
//! Under [`NicPolicy::Balanced`] the inter-node messages of a hierarchical
//! collective use the NIC attached to the sending and receiving GPU, while
//! the messages of a flat collective are striped evenly over all NICs of the
//! node. [`NicPolicy::SingleNic`] writes through NIC 0 and reads through
//! NIC `K - 1`.

mod engine;
pub mod schedule;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::collectives::{CollectiveKind, FlatAlgorithm};
use crate::costmodel::CostParams;
use crate::error::{Error, Result};
use crate::hierarchy::{Algorithm, InterAlgorithm};
use crate::topology::Topology;
use crate::transport::LogEntry;

use engine::Engine;
pub use engine::{NicRoute, Resource};
pub use schedule::{Phase, Schedule, SimMessage, Step, StepHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NicPolicy {
    #[default]
    Balanced,
    SingleNic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhysTopology {
    #[default]
    FullyConnected,
    RingOfNodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReduceProfile {
    #[default]
    Fast,
    Slow,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, $($s:literal => $v:expr),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::InvalidConfig(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

str_enum!(NicPolicy, "NIC policy", "balanced" => NicPolicy::Balanced, "single_nic" => NicPolicy::SingleNic);
str_enum!(PhysTopology, "physical topology",
    "fully_connected" => PhysTopology::FullyConnected, "ring_of_nodes" => PhysTopology::RingOfNodes);
str_enum!(ReduceProfile, "reduce profile", "fast" => ReduceProfile::Fast, "slow" => ReduceProfile::Slow);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub topo: Topology,
    pub params: CostParams,
    pub nic_policy: NicPolicy,
    pub phys_topology: PhysTopology,
    pub reduce_profile: ReduceProfile,
}

impl SimConfig {
    /// Balanced NICs, fully connected nodes, fast reductions, default costs.
    pub fn new(topo: Topology) -> Self {
        Self {
            topo,
            params: CostParams::default(),
            nic_policy: NicPolicy::Balanced,
            phys_topology: PhysTopology::FullyConnected,
            reduce_profile: ReduceProfile::Fast,
        }
    }

    pub fn with_policy(mut self, policy: NicPolicy) -> Self {
        self.nic_policy = policy;
        self
    }

    pub fn with_phys(mut self, phys: PhysTopology) -> Self {
        self.phys_topology = phys;
        self
    }

    pub fn with_profile(mut self, profile: ReduceProfile) -> Self {
        self.reduce_profile = profile;
        self
    }

    pub fn with_params(mut self, params: CostParams) -> Self {
        self.params = params;
        self
    }

    /// Reduction cost per byte under the configured profile.
    pub fn gamma(&self) -> f64 {
        match self.reduce_profile {
            ReduceProfile::Fast => self.params.gamma_reduce_fast,
            ReduceProfile::Slow => self.params.gamma_reduce_slow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NicCount {
    pub bytes_in: u64,
    pub bytes_out: u64,
    /// Packets written to the NIC (ingress).
    pub posted_pkts: u64,
    /// Packets read from the NIC (egress).
    pub non_posted_pkts: u64,
}

/// Per-NIC counters summed over all nodes, indexed by NIC number `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NicCounters {
    pub per_nic: Vec<NicCount>,
}

impl NicCounters {
    pub fn total_out(&self) -> u64 {
        self.per_nic.iter().map(|c| c.bytes_out).sum()
    }

    pub fn total_in(&self) -> u64 {
        self.per_nic.iter().map(|c| c.bytes_in).sum()
    }

    /// `max / min` of per-NIC `bytes_out`; `None` if some NIC sent nothing.
    pub fn out_imbalance(&self) -> Option<f64> {
        let max = self.per_nic.iter().map(|c| c.bytes_out).max()?;
        let min = self.per_nic.iter().map(|c| c.bytes_out).min()?;
        (min > 0).then(|| max as f64 / min as f64)
    }

    /// CSV `nic,bytes_in,bytes_out,posted_pkts,non_posted_pkts`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["nic", "bytes_in", "bytes_out", "posted_pkts", "non_posted_pkts"])?;
        for (nic, c) in self.per_nic.iter().enumerate() {
            wtr.write_record([
                nic.to_string(),
                c.bytes_in.to_string(),
                c.bytes_out.to_string(),
                c.posted_pkts.to_string(),
                c.non_posted_pkts.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracedMessage {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub nic_src: Option<usize>,
    pub nic_dst: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub messages: Vec<TracedMessage>,
    pub busy: Vec<(Resource, f64)>,
    pub makespan_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepTrace {
    pub steps: Vec<StepRecord>,
    pub total_s: f64,
}

impl StepTrace {
    /// One JSON object per step: `{step, messages, makespan_s}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            messages: &'a [TracedMessage],
            makespan_s: f64,
        }
        for s in &self.steps {
            serde_json::to_writer(
                &mut w,
                &Line {
                    step: s.step,
                    messages: &s.messages,
                    makespan_s: s.makespan_s,
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub seconds: f64,
    pub counters: NicCounters,
    pub trace: StepTrace,
}

/// Resolves `algorithm` into the schedule the real implementation would
/// issue for a full buffer of `m_bytes`.
pub fn build_schedule(
    cfg: &SimConfig,
    collective: CollectiveKind,
    algorithm: Algorithm,
    m_bytes: u64,
) -> Result<Schedule> {
    let (flat, inter) = match algorithm.resolve(&cfg.topo, m_bytes as f64, &cfg.params)? {
        Algorithm::Flat(a) => (a, None),
        Algorithm::Hierarchical(InterAlgorithm::Recursive) => (FlatAlgorithm::Ring, Some(FlatAlgorithm::Recursive)),
        Algorithm::Hierarchical(_) => (FlatAlgorithm::Ring, Some(FlatAlgorithm::Ring)),
    };
    Schedule::new(cfg.topo, collective, flat, inter, m_bytes)
}

fn run_steps<'a>(cfg: &SimConfig, steps: impl Iterator<Item = (StepHeader, &'a [SimMessage])>) -> SimResult {
    let mut engine = Engine::new(cfg);
    let mut trace = StepTrace::default();
    for (i, (header, msgs)) in steps.enumerate() {
        let mut routes = Vec::with_capacity(msgs.len());
        let (makespan, busy) = engine.step_traced(header, msgs, &mut routes);
        trace.total_s += makespan;
        trace.steps.push(StepRecord {
            step: i,
            phase: header.phase,
            messages: msgs
                .iter()
                .zip(routes)
                .map(|(m, r)| TracedMessage {
                    src: m.src,
                    dst: m.dst,
                    bytes: m.bytes,
                    nic_src: r.nic_src,
                    nic_dst: r.nic_dst,
                })
                .collect(),
            busy,
            makespan_s: makespan,
        });
    }
    SimResult {
        seconds: trace.total_s,
        counters: engine.finish(),
        trace,
    }
}

/// Simulates one collective call, keeping the full step trace.
pub fn simulate(cfg: &SimConfig, collective: CollectiveKind, algorithm: Algorithm, m_bytes: u64) -> Result<SimResult> {
    cfg.params.validate()?;
    let steps = build_schedule(cfg, collective, algorithm, m_bytes)?.steps();
    Ok(run_steps(cfg, steps.iter().map(|s| (s.header, s.messages.as_slice()))))
}

/// Virtual time and counters only; suited to large sweeps.
pub fn simulate_time(
    cfg: &SimConfig,
    collective: CollectiveKind,
    algorithm: Algorithm,
    m_bytes: u64,
) -> Result<(f64, NicCounters)> {
    cfg.params.validate()?;
    let schedule = build_schedule(cfg, collective, algorithm, m_bytes)?;
    let mut engine = Engine::new(cfg);
    let mut total = 0.0;
    schedule.visit(|header, msgs| total += engine.step(header, msgs));
    Ok((total, engine.finish()))
}

/// Times a transport log (e.g. from the simulated backend) under `cfg`.
pub fn time_log(cfg: &SimConfig, log: &[LogEntry], collective: CollectiveKind) -> Result<SimResult> {
    cfg.params.validate()?;
    let p = cfg.topo.world_size();
    if let Some(e) = log.iter().find(|e| e.src >= p || e.dst >= p) {
        return Err(Error::InvalidConfig(format!(
            "log message {} -> {} outside a {p}-rank topology",
            e.src, e.dst
        )));
    }
    let steps = schedule::steps_from_log(log, collective)?;
    Ok(run_steps(cfg, steps.iter().map(|s| (s.header, s.messages.as_slice()))))
}

/// `t(single_nic) / t(balanced)` for two configurations that differ only in
/// their NIC policy.
pub fn compare_policies(
    pair: (&SimConfig, &SimConfig),
    collective: CollectiveKind,
    algorithm: Algorithm,
    m_bytes: u64,
) -> Result<f64> {
    let (a, b) = pair;
    if a.topo != b.topo
        || a.params != b.params
        || a.phys_topology != b.phys_topology
        || a.reduce_profile != b.reduce_profile
    {
        return Err(Error::ConfigMismatch(
            "topology, costs, physical topology or reduce profile differ".into(),
        ));
    }
    let (single, balanced) = match (a.nic_policy, b.nic_policy) {
        (NicPolicy::SingleNic, NicPolicy::Balanced) => (a, b),
        (NicPolicy::Balanced, NicPolicy::SingleNic) => (b, a),
        _ => {
            return Err(Error::ConfigMismatch(
                "both configurations use the same NIC policy".into(),
            ))
        }
    };
    let ts = simulate_time(single, collective, algorithm, m_bytes)?.0;
    let tb = simulate_time(balanced, collective, algorithm, m_bytes)?.0;
    Ok(ts / tb)
}

/// Reduce-scatter time with slow reductions divided by the time with fast
/// reductions, all else fixed.
pub fn reduce_profile_gap(cfg: &SimConfig, algorithm: Algorithm, m_bytes: u64) -> Result<f64> {
    let slow = simulate_time(
        &cfg.with_profile(ReduceProfile::Slow),
        CollectiveKind::ReduceScatter,
        algorithm,
        m_bytes,
    )?
    .0;
    let fast = simulate_time(
        &cfg.with_profile(ReduceProfile::Fast),
        CollectiveKind::ReduceScatter,
        algorithm,
        m_bytes,
    )?
    .0;
    if slow == fast {
        return Ok(1.0);
    }
    Ok(slow / fast)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{t_rec, t_ring};

    const AG: CollectiveKind = CollectiveKind::AllGather;
    const RS: CollectiveKind = CollectiveKind::ReduceScatter;
    const RING: Algorithm = Algorithm::Flat(FlatAlgorithm::Ring);
    const REC: Algorithm = Algorithm::Flat(FlatAlgorithm::Recursive);

    fn cfg(n: usize, m: usize, k: usize) -> SimConfig {
        SimConfig::new(Topology::new(n, m, k).unwrap())
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
    }

    #[test]
    fn single_transfer() {
        let c = cfg(2, 1, 1);
        let m = 1 << 20;
        let t = simulate(&c, AG, RING, 2 * m).unwrap().seconds;
        assert!(close(t, c.params.alpha_inter + c.params.beta_inter * m as f64));
    }

    #[test]
    fn flat_ring_matches_formula() {
        for n in [2usize, 4, 8, 16] {
            let c = cfg(n, 1, 1);
            let m = 1u64 << 24;
            let t = simulate(&c, AG, RING, m).unwrap().seconds;
            assert!(close(t, t_ring(n, m as f64, c.params.inter())));
            let r = simulate(&c, AG, REC, m).unwrap().seconds;
            assert!(close(r, t_rec(n, m as f64, c.params.inter()).unwrap()));
        }
    }

    #[test]
    fn single_nic_sends_through_nic_zero() {
        let c = cfg(4, 8, 4).with_policy(NicPolicy::SingleNic);
        let res = simulate(&c, AG, RING, 1 << 20).unwrap();
        let out = &res.counters.per_nic;
        assert_eq!(out[0].bytes_out, res.counters.total_out());
        assert!(out[1..].iter().all(|c| c.bytes_out == 0));
        assert_eq!(out[3].bytes_in, res.counters.total_in());
    }

    #[test]
    fn conservation_under_every_policy() {
        for policy in [NicPolicy::Balanced, NicPolicy::SingleNic] {
            for alg in [RING, REC, Algorithm::Hierarchical(InterAlgorithm::Recursive)] {
                let c = cfg(4, 4, 2).with_policy(policy);
                let res = simulate(&c, AG, alg, 1 << 16).unwrap();
                let inter: u64 = res
                    .trace
                    .steps
                    .iter()
                    .flat_map(|s| &s.messages)
                    .filter(|m| m.src / 4 != m.dst / 4)
                    .map(|m| m.bytes)
                    .sum();
                assert_eq!(res.counters.total_out(), inter);
                assert_eq!(res.counters.total_in(), inter);
            }
        }
    }

    #[test]
    fn packets_round_up() {
        let mut c = cfg(2, 1, 1);
        c.params.packet_bytes = 1000;
        let res = simulate(&c, AG, RING, 2 * 2500).unwrap();
        assert_eq!(res.counters.per_nic[0].non_posted_pkts, 2 * 3);
        assert_eq!(res.counters.per_nic[0].posted_pkts, 2 * 3);
    }

    #[test]
    fn balanced_hierarchy_is_even() {
        let c = cfg(4, 8, 4);
        let res = simulate(&c, AG, Algorithm::Hierarchical(InterAlgorithm::Ring), 1 << 20).unwrap();
        assert_eq!(res.counters.out_imbalance(), Some(1.0));
    }

    #[test]
    fn inter_phase_groups_overlap() {
        // with one GPU per NIC the M concurrent sub-communicators never
        // share a resource, so the phase costs as much as one of them
        let c = cfg(4, 4, 4);
        let m = 1u64 << 20;
        let res = simulate(&c, AG, Algorithm::Hierarchical(InterAlgorithm::Ring), m).unwrap();
        let inter: f64 = res
            .trace
            .steps
            .iter()
            .filter(|s| s.phase == Phase::Inter)
            .map(|s| s.makespan_s)
            .sum();
        let one = t_ring(4, (m / 4) as f64, c.params.inter());
        assert!(close(inter, one));
    }

    #[test]
    fn ring_links_follow_shortest_path() {
        let c = cfg(8, 1, 1).with_phys(PhysTopology::RingOfNodes);
        let res = simulate(&c, AG, REC, 8 * 1024).unwrap();
        // step 0 exchanges with the partner 4 hops away; the lower rank of
        // each pair goes clockwise, so clockwise link i carries one message
        // per rank in max(0, i-3)..=min(i, 3)
        let first = &res.trace.steps[0];
        let beta_b = c.params.beta_inter * 1024.0;
        let mut cw = [0.0; 8];
        let mut ccw_total = 0.0;
        for (r, v) in &first.busy {
            if let Resource::Link { from, to } = *r {
                if to == (from + 1) % 8 {
                    cw[from] = *v;
                } else {
                    ccw_total += *v;
                }
            }
        }
        let expect = [1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0, 0.0];
        for i in 0..8 {
            assert!(close(cw[i], expect[i] * beta_b) || (expect[i] == 0.0 && cw[i] == 0.0));
        }
        assert!(close(ccw_total, 16.0 * beta_b));
    }

    #[test]
    fn deterministic() {
        let c = cfg(8, 4, 2).with_phys(PhysTopology::RingOfNodes);
        let a = simulate(&c, RS, Algorithm::Hierarchical(InterAlgorithm::Recursive), 1 << 22).unwrap();
        let b = simulate(&c, RS, Algorithm::Hierarchical(InterAlgorithm::Recursive), 1 << 22).unwrap();
        assert_eq!(a, b);
        let (t, counters) = simulate_time(&c, RS, Algorithm::Hierarchical(InterAlgorithm::Recursive), 1 << 22).unwrap();
        assert_eq!(t, a.seconds);
        assert_eq!(counters, a.counters);
    }

    #[test]
    fn policy_comparison() {
        let bal = cfg(2, 8, 1);
        let single = bal.with_policy(NicPolicy::SingleNic);
        assert!(close(
            compare_policies((&single, &bal), AG, RING, 1 << 28).unwrap(),
            1.0
        ));
        let bal4 = cfg(2, 8, 4);
        assert!(compare_policies((&bal4, &bal4), AG, RING, 1 << 20).is_err());
        assert!(matches!(
            compare_policies((&bal4, &single), AG, RING, 1 << 20),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn reduce_gap_identity() {
        let mut c = cfg(4, 1, 1);
        c.params.gamma_reduce_slow = c.params.gamma_reduce_fast;
        assert_eq!(reduce_profile_gap(&c, RING, 1 << 24).unwrap(), 1.0);
    }

    #[test]
    fn exports() {
        let c = cfg(2, 2, 2);
        let res = simulate(&c, AG, Algorithm::Hierarchical(InterAlgorithm::Ring), 1024).unwrap();
        let mut buf = Vec::new();
        res.trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), res.trace.steps.len());
        assert_eq!(lines[0]["messages"][0]["nic_src"], 0);
        assert!(lines[0]["makespan_s"].as_f64().unwrap() > 0.0);
        let mut csv = Vec::new();
        res.counters.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("nic,bytes_in,bytes_out,posted_pkts,non_posted_pkts\n0,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
