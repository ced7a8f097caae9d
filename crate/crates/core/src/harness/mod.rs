//! Benchmark sweeps over the three backends, result records, summaries,
//! heatmap data, selector calibration and the correctness suite.

pub mod config;
pub mod inputs;

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::collectives::{all_gather, CollectiveKind, FlatAlgorithm};
use crate::costmodel::{default_size_buckets, CalibrationRow, CalibrationTable, CostParams};
use crate::error::{Error, Result};
use crate::hierarchy::{Algorithm, InterAlgorithm};
use crate::simnet::schedule::{steps_from_log, Step};
use crate::simnet::{build_schedule, simulate_time, NicPolicy, PhysTopology, ReduceProfile, SimConfig};
use crate::topology::Topology;
use crate::transport::inprocess::InProcessWorld;
use crate::transport::simulated::SimulatedWorld;
use crate::transport::Communicator;

use inputs::{cell_seed, expected_output, input_len, InputGen};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[serde(rename = "inprocess")]
    InProcess,
    Socket,
    Simulated,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::InProcess => "inprocess",
            Backend::Socket => "socket",
            Backend::Simulated => "simulated",
        })
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inprocess" | "in_process" | "in-process" => Ok(Backend::InProcess),
            "socket" => Ok(Backend::Socket),
            "sim" | "simulated" => Ok(Backend::Simulated),
            other => Err(Error::InvalidConfig(format!("unknown backend `{other}`"))),
        }
    }
}

/// Simulator settings used by the simulated backend.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    pub params: CostParams,
    pub nic_policy: NicPolicy,
    pub phys_topology: PhysTopology,
    pub reduce_profile: ReduceProfile,
}

impl SimOptions {
    pub fn config(&self, topo: Topology) -> SimConfig {
        SimConfig {
            topo,
            params: self.params,
            nic_policy: self.nic_policy,
            phys_topology: self.phys_topology,
            reduce_profile: self.reduce_profile,
        }
    }
}

/// One sweep: every algorithm at every size on every grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub collective: CollectiveKind,
    pub algorithms: Vec<Algorithm>,
    /// Full buffer sizes in bytes.
    pub sizes: Vec<u64>,
    /// `(nodes, gpus_per_node)` cells.
    pub grid: Vec<(usize, usize)>,
    pub trials: usize,
    pub seed: u64,
    pub verify: bool,
    /// NICs per node; `gcd(gpus_per_node, 4)` when unset.
    pub nics_per_node: Option<usize>,
    pub sim: SimOptions,
}

pub const DEFAULT_TRIALS: usize = 10;
pub const DEFAULT_SEED: u64 = 0x5eed;

impl SweepConfig {
    /// Defaults for `backend`: a small grid with modest sizes for real
    /// transports, and up to 256 nodes of 8 GPUs with large sizes for the
    /// simulator.
    pub fn defaults_for(backend: Backend, collective: CollectiveKind) -> Self {
        let (sizes, grid) = match backend {
            Backend::Simulated => (default_size_buckets(), (0..=8).map(|e| (1usize << e, 8)).collect()),
            _ => (
                vec![1 << 20, 4 << 20, 16 << 20],
                [1, 2, 4].iter().flat_map(|&n| [2, 4, 8].map(|m| (n, m))).collect(),
            ),
        };
        Self {
            collective,
            algorithms: vec![
                Algorithm::RING,
                Algorithm::RECURSIVE,
                Algorithm::Hierarchical(InterAlgorithm::Auto),
            ],
            sizes,
            grid,
            trials: DEFAULT_TRIALS,
            seed: DEFAULT_SEED,
            verify: false,
            nics_per_node: None,
            sim: SimOptions::default(),
        }
    }

    pub fn topology(&self, nodes: usize, gpus_per_node: usize) -> Result<Topology> {
        let k = self
            .nics_per_node
            .unwrap_or_else(|| default_nics_per_node(gpus_per_node));
        Topology::new(nodes, gpus_per_node, k)
    }

    /// Rejects the whole sweep before anything runs.
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.sizes.is_empty() || self.grid.is_empty() || self.algorithms.is_empty() {
            return Err(Error::InvalidConfig(
                "sizes, grid and algorithms must be non-empty".into(),
            ));
        }
        for &(n, m) in &self.grid {
            let topo = self.topology(n, m)?;
            let p = topo.world_size();
            for &size in &self.sizes {
                if size == 0 || size % (4 * p as u64) != 0 {
                    return Err(Error::NotDivisible {
                        len: size as usize,
                        parts: 4 * p,
                    });
                }
            }
            for alg in &self.algorithms {
                alg.supports(&topo)?;
            }
        }
        Ok(())
    }
}

/// Up to four NICs per node, as many as evenly split the node's GPUs.
pub fn default_nics_per_node(gpus_per_node: usize) -> usize {
    gcd(gpus_per_node, 4)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One timed trial of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub backend: Backend,
    pub collective: CollectiveKind,
    pub algorithm: String,
    pub p: usize,
    #[serde(rename = "N")]
    pub n_nodes: usize,
    #[serde(rename = "M")]
    pub gpus_per_node: usize,
    pub m_bytes: u64,
    pub trial: usize,
    pub seconds: f64,
    pub verified: bool,
}

pub fn write_records_csv<W: Write>(records: &[RunRecord], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record([
        "backend",
        "collective",
        "algorithm",
        "p",
        "N",
        "M",
        "m_bytes",
        "trial",
        "seconds",
        "verified",
    ])?;
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    read_records_csv(std::fs::File::open(path)?)
}

/// Writes one CSV per `(backend, collective, algorithm)` into `out_dir`,
/// named `{backend}_{ag|rs}_{algorithm}.csv`, and returns the paths.
pub fn write_sweep_csvs(records: &[RunRecord], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut groups: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        let name = format!("{}_{}_{}.csv", r.backend, r.collective.short(), r.algorithm);
        groups.entry(name).or_default().push(r.clone());
    }
    let mut paths = Vec::new();
    for (name, rs) in groups {
        let path = dir.join(name);
        write_records_csv(&rs, std::fs::File::create(&path)?)?;
        paths.push(path);
    }
    Ok(paths)
}

fn cell_label(collective: CollectiveKind, alg: Algorithm, n: usize, m: usize, bytes: u64) -> String {
    format!("{}/{alg}/{n}x{m}/{bytes}", collective.short())
}

/// Runs `cfg` on an in-process or simulated backend. Socket sweeps need an
/// endpoint per process; see [`run_sweep_socket`].
pub fn run_sweep(cfg: &SweepConfig, backend: Backend) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    match backend {
        Backend::InProcess => run_in_process_sweep(cfg),
        Backend::Simulated => run_simulated_sweep(cfg),
        Backend::Socket => Err(Error::Unsupported(
            "socket sweeps run one rank per process through run_sweep_socket".into(),
        )),
    }
}

fn run_in_process_sweep(cfg: &SweepConfig) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for &(n, m) in &cfg.grid {
        let topo = cfg.topology(n, m)?;
        let p = topo.world_size();
        for &alg in &cfg.algorithms {
            for &size in &cfg.sizes {
                let gen = InputGen::new(cell_seed(cfg.seed, &cell_label(cfg.collective, alg, n, m, size)));
                let in_len = input_len(cfg.collective, (size / 4) as usize, p);
                let world = InProcessWorld::new(p);
                let results = world.run(|comm| rank_cell(comm, topo, cfg, alg, &gen, in_len));
                let mut rank0 = None;
                for r in results {
                    let r = r?;
                    rank0.get_or_insert(r);
                }
                let (times, verified) = rank0.expect("at least one rank");
                out.extend(records_for(
                    Backend::InProcess,
                    cfg.collective,
                    alg,
                    &topo,
                    size,
                    &times,
                    verified,
                ));
            }
        }
    }
    Ok(out)
}

/// Runs every cell of `cfg` whose world size matches `comm` on this process's
/// rank. Every process must call this with the same configuration. All
/// processes return records; rank 0's are the ones to keep.
pub fn run_sweep_socket(cfg: &SweepConfig, comm: &Communicator<'_>) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &(n, m) in &cfg.grid {
        let topo = cfg.topology(n, m)?;
        if topo.world_size() != comm.size() {
            return Err(Error::InvalidConfig(format!(
                "grid cell {n}x{m} needs {} ranks but the hostfile lists {}",
                topo.world_size(),
                comm.size()
            )));
        }
        for &alg in &cfg.algorithms {
            for &size in &cfg.sizes {
                let gen = InputGen::new(cell_seed(cfg.seed, &cell_label(cfg.collective, alg, n, m, size)));
                let in_len = input_len(cfg.collective, (size / 4) as usize, topo.world_size());
                let (times, verified) = rank_cell(comm, topo, cfg, alg, &gen, in_len)?;
                out.extend(records_for(
                    Backend::Socket,
                    cfg.collective,
                    alg,
                    &topo,
                    size,
                    &times,
                    verified,
                ));
            }
        }
    }
    Ok(out)
}

/// One rank's part of a timed cell: an optional untimed verification call,
/// then `trials` barrier-delimited timed calls.
fn rank_cell(
    comm: &Communicator<'_>,
    topo: Topology,
    cfg: &SweepConfig,
    alg: Algorithm,
    gen: &InputGen,
    in_len: usize,
) -> Result<(Vec<f64>, bool)> {
    let rank = comm.index();
    let input = gen.input(rank, in_len);
    if cfg.verify {
        let got = alg.execute(topo, cfg.collective, comm, &input)?;
        let want = expected_output(gen, cfg.collective, comm.size(), rank, in_len);
        let ok = bitwise_eq(&got, &want);
        drop(got);
        let flags = all_gather(comm, FlatAlgorithm::Ring, &[if ok { 1.0 } else { 0.0 }])?;
        if let Some(bad) = flags.iter().position(|&f| f == 0.0) {
            return Err(Error::VerificationFailed(format!(
                "{} {alg} on {topo}: rank {bad} output differs from the oracle",
                cfg.collective
            )));
        }
    }
    let mut times = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        comm.barrier()?;
        let start = Instant::now();
        let out = alg.execute(topo, cfg.collective, comm, &input)?;
        comm.barrier()?;
        times.push(start.elapsed().as_secs_f64());
        drop(out);
    }
    Ok((times, cfg.verify))
}

fn records_for<'a>(
    backend: Backend,
    collective: CollectiveKind,
    alg: Algorithm,
    topo: &Topology,
    m_bytes: u64,
    times: &'a [f64],
    verified: bool,
) -> impl Iterator<Item = RunRecord> + 'a {
    let algorithm = alg.to_string();
    let (p, n_nodes, gpus_per_node) = (topo.world_size(), topo.num_nodes(), topo.gpus_per_node());
    times.iter().enumerate().map(move |(trial, &seconds)| RunRecord {
        backend,
        collective,
        algorithm: algorithm.clone(),
        p,
        n_nodes,
        gpus_per_node,
        m_bytes,
        trial,
        seconds,
        verified,
    })
}

fn bitwise_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn run_simulated_sweep(cfg: &SweepConfig) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let mut checked = HashSet::new();
    for &(n, m) in &cfg.grid {
        let topo = cfg.topology(n, m)?;
        let sim = cfg.sim.config(topo);
        for &alg in &cfg.algorithms {
            for &size in &cfg.sizes {
                if cfg.verify {
                    let resolved = alg.resolve(&topo, size as f64, &sim.params)?;
                    if checked.insert((resolved, n, m)) {
                        let seed = cell_seed(cfg.seed, &cell_label(cfg.collective, resolved, n, m, 0));
                        verify_simulated(&sim, cfg.collective, resolved, seed)?;
                    }
                }
                let (seconds, _) = simulate_time(&sim, cfg.collective, alg, size)?;
                out.extend(records_for(
                    Backend::Simulated,
                    cfg.collective,
                    alg,
                    &topo,
                    size,
                    &[seconds],
                    cfg.verify,
                ));
            }
        }
    }
    Ok(out)
}

/// Runs `alg` on the simulated transport with one element per block,
/// checks every rank's output against the oracle, and checks that the
/// logged messages match the generated schedule step for step.
pub fn verify_simulated(sim: &SimConfig, collective: CollectiveKind, alg: Algorithm, seed: u64) -> Result<()> {
    let topo = sim.topo;
    let p = topo.world_size();
    let in_len = input_len(collective, p, p);
    let gen = InputGen::new(seed);
    let world = SimulatedWorld::new(p);
    let results = world.run(|comm| -> Result<bool> {
        let rank = comm.index();
        let got = alg.execute(topo, collective, comm, &gen.input(rank, in_len))?;
        Ok(bitwise_eq(&got, &expected_output(&gen, collective, p, rank, in_len)))
    });
    for (rank, r) in results.into_iter().enumerate() {
        if !r? {
            return Err(Error::VerificationFailed(format!(
                "{collective} {alg} on {topo}: simulated rank {rank} output differs from the oracle"
            )));
        }
    }
    let logged = steps_from_log(&world.log(), collective)?;
    let planned = build_schedule(sim, collective, alg, 4 * p as u64)?.steps();
    if !same_steps(&logged, &planned) {
        return Err(Error::VerificationFailed(format!(
            "{collective} {alg} on {topo}: transport messages differ from the simulated schedule"
        )));
    }
    Ok(())
}

/// Step-by-step equality with each step's messages compared as multisets.
pub fn same_steps(a: &[Step], b: &[Step]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let (mut mx, mut my) = (x.messages.clone(), y.messages.clone());
            mx.sort_unstable();
            my.sort_unstable();
            x.header == y.header && mx == my
        })
}

/// Mean, sample standard deviation and minimum of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
}

pub fn summarize_samples(samples: &[f64]) -> Result<Stats> {
    if samples.is_empty() {
        return Err(Error::EmptyCell("no samples".into()));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Stats {
        n,
        mean,
        std: var.sqrt(),
        min,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CellKey {
    pub backend: Backend,
    pub collective: CollectiveKind,
    pub algorithm: String,
    pub p: usize,
    #[serde(rename = "N")]
    pub n_nodes: usize,
    #[serde(rename = "M")]
    pub gpus_per_node: usize,
    pub m_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub key: CellKey,
    pub stats: Stats,
}

/// Per-cell statistics. With `exclude_warmup`, trial 0 of every wall-clock
/// cell is dropped; simulated cells are deterministic and keep theirs.
pub fn summarize(records: &[RunRecord], exclude_warmup: bool) -> Result<Vec<CellSummary>> {
    let mut cells: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = CellKey {
            backend: r.backend,
            collective: r.collective,
            algorithm: r.algorithm.clone(),
            p: r.p,
            n_nodes: r.n_nodes,
            gpus_per_node: r.gpus_per_node,
            m_bytes: r.m_bytes,
        };
        let samples = cells.entry(key).or_default();
        if !(exclude_warmup && r.backend != Backend::Simulated && r.trial == 0) {
            samples.push(r.seconds);
        }
    }
    cells
        .into_iter()
        .map(|(key, samples)| {
            let stats = summarize_samples(&samples).map_err(|_| {
                Error::EmptyCell(format!(
                    "{} {} {} p={} m={}: no trials left",
                    key.backend, key.collective, key.algorithm, key.p, key.m_bytes
                ))
            })?;
            Ok(CellSummary { key, stats })
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(summary: &[CellSummary], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "backend",
        "collective",
        "algorithm",
        "p",
        "N",
        "M",
        "m_bytes",
        "trials",
        "mean_s",
        "std_s",
        "min_s",
    ])?;
    for s in summary {
        let k = &s.key;
        wr.write_record([
            k.backend.to_string(),
            k.collective.to_string(),
            k.algorithm.clone(),
            k.p.to_string(),
            k.n_nodes.to_string(),
            k.gpus_per_node.to_string(),
            k.m_bytes.to_string(),
            s.stats.n.to_string(),
            s.stats.mean.to_string(),
            s.stats.std.to_string(),
            s.stats.min.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub p: usize,
    pub m_bytes: u64,
    /// `mean(b) / mean(a)`: above 1 when `a` is faster.
    pub speedup: f64,
}

fn means_by_cell(records: &[RunRecord], exclude_warmup: bool, what: &str) -> Result<BTreeMap<(usize, u64), f64>> {
    let mut out = BTreeMap::new();
    for s in summarize(records, exclude_warmup)? {
        if out.insert((s.key.p, s.key.m_bytes), s.stats.mean).is_some() {
            return Err(Error::GridMismatch(format!(
                "{what} holds more than one series at p={} m={}",
                s.key.p, s.key.m_bytes
            )));
        }
    }
    Ok(out)
}

/// Per-`(p, m)` speedup of series `a` over series `b`. Both must cover the
/// same cells.
pub fn emit_heatmap_data(a: &[RunRecord], b: &[RunRecord], exclude_warmup: bool) -> Result<Vec<HeatmapCell>> {
    let ma = means_by_cell(a, exclude_warmup, "first series")?;
    let mb = means_by_cell(b, exclude_warmup, "second series")?;
    if ma.keys().ne(mb.keys()) {
        return Err(Error::GridMismatch(
            "the two series cover different (p, m) cells".into(),
        ));
    }
    Ok(ma
        .iter()
        .zip(mb.values())
        .map(|(((p, m), ta), tb)| HeatmapCell {
            p: *p,
            m_bytes: *m,
            speedup: tb / ta,
        })
        .collect())
}

pub fn write_heatmap_csv<W: Write>(cells: &[HeatmapCell], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(["p", "m_bytes", "speedup"])?;
    for c in cells {
        wr.serialize(c)?;
    }
    wr.flush()?;
    Ok(())
}

/// Grid and simulator settings for selector calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub nodes: Vec<usize>,
    pub sizes: Vec<u64>,
    pub gpus_per_node: usize,
    pub nics_per_node: usize,
    pub collective: CollectiveKind,
    pub sim: SimOptions,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            nodes: (2..=7).map(|e| 1usize << e).collect(),
            sizes: default_size_buckets(),
            gpus_per_node: 8,
            nics_per_node: 4,
            collective: CollectiveKind::ReduceScatter,
            sim: SimOptions {
                phys_topology: PhysTopology::RingOfNodes,
                ..SimOptions::default()
            },
        }
    }
}

/// Simulates the hierarchical collective with a ring and with a recursive
/// inter-node phase on every `(N, m)` and tabulates the faster.
pub fn calibrate_selector(cal: &CalibrationConfig) -> Result<CalibrationTable> {
    let mut rows = Vec::with_capacity(cal.nodes.len() * cal.sizes.len());
    for &n in &cal.nodes {
        let topo = Topology::new(n, cal.gpus_per_node, cal.nics_per_node)?;
        let sim = cal.sim.config(topo);
        for &m in &cal.sizes {
            let ring = simulate_time(&sim, cal.collective, Algorithm::Hierarchical(InterAlgorithm::Ring), m)?.0;
            let rec = simulate_time(
                &sim,
                cal.collective,
                Algorithm::Hierarchical(InterAlgorithm::Recursive),
                m,
            )?
            .0;
            rows.push(CalibrationRow::new(n, m, ring, rec));
        }
    }
    Ok(CalibrationTable::new(rows))
}

/// Outcome of one correctness case.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub backend: Backend,
    pub collective: CollectiveKind,
    pub algorithm: Algorithm,
    pub n_nodes: usize,
    pub gpus_per_node: usize,
    /// Output elements per rank.
    pub elems: usize,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for VerifyOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} {} {}x{} n={}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.backend,
            self.collective,
            self.n_nodes,
            self.gpus_per_node,
            self.elems,
            self.algorithm
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// Correctness suite settings.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub grid: Vec<(usize, usize)>,
    /// Elements per rank block.
    pub elems: Vec<usize>,
    pub seed: u64,
    pub backends: Vec<Backend>,
    /// Per-receive timeout for in-process runs, so a broken algorithm fails
    /// instead of hanging.
    pub recv_timeout: Duration,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            grid: [1, 2, 4].iter().flat_map(|&n| [1, 2, 4, 8].map(|m| (n, m))).collect(),
            elems: vec![8, 64, 4096],
            seed: DEFAULT_SEED,
            backends: vec![Backend::InProcess],
            recv_timeout: Duration::from_secs(60),
        }
    }
}

/// Every applicable algorithm for both collectives on every grid cell and
/// block size, compared bit for bit against the oracle.
pub fn verify_suite(cfg: &VerifyConfig) -> Result<Vec<VerifyOutcome>> {
    let algorithms = [
        Algorithm::RING,
        Algorithm::RECURSIVE,
        Algorithm::Hierarchical(InterAlgorithm::Ring),
        Algorithm::Hierarchical(InterAlgorithm::Recursive),
    ];
    let mut out = Vec::new();
    for &backend in &cfg.backends {
        if backend == Backend::Socket {
            return Err(Error::Unsupported(
                "the correctness suite runs in-process or simulated".into(),
            ));
        }
        for &(n, m) in &cfg.grid {
            let topo = Topology::new(n, m, default_nics_per_node(m))?;
            let p = topo.world_size();
            for collective in [CollectiveKind::AllGather, CollectiveKind::ReduceScatter] {
                for alg in algorithms {
                    if alg.supports(&topo).is_err() {
                        continue;
                    }
                    for &elems in &cfg.elems {
                        let seed = cell_seed(cfg.seed, &cell_label(collective, alg, n, m, elems as u64));
                        let in_len = input_len(collective, elems * p, p);
                        let gen = InputGen::new(seed);
                        let job = |comm: &Communicator<'_>| -> Result<bool> {
                            let rank = comm.index();
                            let got = alg.execute(topo, collective, comm, &gen.input(rank, in_len))?;
                            Ok(bitwise_eq(&got, &expected_output(&gen, collective, p, rank, in_len)))
                        };
                        let results = match backend {
                            Backend::InProcess => InProcessWorld::new(p).with_recv_timeout(cfg.recv_timeout).run(job),
                            _ => SimulatedWorld::new(p).run(job),
                        };
                        let mut detail = String::new();
                        for (rank, r) in results.into_iter().enumerate() {
                            match r {
                                Ok(true) => {}
                                Ok(false) => {
                                    detail = format!("rank {rank} differs from the oracle");
                                    break;
                                }
                                Err(e) => {
                                    detail = format!("rank {rank}: {e}");
                                    break;
                                }
                            }
                        }
                        out.push(VerifyOutcome {
                            backend,
                            collective,
                            algorithm: alg,
                            n_nodes: n,
                            gpus_per_node: m,
                            elems,
                            passed: detail.is_empty(),
                            detail,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(collective: CollectiveKind) -> SweepConfig {
        SweepConfig {
            sizes: vec![4096],
            grid: vec![(2, 2)],
            trials: 3,
            verify: true,
            ..SweepConfig::defaults_for(Backend::InProcess, collective)
        }
    }

    #[test]
    fn in_process_sweep_records() {
        for c in [CollectiveKind::AllGather, CollectiveKind::ReduceScatter] {
            let recs = run_sweep(&small(c), Backend::InProcess).unwrap();
            assert_eq!(recs.len(), 3 * 3);
            assert!(recs.iter().all(|r| r.verified && r.seconds > 0.0 && r.p == 4));
        }
    }

    #[test]
    fn simulated_sweep_is_deterministic() {
        let cfg = SweepConfig {
            grid: vec![(4, 8)],
            sizes: vec![16 << 20],
            verify: true,
            ..SweepConfig::defaults_for(Backend::Simulated, CollectiveKind::AllGather)
        };
        let a = run_sweep(&cfg, Backend::Simulated).unwrap();
        let b = run_sweep(&cfg, Backend::Simulated).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|r| r.trial == 0 && r.verified));
    }

    #[test]
    fn validation_rejects_before_running() {
        let mut cfg = small(CollectiveKind::AllGather);
        cfg.sizes = vec![4096, 4100];
        assert!(matches!(cfg.validate(), Err(Error::NotDivisible { .. })));
        let mut cfg = small(CollectiveKind::AllGather);
        cfg.grid = vec![(3, 2)];
        cfg.sizes = vec![4800];
        assert!(matches!(cfg.validate(), Err(Error::NonPowerOfTwo(_))));
        cfg.algorithms = vec![Algorithm::RING, Algorithm::Hierarchical(InterAlgorithm::Ring)];
        cfg.validate().unwrap();
        let mut cfg = small(CollectiveKind::AllGather);
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn socket_needs_endpoint() {
        assert!(matches!(
            run_sweep(&small(CollectiveKind::AllGather), Backend::Socket),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn stats_match_hand_computation() {
        let s = summarize_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.min, 1.0);
        assert_eq!(summarize_samples(&[7.0]).unwrap().std, 0.0);
        assert!(matches!(summarize_samples(&[]), Err(Error::EmptyCell(_))));
    }

    fn rec(backend: Backend, alg: &str, p: usize, m: u64, trial: usize, seconds: f64) -> RunRecord {
        RunRecord {
            backend,
            collective: CollectiveKind::AllGather,
            algorithm: alg.into(),
            p,
            n_nodes: p,
            gpus_per_node: 1,
            m_bytes: m,
            trial,
            seconds,
            verified: false,
        }
    }

    #[test]
    fn warmup_exclusion() {
        let rs = vec![
            rec(Backend::InProcess, "ring", 2, 8, 0, 100.0),
            rec(Backend::InProcess, "ring", 2, 8, 1, 1.0),
            rec(Backend::InProcess, "ring", 2, 8, 2, 3.0),
        ];
        assert_eq!(summarize(&rs, true).unwrap()[0].stats.mean, 2.0);
        assert_eq!(summarize(&rs, false).unwrap()[0].stats.n, 3);
        assert!(matches!(summarize(&rs[..1], true), Err(Error::EmptyCell(_))));
        let sim = vec![rec(Backend::Simulated, "ring", 2, 8, 0, 5.0)];
        assert_eq!(summarize(&sim, true).unwrap()[0].stats.mean, 5.0);
    }

    #[test]
    fn heatmap_speedups() {
        let a = vec![
            rec(Backend::Simulated, "x", 2, 8, 0, 1.0),
            rec(Backend::Simulated, "x", 4, 8, 0, 2.0),
        ];
        let b = vec![
            rec(Backend::Simulated, "y", 2, 8, 0, 3.0),
            rec(Backend::Simulated, "y", 4, 8, 0, 2.0),
        ];
        let h = emit_heatmap_data(&a, &b, false).unwrap();
        assert_eq!(h.iter().map(|c| c.speedup).collect::<Vec<_>>(), vec![3.0, 1.0]);
        let mut buf = Vec::new();
        write_heatmap_csv(&h, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "p,m_bytes,speedup\n2,8,3.0\n4,8,1.0\n");
        assert!(matches!(
            emit_heatmap_data(&a, &b[..1], false),
            Err(Error::GridMismatch(_))
        ));
        let mixed = [a.clone(), b.clone()].concat();
        assert!(matches!(
            emit_heatmap_data(&mixed, &b, false),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn records_round_trip_and_file_names() {
        let recs = run_sweep(&small(CollectiveKind::ReduceScatter), Backend::InProcess).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("backend,collective,algorithm,p,N,M,m_bytes,trial,seconds,verified\n"));
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), recs);
        let dir = tempfile::tempdir().unwrap();
        let paths = write_sweep_csvs(&recs, dir.path()).unwrap();
        let names: Vec<_> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            vec![
                "inprocess_rs_hierarchical-auto.csv",
                "inprocess_rs_recursive.csv",
                "inprocess_rs_ring.csv"
            ]
        );
    }

    #[test]
    fn calibration_on_small_grid() {
        let cal = CalibrationConfig {
            nodes: vec![4, 8],
            sizes: vec![16 << 20, 1 << 30],
            ..CalibrationConfig::default()
        };
        let table = calibrate_selector(&cal).unwrap();
        assert_eq!(table.rows().len(), 4);
        let empty = calibrate_selector(&CalibrationConfig {
            nodes: vec![],
            ..CalibrationConfig::default()
        })
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn suite_passes_on_both_backends() {
        let cfg = VerifyConfig {
            grid: vec![(2, 2), (4, 1)],
            elems: vec![3],
            backends: vec![Backend::InProcess, Backend::Simulated],
            ..VerifyConfig::default()
        };
        let out = verify_suite(&cfg).unwrap();
        assert_eq!(out.len(), 2 * 2 * 2 * 4);
        assert!(out.iter().all(|o| o.passed), "{:?}", out.iter().find(|o| !o.passed));
    }

    #[test]
    fn simulated_verification_checks_schedule() {
        let topo = Topology::new(4, 2, 2).unwrap();
        for c in [CollectiveKind::AllGather, CollectiveKind::ReduceScatter] {
            for alg in [
                Algorithm::RING,
                Algorithm::RECURSIVE,
                Algorithm::Hierarchical(InterAlgorithm::Recursive),
            ] {
                verify_simulated(&SimConfig::new(topo), c, alg, 1).unwrap();
            }
        }
    }
}
