use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};

use hiercoll::harness::config::{format_size, parse_grid, parse_sizes, FileConfig};
use hiercoll::harness::{
    self, calibrate_selector, emit_heatmap_data, load_records, run_sweep, run_sweep_socket, summarize, verify_suite,
    write_heatmap_csv, write_sweep_csvs, Backend, CalibrationConfig, SimOptions, SweepConfig, VerifyConfig,
};
use hiercoll::simnet::{simulate, NicPolicy, PhysTopology, ReduceProfile};
use hiercoll::transport::socket::{HostFile, SocketEndpoint, SocketOptions};
use hiercoll::{Algorithm, CollectiveKind, Communicator, CostParams, InterAlgorithm, Topology};

#[derive(Parser)]
#[command(
    name = "bench",
    version,
    about = "Collective communication benchmarks and simulator sweeps"
)]
struct Cli {
    /// key = value file providing defaults for any flag.
    #[arg(long, global = true, env = "HIERCOLL_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time every algorithm over a grid of rank layouts and message sizes.
    Sweep(SweepArgs),
    /// Check every algorithm against brute-force oracles.
    Verify(VerifyArgs),
    /// Build the inter-node selection table from simulated sweeps.
    Calibrate(CalibrateArgs),
    /// Per-cell speedup of series A over series B.
    Heatmap(HeatmapArgs),
    /// Simulate one collective call and export its trace and NIC counters.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone, Default)]
struct SimFlags {
    #[arg(long)]
    nic_policy: Option<NicPolicy>,
    #[arg(long)]
    phys: Option<PhysTopology>,
    #[arg(long)]
    profile: Option<ReduceProfile>,
}

#[derive(Args)]
struct SweepArgs {
    /// inprocess, socket or sim.
    #[arg(long)]
    backend: Option<Backend>,
    /// ag or rs.
    #[arg(long)]
    collective: Option<CollectiveKind>,
    /// Comma-separated: ring, recursive, hierarchical.
    #[arg(long)]
    algo: Option<String>,
    /// Inter-node algorithm of `hierarchical`: ring, recursive or auto.
    #[arg(long)]
    inter: Option<InterAlgorithm>,
    /// Full buffer sizes, e.g. 16M,64M.
    #[arg(long)]
    sizes: Option<String>,
    /// Rank layouts, e.g. 2x4,4x8.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    nics_per_node: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    verify: bool,
    /// Drop the first trial of each wall-clock cell from the summary.
    #[arg(long)]
    warmup: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "HIERCOLL_RANK")]
    rank: Option<usize>,
    #[arg(long, env = "HIERCOLL_HOSTFILE")]
    hostfile: Option<PathBuf>,
    /// Seconds to keep retrying connections to peers.
    #[arg(long, env = "HIERCOLL_CONNECT_TIMEOUT")]
    connect_timeout: Option<f64>,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    grid: Option<String>,
    /// Elements per rank block.
    #[arg(long, default_value = "8,64,4096")]
    elems: String,
    /// Comma-separated backends: inprocess, sim.
    #[arg(long, default_value = "inprocess")]
    backend: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Comma-separated node counts.
    #[arg(long, default_value = "4,8,16,32,64,128")]
    nodes: String,
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long, default_value_t = 8)]
    gpus_per_node: usize,
    #[arg(long, default_value_t = 4)]
    nics_per_node: usize,
    #[arg(long, default_value = "rs")]
    collective: CollectiveKind,
    #[arg(long, default_value = "calibration.csv")]
    out: PathBuf,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Records of the candidate series.
    a: PathBuf,
    /// Records of the baseline series.
    b: PathBuf,
    #[arg(long)]
    warmup: bool,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "ag")]
    collective: CollectiveKind,
    #[arg(long, default_value = "hierarchical")]
    algo: String,
    #[arg(long, default_value = "auto")]
    inter: InterAlgorithm,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    gpus_per_node: Option<usize>,
    #[arg(long)]
    nics_per_node: Option<usize>,
    /// Full buffer size.
    #[arg(long, default_value = "64M")]
    size: String,
    /// Per-step JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Per-NIC counters CSV.
    #[arg(long)]
    counters: Option<PathBuf>,
    #[command(flatten)]
    sim: SimFlags,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = match &cli.config {
        Some(path) => FileConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => FileConfig::default(),
    };
    match cli.cmd {
        Cmd::Sweep(a) => sweep(a, &file),
        Cmd::Verify(a) => verify(a, &file),
        Cmd::Calibrate(a) => calibrate(a, &file),
        Cmd::Heatmap(a) => heatmap(a),
        Cmd::Simulate(a) => simulate_cmd(a, &file),
    }
}

fn parse_opt<T>(v: Option<&String>) -> Result<Option<T>>
where
    T: std::str::FromStr,
    T::Err: std::error::Error + Send + Sync + 'static,
{
    Ok(match v {
        Some(s) => Some(s.parse()?),
        None => None,
    })
}

fn cost_params(file: &FileConfig) -> CostParams {
    let mut p = CostParams::default();
    let fields = [
        (file.alpha_inter, &mut p.alpha_inter),
        (file.beta_inter, &mut p.beta_inter),
        (file.alpha_intra, &mut p.alpha_intra),
        (file.beta_intra, &mut p.beta_intra),
        (file.gamma_reduce_fast, &mut p.gamma_reduce_fast),
        (file.gamma_reduce_slow, &mut p.gamma_reduce_slow),
    ];
    for (v, slot) in fields {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(b) = file.packet_bytes {
        p.packet_bytes = b;
    }
    p
}

fn sim_options(flags: &SimFlags, file: &FileConfig) -> Result<SimOptions> {
    Ok(SimOptions {
        params: cost_params(file),
        nic_policy: flags
            .nic_policy
            .or(parse_opt(file.nic_policy.as_ref())?)
            .unwrap_or_default(),
        phys_topology: flags
            .phys
            .or(parse_opt(file.phys_topology.as_ref())?)
            .unwrap_or_default(),
        reduce_profile: flags
            .profile
            .or(parse_opt(file.reduce_profile.as_ref())?)
            .unwrap_or_default(),
    })
}

/// `ring,recursive,hierarchical` with `hierarchical` taking `inter`.
fn parse_algorithms(list: &str, inter: InterAlgorithm) -> Result<Vec<Algorithm>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "hierarchical" => Ok(Algorithm::Hierarchical(inter)),
            other => Ok(other.parse()?),
        })
        .collect()
}

fn sweep(a: SweepArgs, file: &FileConfig) -> Result<()> {
    let backend = match a.backend {
        Some(b) => b,
        None => parse_opt(file.backend.as_ref())?.unwrap_or(Backend::InProcess),
    };
    let collective = match a.collective {
        Some(c) => c,
        None => parse_opt(file.collective.as_ref())?.unwrap_or(CollectiveKind::AllGather),
    };
    let mut cfg = SweepConfig::defaults_for(backend, collective);
    let inter = match a.inter {
        Some(i) => i,
        None => parse_opt(file.inter.as_ref())?.unwrap_or(InterAlgorithm::Auto),
    };
    if let Some(list) = a.algo.as_ref().or(file.algo.as_ref()) {
        cfg.algorithms = parse_algorithms(list, inter)?;
    } else {
        cfg.algorithms = parse_algorithms("ring,recursive,hierarchical", inter)?;
    }
    if let Some(s) = &a.sizes {
        cfg.sizes = parse_sizes(s)?;
    } else if let Some(s) = &file.sizes {
        cfg.sizes = parse_sizes(&s.joined())?;
    }
    if let Some(g) = &a.grid {
        cfg.grid = parse_grid(g)?;
    } else if let Some(g) = file.grid_cells()? {
        cfg.grid = g;
    }
    cfg.nics_per_node = a.nics_per_node.or(file.nics_per_node);
    cfg.trials = a.trials.or(file.trials).unwrap_or(match backend {
        Backend::Simulated => 1,
        _ => harness::DEFAULT_TRIALS,
    });
    cfg.verify = a.verify || file.verify.unwrap_or(false);
    cfg.seed = a.seed.or(file.seed).unwrap_or(harness::DEFAULT_SEED);
    cfg.sim = sim_options(&a.sim, file)?;
    let warmup = a.warmup || file.warmup.unwrap_or(false);
    let out = a
        .out
        .or_else(|| file.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));

    let records = match backend {
        Backend::Socket => {
            let hostfile = a
                .hostfile
                .or_else(|| file.hostfile.as_ref().map(PathBuf::from))
                .context("the socket backend needs --hostfile")?;
            let rank = a.rank.context("the socket backend needs --rank")?;
            let hosts = HostFile::load(&hostfile).with_context(|| format!("reading {}", hostfile.display()))?;
            if a.grid.is_none() && file.grid_cells()?.is_none() {
                cfg.grid = vec![(1, hosts.len())];
            }
            let mut opts = SocketOptions::default();
            if let Some(s) = a.connect_timeout.or(file.connect_timeout_s) {
                opts.connect_timeout = Duration::from_secs_f64(s);
            }
            let ep = SocketEndpoint::bind(rank, hosts, opts)?;
            let comm = Communicator::world(&ep);
            let records = run_sweep_socket(&cfg, &comm)?;
            if rank != 0 {
                return Ok(());
            }
            records
        }
        _ => run_sweep(&cfg, backend)?,
    };
    let paths = write_sweep_csvs(&records, &out)?;
    let summary = summarize(&records, warmup)?;
    let mut stdout = io::stdout().lock();
    writeln!(
        stdout,
        "{:<10} {:<22} {:>7} {:>5} {:>8} {:>12} {:>12} {:>12}",
        "backend", "algorithm", "NxM", "p", "m", "mean_s", "std_s", "min_s"
    )?;
    for s in &summary {
        writeln!(
            stdout,
            "{:<10} {:<22} {:>7} {:>5} {:>8} {:>12.6e} {:>12.3e} {:>12.6e}",
            s.key.backend.to_string(),
            s.key.algorithm,
            format!("{}x{}", s.key.n_nodes, s.key.gpus_per_node),
            s.key.p,
            format_size(s.key.m_bytes),
            s.stats.mean,
            s.stats.std,
            s.stats.min
        )?;
    }
    for p in paths {
        writeln!(stdout, "wrote {}", p.display())?;
    }
    Ok(())
}

fn verify(a: VerifyArgs, file: &FileConfig) -> Result<()> {
    let mut cfg = VerifyConfig::default();
    if let Some(g) = &a.grid {
        cfg.grid = parse_grid(g)?;
    } else if let Some(g) = file.grid_cells()? {
        cfg.grid = g;
    }
    cfg.elems = a
        .elems
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .context("bad --elems")?;
    cfg.backends = a
        .backend
        .split(',')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()?;
    cfg.seed = a.seed.or(file.seed).unwrap_or(harness::DEFAULT_SEED);
    let outcomes = verify_suite(&cfg)?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let mut stdout = io::stdout().lock();
    for o in &outcomes {
        writeln!(stdout, "{o}")?;
    }
    writeln!(stdout, "{} cases, {failed} failed", outcomes.len())?;
    if failed > 0 {
        bail!("{failed} verification cases failed");
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs, file: &FileConfig) -> Result<()> {
    let mut sim = sim_options(&a.sim, file)?;
    if a.sim.phys.is_none() && file.phys_topology.is_none() {
        sim.phys_topology = PhysTopology::RingOfNodes;
    }
    let cal = CalibrationConfig {
        nodes: a
            .nodes
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .context("bad --nodes")?,
        sizes: match (&a.sizes, &file.sizes) {
            (Some(s), _) => parse_sizes(s)?,
            (None, Some(s)) => parse_sizes(&s.joined())?,
            (None, None) => CalibrationConfig::default().sizes,
        },
        gpus_per_node: a.gpus_per_node,
        nics_per_node: a.nics_per_node,
        collective: a.collective,
        sim,
    };
    let table = calibrate_selector(&cal)?;
    table.save(&a.out)?;
    let recursive = table
        .rows()
        .iter()
        .filter(|r| r.winner == hiercoll::FlatAlgorithm::Recursive)
        .count();
    println!(
        "{} cells, recursive wins {recursive}, ring wins {}; wrote {}",
        table.rows().len(),
        table.rows().len() - recursive,
        a.out.display()
    );
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let ra = load_records(&a.a).with_context(|| format!("reading {}", a.a.display()))?;
    let rb = load_records(&a.b).with_context(|| format!("reading {}", a.b.display()))?;
    let cells = emit_heatmap_data(&ra, &rb, a.warmup)?;
    match &a.out {
        Some(path) => write_heatmap_csv(&cells, BufWriter::new(create(path)?))?,
        None => write_heatmap_csv(&cells, io::stdout().lock())?,
    }
    Ok(())
}

fn simulate_cmd(a: SimulateArgs, file: &FileConfig) -> Result<()> {
    let n = a.nodes.or(file.nodes).unwrap_or(4);
    let m = a.gpus_per_node.or(file.gpus_per_node).unwrap_or(8);
    let k = a
        .nics_per_node
        .or(file.nics_per_node)
        .unwrap_or_else(|| harness::default_nics_per_node(m));
    let topo = Topology::new(n, m, k)?;
    let algorithm = match parse_algorithms(&a.algo, a.inter)?.as_slice() {
        [one] => *one,
        _ => bail!("--algo takes exactly one algorithm here"),
    };
    let bytes = parse_sizes(&a.size)?.first().copied().context("empty --size")?;
    let cfg = sim_options(&a.sim, file)?.config(topo);
    let result = simulate(&cfg, a.collective, algorithm, bytes)?;
    println!(
        "{} {algorithm} on {topo}, m={}: {:.6e} s over {} steps",
        a.collective,
        format_size(bytes),
        result.seconds,
        result.trace.steps.len()
    );
    if let Some(path) = &a.trace {
        result.trace.write_jsonl(BufWriter::new(create(path)?))?;
    }
    if let Some(path) = &a.counters {
        result.counters.write_csv(BufWriter::new(create(path)?))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).with_context(|| format!("creating {}", path.display()))
}
