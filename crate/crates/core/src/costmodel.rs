//! Analytic alpha-beta models for ring and recursive collectives, and the
//! inter-node algorithm selector.
//!
//! `m` is always the full collective buffer in bytes: the all-gather output
//! (equivalently the reduce-scatter input) held by each rank.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collectives::{exact_log2, FlatAlgorithm};
use crate::error::{Error, Result};
use crate::topology::Topology;

pub const MIB: u64 = 1 << 20;

/// Startup latency (seconds per message) and inverse bandwidth (seconds
/// per byte) of one class of link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaBeta {
    pub alpha: f64,
    pub beta: f64,
}

impl AlphaBeta {
    /// Time of one message of `bytes`.
    pub fn message(&self, bytes: f64) -> f64 {
        self.alpha + self.beta * bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub alpha_inter: f64,
    pub beta_inter: f64,
    pub alpha_intra: f64,
    pub beta_intra: f64,
    /// Reduction cost (seconds per byte) when reductions run on the device.
    pub gamma_reduce_fast: f64,
    /// Reduction cost when reductions run on the host CPU.
    pub gamma_reduce_slow: f64,
    /// Packet size used by the NIC counters.
    pub packet_bytes: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            alpha_inter: 10e-6,
            beta_inter: 0.04e-9,
            alpha_intra: 3e-6,
            beta_intra: 0.01e-9,
            gamma_reduce_fast: 0.002e-9,
            gamma_reduce_slow: 0.4e-9,
            packet_bytes: 2048,
        }
    }
}

impl CostParams {
    pub fn inter(&self) -> AlphaBeta {
        AlphaBeta {
            alpha: self.alpha_inter,
            beta: self.beta_inter,
        }
    }

    pub fn intra(&self) -> AlphaBeta {
        AlphaBeta {
            alpha: self.alpha_intra,
            beta: self.beta_intra,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha_inter", self.alpha_inter),
            ("beta_inter", self.beta_inter),
            ("alpha_intra", self.alpha_intra),
            ("beta_intra", self.beta_intra),
            ("gamma_reduce_fast", self.gamma_reduce_fast),
            ("gamma_reduce_slow", self.gamma_reduce_slow),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.packet_bytes == 0 {
            return Err(Error::InvalidConfig("packet_bytes must be >= 1".into()));
        }
        Ok(())
    }
}

/// `alpha (p - 1) + beta m (p - 1) / p`
pub fn t_ring(p: usize, m_bytes: f64, link: AlphaBeta) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    let steps = (p - 1) as f64;
    link.alpha * steps + link.beta * m_bytes * steps / p as f64
}

/// `alpha log2(p) + beta m (p - 1) / p`
pub fn t_rec(p: usize, m_bytes: f64, link: AlphaBeta) -> Result<f64> {
    let levels = exact_log2(p).ok_or(Error::NonPowerOfTwo(p))?;
    if p == 1 {
        return Ok(0.0);
    }
    Ok(link.alpha * levels as f64 + link.beta * m_bytes * (p - 1) as f64 / p as f64)
}

pub fn t_flat(algorithm: FlatAlgorithm, p: usize, m_bytes: f64, link: AlphaBeta) -> Result<f64> {
    match algorithm {
        FlatAlgorithm::Ring => Ok(t_ring(p, m_bytes, link)),
        FlatAlgorithm::Recursive => t_rec(p, m_bytes, link),
    }
}

/// Two-level estimate: the inter-node phase runs on `N` ranks over the
/// `m / M` bytes each sub-communicator gathers, the intra-node ring on `M`
/// ranks over the full `m`. The local shuffle is free.
pub fn t_hierarchical(topo: &Topology, m_bytes: f64, inter: FlatAlgorithm, params: &CostParams) -> Result<f64> {
    let n = topo.num_nodes();
    let m = topo.gpus_per_node();
    let inter_t = t_flat(inter, n, m_bytes / m as f64, params.inter())?;
    Ok(inter_t + t_ring(m, m_bytes, params.intra()))
}

#[derive(Debug, Clone, Copy)]
pub enum SelectionMode<'a> {
    Analytic,
    Table(&'a CalibrationTable),
}

/// Picks the inter-node algorithm for `n_nodes` ranks and an `m_bytes`
/// collective. Analytic mode takes the cheaper model with ring on ties and
/// ring whenever `n_nodes` is not a power of two.
pub fn choose_inter_algorithm(
    n_nodes: usize,
    m_bytes: f64,
    params: &CostParams,
    mode: SelectionMode<'_>,
) -> Result<FlatAlgorithm> {
    match mode {
        SelectionMode::Table(table) => table.lookup(n_nodes, m_bytes),
        SelectionMode::Analytic => {
            if n_nodes < 2 || !n_nodes.is_power_of_two() {
                return Ok(FlatAlgorithm::Ring);
            }
            let ring = t_ring(n_nodes, m_bytes, params.inter());
            let rec = t_rec(n_nodes, m_bytes, params.inter())?;
            Ok(if rec < ring {
                FlatAlgorithm::Recursive
            } else {
                FlatAlgorithm::Ring
            })
        }
    }
}

/// Owned selector carried by hierarchical plans.
#[derive(Debug, Clone)]
pub enum Selector {
    Analytic(CostParams),
    Table(std::sync::Arc<CalibrationTable>),
}

impl Default for Selector {
    fn default() -> Self {
        Selector::Analytic(CostParams::default())
    }
}

impl Selector {
    pub fn choose(&self, n_nodes: usize, m_bytes: f64) -> Result<FlatAlgorithm> {
        match self {
            Selector::Analytic(params) => choose_inter_algorithm(n_nodes, m_bytes, params, SelectionMode::Analytic),
            Selector::Table(t) => {
                choose_inter_algorithm(n_nodes, m_bytes, &CostParams::default(), SelectionMode::Table(t))
            }
        }
    }
}

/// Message-size buckets for calibration: powers of two from 16 MiB to 1 GiB.
pub fn default_size_buckets() -> Vec<u64> {
    (4..=10).map(|e| (1u64 << e) * MIB).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    #[serde(rename = "N")]
    pub n_nodes: usize,
    pub m_bytes: u64,
    pub ring_seconds: f64,
    pub recursive_seconds: f64,
    pub winner: FlatAlgorithm,
}

impl CalibrationRow {
    pub fn new(n_nodes: usize, m_bytes: u64, ring_seconds: f64, recursive_seconds: f64) -> Self {
        let winner = if recursive_seconds < ring_seconds {
            FlatAlgorithm::Recursive
        } else {
            FlatAlgorithm::Ring
        };
        Self {
            n_nodes,
            m_bytes,
            ring_seconds,
            recursive_seconds,
            winner,
        }
    }
}

/// Simulator-derived winners keyed by `(N, m)`; CSV columns
/// `N,m_bytes,ring_seconds,recursive_seconds,winner`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    rows: Vec<CalibrationRow>,
}

impl CalibrationTable {
    pub fn new(mut rows: Vec<CalibrationRow>) -> Self {
        rows.sort_by_key(|r| (r.n_nodes, r.m_bytes));
        Self { rows }
    }

    pub fn rows(&self) -> &[CalibrationRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, n_nodes: usize, m_bytes: u64) -> Option<&CalibrationRow> {
        self.rows.iter().find(|r| r.n_nodes == n_nodes && r.m_bytes == m_bytes)
    }

    /// Winner of the cell nearest to `(n_nodes, m_bytes)` in log2 distance,
    /// matching `N` first and then the message bucket.
    pub fn lookup(&self, n_nodes: usize, m_bytes: f64) -> Result<FlatAlgorithm> {
        if self.rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        let log_dist = |a: f64, b: f64| (a.max(1.0).log2() - b.max(1.0).log2()).abs();
        let nearest = |candidates: &mut dyn Iterator<Item = f64>, target: f64| {
            candidates.fold(None::<f64>, |best, c| match best {
                Some(b) if log_dist(b, target) <= log_dist(c, target) => Some(b),
                _ => Some(c),
            })
        };
        let n = nearest(&mut self.rows.iter().map(|r| r.n_nodes as f64), n_nodes as f64).expect("non-empty");
        let m = nearest(
            &mut self
                .rows
                .iter()
                .filter(|r| r.n_nodes as f64 == n)
                .map(|r| r.m_bytes as f64),
            m_bytes,
        )
        .expect("non-empty");
        let row = self
            .rows
            .iter()
            .find(|r| r.n_nodes as f64 == n && r.m_bytes as f64 == m)
            .expect("selected from rows");
        if row.winner == FlatAlgorithm::Recursive && !n_nodes.is_power_of_two() {
            return Ok(FlatAlgorithm::Ring);
        }
        Ok(row.winner)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            wtr.write_record(["N", "m_bytes", "ring_seconds", "recursive_seconds", "winner"])?;
        }
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<CalibrationRow>, _>>()?;
        Ok(Self::new(rows))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}
