//! Size and grid parsing, and the key=value sweep configuration file.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Parses a byte count such as `4096`, `4K`, `16M`, `1G` (binary units,
/// optional trailing `B` or `iB`).
pub fn parse_size(s: &str) -> Result<u64> {
    let t = s.trim();
    let upper = t.to_ascii_uppercase();
    let body = upper
        .strip_suffix("IB")
        .or_else(|| upper.strip_suffix('B'))
        .unwrap_or(&upper);
    let (digits, shift) = match body.chars().last() {
        Some('K') => (&body[..body.len() - 1], 10),
        Some('M') => (&body[..body.len() - 1], 20),
        Some('G') => (&body[..body.len() - 1], 30),
        Some('T') => (&body[..body.len() - 1], 40),
        _ => (body, 0),
    };
    let n: u64 = digits
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad size `{t}`")))?;
    n.checked_shl(shift)
        .filter(|v| v >> shift == n)
        .ok_or_else(|| Error::InvalidConfig(format!("size `{t}` overflows")))
}

pub fn parse_sizes(s: &str) -> Result<Vec<u64>> {
    s.split(',').filter(|x| !x.trim().is_empty()).map(parse_size).collect()
}

/// Formats a byte count with the largest exact binary unit.
pub fn format_size(bytes: u64) -> String {
    for (shift, unit) in [(40, "T"), (30, "G"), (20, "M"), (10, "K")] {
        if bytes >= 1 << shift && bytes.is_multiple_of(1 << shift) {
            return format!("{}{unit}", bytes >> shift);
        }
    }
    bytes.to_string()
}

/// Parses `NxM` into `(nodes, gpus_per_node)`.
pub fn parse_cell(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidConfig(format!("bad grid cell `{s}`, expected NxM"));
    let (n, m) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    let m: usize = m.trim().parse().map_err(|_| bad())?;
    if n == 0 || m == 0 {
        return Err(bad());
    }
    Ok((n, m))
}

pub fn parse_grid(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',').filter(|x| !x.trim().is_empty()).map(parse_cell).collect()
}

/// A list given either as a comma-separated string or as an array.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ListValue {
    Joined(String),
    Items(Vec<toml::Value>),
}

impl ListValue {
    pub fn joined(&self) -> String {
        match self {
            ListValue::Joined(s) => s.clone(),
            ListValue::Items(items) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
        }
    }
}

/// Keys accepted in a `--config` file. Command-line flags override them.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<String>,
    pub collective: Option<String>,
    pub algo: Option<String>,
    pub inter: Option<String>,
    pub sizes: Option<ListValue>,
    pub grid: Option<ListValue>,
    pub trials: Option<usize>,
    pub verify: Option<bool>,
    pub warmup: Option<bool>,
    pub out: Option<String>,
    pub seed: Option<u64>,
    pub nodes: Option<usize>,
    pub gpus_per_node: Option<usize>,
    pub nics_per_node: Option<usize>,
    pub nic_policy: Option<String>,
    pub phys_topology: Option<String>,
    pub reduce_profile: Option<String>,
    pub alpha_inter: Option<f64>,
    pub beta_inter: Option<f64>,
    pub alpha_intra: Option<f64>,
    pub beta_intra: Option<f64>,
    pub gamma_reduce_fast: Option<f64>,
    pub gamma_reduce_slow: Option<f64>,
    pub packet_bytes: Option<u64>,
    pub hostfile: Option<String>,
    pub connect_timeout_s: Option<f64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// `nodes x gpus_per_node` as a single-cell grid, when both are given
    /// and no explicit grid is.
    pub fn grid_cells(&self) -> Result<Option<Vec<(usize, usize)>>> {
        match (&self.grid, self.nodes, self.gpus_per_node) {
            (Some(g), _, _) => parse_grid(&g.joined()).map(Some),
            (None, Some(n), Some(m)) => Ok(Some(vec![(n, m)])),
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096").unwrap(), 4096);
        assert_eq!(parse_size("4K").unwrap(), 4096);
        assert_eq!(parse_size("16M").unwrap(), 16 << 20);
        assert_eq!(parse_size("16MB").unwrap(), 16 << 20);
        assert_eq!(parse_size("1GiB").unwrap(), 1 << 30);
        assert_eq!(parse_size("1g").unwrap(), 1 << 30);
        assert!(parse_size("M").is_err());
        assert!(parse_size("-3").is_err());
        assert!(parse_size("99999999999T").is_err());
        assert_eq!(parse_sizes("16M,64M").unwrap(), vec![16 << 20, 64 << 20]);
        assert_eq!(format_size(64 << 20), "64M");
        assert_eq!(format_size(1 << 30), "1G");
        assert_eq!(format_size(1000), "1000");
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("2x4,4x8").unwrap(), vec![(2, 4), (4, 8)]);
        assert_eq!(parse_cell(" 1X2 ").unwrap(), (1, 2));
        assert!(parse_cell("2x").is_err());
        assert!(parse_cell("0x4").is_err());
        assert!(parse_cell("24").is_err());
    }

    #[test]
    fn file_config() {
        let c = FileConfig::parse(
            r#"
            backend = "sim"
            sizes = "16M,32M"
            grid = ["2x4", "4x8"]
            trials = 3
            verify = true
            beta_inter = 4e-11
            "#,
        )
        .unwrap();
        assert_eq!(c.backend.as_deref(), Some("sim"));
        assert_eq!(
            parse_sizes(&c.sizes.as_ref().unwrap().joined()).unwrap(),
            vec![16 << 20, 32 << 20]
        );
        assert_eq!(c.grid_cells().unwrap(), Some(vec![(2, 4), (4, 8)]));
        assert_eq!(c.beta_inter, Some(4e-11));
        assert!(FileConfig::parse("bogus = 1").is_err());
        let shape = FileConfig::parse("nodes = 2\ngpus_per_node = 8").unwrap();
        assert_eq!(shape.grid_cells().unwrap(), Some(vec![(2, 8)]));
    }
}
