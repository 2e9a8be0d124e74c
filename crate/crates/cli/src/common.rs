use std::fmt;

use serde::{Deserialize, Serialize};
use tracegrad::lowmem::ProbeMode;
use tracegrad::nn::GradMode;
use tracegrad::BlockSparsity;

/// Bad flags or flag combinations; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Files produced by a subcommand plus its verdict.
pub struct Run {
    pub files: Vec<(String, Vec<u8>)>,
    pub pass: bool,
    pub summary: Vec<String>,
}

impl Run {
    pub fn new() -> Self {
        Self { files: Vec::new(), pass: true, summary: Vec::new() }
    }

    pub fn file(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn say(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }
}

/// Serialises rows to CSV bytes.
pub fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

/// `a..b` doubles from `a` up to `b`; otherwise a comma list.
pub fn parse_grid(s: &str) -> anyhow::Result<Vec<usize>> {
    let bad = || UsageError(format!("cannot read grid {s:?}; use a..b or a,b,c"));
    let grid: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a == 0 || a > b {
            return usage(format!("grid {s:?} must satisfy 0 < a <= b"));
        }
        std::iter::successors(Some(a), |&x| x.checked_mul(2)).take_while(|&x| x <= b).collect()
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if grid.is_empty() || grid.contains(&0) {
        return usage(format!("grid {s:?} needs positive entries"));
    }
    Ok(grid)
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeKind {
    Exact,
    Indep,
    Multi,
    MultiOrtho,
}

impl ModeKind {
    pub fn grad_mode(self, r: Option<usize>) -> anyhow::Result<GradMode> {
        let need_r = || match r {
            Some(0) => usage("--r must be positive"),
            Some(r) => Ok(r),
            None => usage("probed modes need --r"),
        };
        Ok(match self {
            ModeKind::Exact => GradMode::Exact,
            ModeKind::Indep => GradMode::Indep { r: need_r()? },
            ModeKind::Multi => GradMode::Multi { r: need_r()? },
            ModeKind::MultiOrtho => GradMode::MultiOrtho { r: need_r()?, probs: None },
        })
    }

    /// Probe mode for a layer with `c_in` input channels; `None` for exact.
    pub fn probe_mode(self, c_in: usize, p: Option<f64>) -> anyhow::Result<Option<ProbeMode>> {
        Ok(match self {
            ModeKind::Exact => None,
            ModeKind::Indep => Some(ProbeMode::Independent),
            ModeKind::Multi => Some(ProbeMode::Multi),
            ModeKind::MultiOrtho => Some(ProbeMode::MultiOrtho(match p {
                Some(p) => BlockSparsity::uniform(c_in, p).map_err(|e| UsageError(e.to_string()))?,
                None => BlockSparsity::default_for(c_in),
            })),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("4..64").unwrap(), vec![4, 8, 16, 32, 64]);
        assert_eq!(parse_grid("16, 64,256").unwrap(), vec![16, 64, 256]);
        assert_eq!(parse_grid("3..20").unwrap(), vec![3, 6, 12]);
        for bad in ["0..4", "8..4", "a,b", "1,0", ""] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }
}
