//! Optimizer × seed comparison. Cells run in parallel and are reduced in
//! (optimizer order, seed) order.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::{run_training, ExperimentConfig, RunStatus};
use crate::error::{Error, Result};
use crate::optimizers::OptimizerKind;

/// One finished (or aborted) run.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonCell {
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Final accuracy per target; empty when the run aborted.
    pub accuracies: Vec<f64>,
    pub tail_le: f64,
    pub final_lr: f64,
    /// `None` for completed runs, otherwise why the run stopped.
    pub aborted: Option<String>,
}

/// Mean and sample standard deviation per target over the completed runs
/// of one optimizer. The last entry of `mean`/`std` is the average over
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub optimizer: OptimizerKind,
    pub completed: usize,
    pub aborted: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub target_tags: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub cells: Vec<ComparisonCell>,
}

/// Welford accumulator; `std` is the n−1 sample deviation (0 for n < 2).
#[derive(Debug, Clone, Copy, Default)]
struct Running {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    fn std(&self) -> f64 {
        match self.n {
            0 => f64::NAN,
            1 => 0.0,
            n => (self.m2 / (n - 1) as f64).sqrt(),
        }
    }
}

/// Runs every (optimizer, seed) pair on `base`, overriding only the
/// optimizer kind and the seed.
pub fn run_comparison(base: &ExperimentConfig, optimizers: &[OptimizerKind], seeds: &[u64]) -> Result<ComparisonTable> {
    if optimizers.is_empty() || seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one optimizer and one seed".into()));
    }
    base.validate()?;
    let target_tags: Vec<String> = base.domains.targets.iter().map(|t| t.tag.clone()).collect();
    let jobs: Vec<(usize, OptimizerKind, u64)> = optimizers
        .iter()
        .enumerate()
        .flat_map(|(i, &k)| seeds.iter().map(move |&s| (i, k, s)))
        .collect();
    let mut cells: Vec<(usize, ComparisonCell)> = jobs
        .par_iter()
        .map(|&(i, kind, seed)| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.optimizer.kind = kind;
            cfg.verbose = false;
            let cell = match run_training(&cfg) {
                Ok(res) => {
                    let final_lr = res.metrics.last().map_or(cfg.optimizer.lr, |r| r.lr);
                    let tail_le = res.tail_mean_le();
                    match res.status {
                        RunStatus::Completed => ComparisonCell {
                            optimizer: kind,
                            seed,
                            accuracies: res
                                .final_accuracies()
                                .unwrap_or_default()
                                .iter()
                                .map(|(_, a)| *a)
                                .collect(),
                            tail_le,
                            final_lr,
                            aborted: None,
                        },
                        RunStatus::Diverged { epoch, reason, .. } => ComparisonCell {
                            optimizer: kind,
                            seed,
                            accuracies: Vec::new(),
                            tail_le,
                            final_lr,
                            aborted: Some(format!("diverged at epoch {epoch}: {reason}")),
                        },
                    }
                }
                Err(e) => ComparisonCell {
                    optimizer: kind,
                    seed,
                    accuracies: Vec::new(),
                    tail_le: f64::NAN,
                    final_lr: f64::NAN,
                    aborted: Some(e.to_string()),
                },
            };
            (i, cell)
        })
        .collect();
    cells.sort_by_key(|(i, c)| (*i, c.seed));

    let rows = optimizers
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mine: Vec<&ComparisonCell> = cells.iter().filter(|(j, _)| *j == i).map(|(_, c)| c).collect();
            let mut acc = vec![Running::default(); target_tags.len() + 1];
            for c in mine.iter().filter(|c| c.aborted.is_none()) {
                for (r, &a) in acc.iter_mut().zip(&c.accuracies) {
                    r.push(a);
                }
                if !c.accuracies.is_empty() {
                    let avg = c.accuracies.iter().sum::<f64>() / c.accuracies.len() as f64;
                    acc[target_tags.len()].push(avg);
                }
            }
            let aborted = mine.iter().filter(|c| c.aborted.is_some()).count();
            ComparisonRow {
                optimizer: kind,
                completed: mine.len() - aborted,
                aborted,
                mean: acc.iter().map(Running::mean).collect(),
                std: acc.iter().map(Running::std).collect(),
            }
        })
        .collect();
    Ok(ComparisonTable {
        target_tags,
        rows,
        cells: cells.into_iter().map(|(_, c)| c).collect(),
    })
}

impl ComparisonTable {
    /// `optimizer,completed,aborted,<tag>_mean,<tag>_std,...,avg_mean,avg_std`
    /// with accuracies in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("optimizer,completed,aborted");
        for t in self.target_tags.iter().map(String::as_str).chain(["avg"]) {
            let _ = write!(out, ",{t}_mean,{t}_std");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.optimizer, r.completed, r.aborted);
            for (m, s) in r.mean.iter().zip(&r.std) {
                let _ = write!(out, ",{:?},{:?}", 100.0 * m, 100.0 * s);
            }
            out.push('\n');
        }
        out
    }

    /// Per-run listing: `optimizer,seed,status,tail_le,final_lr,acc_<tag>...`.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("optimizer,seed,status,tail_le,final_lr");
        for t in &self.target_tags {
            let _ = write!(out, ",acc_{t}");
        }
        out.push('\n');
        for c in &self.cells {
            let status = if c.aborted.is_some() { "aborted" } else { "completed" };
            let _ = write!(out, "{},{},{},{:?},{:?}", c.optimizer, c.seed, status, c.tail_le, c.final_lr);
            for k in 0..self.target_tags.len() {
                match c.accuracies.get(k) {
                    Some(a) => {
                        let _ = write!(out, ",{a:?}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable `mean ± std` table in percent, followed by aborted runs.
    pub fn render(&self) -> String {
        let mut out = format!("{:<10}", "optimizer");
        for t in self.target_tags.iter().map(String::as_str).chain(["avg"]) {
            let _ = write!(out, " {t:>15}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<10}", r.optimizer.to_string());
            for (m, s) in r.mean.iter().zip(&r.std) {
                let _ = write!(out, " {:>15}", format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s));
            }
            out.push('\n');
        }
        for c in self.cells.iter().filter(|c| c.aborted.is_some()) {
            let _ = writeln!(
                out,
                "aborted: {} seed {}: {}",
                c.optimizer,
                c.seed,
                c.aborted.as_deref().unwrap_or_default()
            );
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("comparison.csv", self.to_csv()),
            ("comparison_runs.csv", self.cells_csv()),
            ("comparison.txt", self.render()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [0.71, 0.74, 0.69, 0.80, 0.77, 0.75];
        let mut r = Running::default();
        xs.iter().for_each(|&x| r.push(x));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((r.mean() - mean).abs() < 1e-15);
        assert!((r.std() - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_lists_rejected() {
        let cfg = ExperimentConfig::default();
        assert!(run_comparison(&cfg, &[], &[0]).is_err());
        assert!(run_comparison(&cfg, &[OptimizerKind::Sgd], &[]).is_err());
    }
}
