//! CSV output for runs. Floats are written with their shortest round-trip
//! representation so identical runs give identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{IterationRow, MetricsRow};
use crate::diffengine::ParamVector;
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 7] = ["epoch", "iteration", "train_loss", "lr", "le", "delta_le", "renorm_count"];

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = create(path)?;
    for line in lines {
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per epoch:
/// `epoch,iteration,train_loss,lr,le,delta_le,renorm_count,acc_<tag>...`.
pub fn emit_metrics(rows: &[MetricsRow], tags: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(tags.iter().map(|t| format!("acc_{t}")));
    let mut lines = vec![header.join(",")];
    for r in rows {
        if r.accuracies.len() != tags.len() {
            return Err(Error::DimensionMismatch {
                context: "metrics row accuracies",
                expected: tags.len(),
                actual: r.accuracies.len(),
            });
        }
        let mut fields = vec![
            r.epoch.to_string(),
            r.iteration.to_string(),
            format!("{:?}", r.train_loss),
            format!("{:?}", r.lr),
            format!("{:?}", r.le),
            format!("{:?}", r.delta_le),
            r.renorm_count.to_string(),
        ];
        fields.extend(r.accuracies.iter().map(|(_, a)| format!("{a:?}")));
        lines.push(fields.join(","));
    }
    write_lines(path.as_ref(), lines)
}

/// Per-iteration trace written in verbose mode.
pub fn emit_iterations(rows: &[IterationRow], path: impl AsRef<Path>) -> Result<()> {
    let header = "epoch,iteration,loss,lr,stretch,le,delta_le,renorm_count".to_string();
    let lines = std::iter::once(header).chain(rows.iter().map(|r| {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{}",
            r.epoch, r.iteration, r.loss, r.lr, r.stretch, r.le, r.delta_le, r.renorm_count
        )
    }));
    write_lines(path.as_ref(), lines)
}

/// Writes `le_series.csv` (`epoch,le`) and `lr_series.csv` (`epoch,lr`)
/// into `dir`.
pub fn emit_plot_data(rows: &[MetricsRow], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let le = std::iter::once("epoch,le".to_string()).chain(rows.iter().map(|r| format!("{},{:?}", r.epoch, r.le)));
    write_lines(&dir.join("le_series.csv"), le)?;
    let lr = std::iter::once("epoch,lr".to_string()).chain(rows.iter().map(|r| format!("{},{:?}", r.epoch, r.lr)));
    write_lines(&dir.join("lr_series.csv"), lr)
}

/// Final parameters, one value per line.
pub fn write_params(params: &ParamVector, path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), params.as_slice().iter().map(|v| format!("{v:?}")))
}

/// Reads a file written by [`emit_metrics`]; returns the target tags and rows.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<MetricsRow>)> {
    let path = path.as_ref();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < FIXED_COLUMNS.len()
        || header.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b)
    {
        return Err(parse_err(1, "unexpected metrics header".into()));
    }
    let tags: Vec<String> = header
        .iter()
        .skip(FIXED_COLUMNS.len())
        .map(|h| {
            h.strip_prefix("acc_")
                .map(str::to_string)
                .ok_or_else(|| parse_err(1, format!("bad accuracy column {h:?}")))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let f = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("column {}: {e}", header[k].to_string())))
        };
        let u = |k: usize| -> Result<u64> {
            rec[k]
                .parse::<u64>()
                .map_err(|e| parse_err(line, format!("column {}: {e}", header[k].to_string())))
        };
        rows.push(MetricsRow {
            epoch: u(0)? as usize,
            iteration: u(1)?,
            train_loss: f(2)?,
            lr: f(3)?,
            le: f(4)?,
            delta_le: f(5)?,
            renorm_count: u(6)?,
            accuracies: tags
                .iter()
                .enumerate()
                .map(|(j, t)| Ok((t.clone(), f(FIXED_COLUMNS.len() + j)?)))
                .collect::<Result<_>>()?,
        });
    }
    Ok((tags, rows))
}
