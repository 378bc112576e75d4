//! Synthetic source/target domains and their CSV interchange format.
//!
//! CSV layout: a header `f0,...,f{d-1},label,domain` followed by one sample
//! per line. Floats are written in shortest round-trip form, so a load of a
//! saved file reproduces every feature bit for bit.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffengine::Batch;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    domain: String,
    seed: u64,
}

impl DomainDataset {
    /// `num_classes` defaults to `max(label) + 1` when `None`.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: Option<usize>,
        domain: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let domain = domain.into();
        if features.rows() == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if features.cols() == 0 {
            return Err(Error::invalid("dataset must have at least one feature"));
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        validate_tag(&domain)?;
        let max_label = labels.iter().copied().max().unwrap_or(0);
        let num_classes = num_classes.unwrap_or(max_label + 1);
        if max_label >= num_classes {
            return Err(Error::invalid(format!(
                "label {max_label} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_domain(mut self, tag: impl Into<String>) -> Result<Self> {
        let tag = tag.into();
        validate_tag(&tag)?;
        self.domain = tag;
        Ok(self)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            Some(self.num_classes),
            self.domain.clone(),
            self.seed,
        )
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        Batch::classification(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::classification(self.features.clone(), self.labels.clone())
    }

    /// Rows of `other` appended below `self`; keeps `self`'s tag.
    pub fn concat(&self, other: &DomainDataset) -> Result<Self> {
        Self::new(
            self.features.vstack(&other.features)?,
            self.labels.iter().chain(&other.labels).copied().collect(),
            Some(self.num_classes.max(other.num_classes)),
            self.domain.clone(),
            self.seed,
        )
    }

    /// Keeps `⌊fraction·n_c⌋` samples of every class `c`, chosen by a seeded
    /// shuffle; selected rows stay in their original order.
    pub fn stratified_subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("data fraction {fraction} outside (0, 1]")));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            let take = (fraction * members.len() as f64).floor() as usize;
            if take == 0 && !members.is_empty() {
                return Err(Error::invalid(format!(
                    "fraction {fraction} leaves class {class} ({} samples) empty",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            keep.extend_from_slice(&members[..take]);
        }
        keep.sort_unstable();
        self.select(&keep)
    }
}

fn validate_tag(tag: &str) -> Result<()> {
    if tag.is_empty() || tag.contains([',', '"', '\n', '\r']) || tag.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!(
            "domain tag `{tag}` must be a non-empty token without commas, quotes or whitespace"
        )));
    }
    Ok(())
}

fn shuffled(features: Vec<Vec<f64>>, labels: Vec<usize>, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    (
        order.iter().map(|&i| features[i].clone()).collect(),
        order.iter().map(|&i| labels[i]).collect(),
    )
}

/// Two interleaved half circles: class 0 on the upper unit half circle
/// centred at the origin, class 1 on the lower one centred at `(1, 0.5)`.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<DomainDataset> {
    if n < 2 {
        return Err(Error::invalid("two moons needs at least two samples"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("noise must be non-negative"));
    }
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let angle = |i: usize, m: usize| if m > 1 { PI * i as f64 / (m - 1) as f64 } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = angle(i, n_outer);
        features.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = angle(i, n_inner);
        features.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        for row in &mut features {
            for v in row.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += noise * e;
            }
        }
    }
    let (features, labels) = shuffled(features, labels, &mut rng);
    DomainDataset::new(Matrix::from_rows(&features)?, labels, Some(2), "two_moons", seed)
}

/// Radius of the circle the blob centres sit on.
pub const BLOB_RADIUS: f64 = 3.0;

/// Equally spaced centres on a circle of radius 3 with a seeded phase.
pub fn blob_centers(num_classes: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rand::Rng::random_range(&mut rng, 0.0..2.0 * PI);
    (0..num_classes)
        .map(|j| {
            let a = phase + 2.0 * PI * j as f64 / num_classes as f64;
            [BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin()]
        })
        .collect()
}

/// Isotropic Gaussian clusters around [`blob_centers`], balanced over classes.
pub fn gen_blobs(n: usize, num_classes: usize, spread: f64, seed: u64) -> Result<DomainDataset> {
    if num_classes < 2 {
        return Err(Error::invalid("blobs need at least two classes"));
    }
    if n < num_classes {
        return Err(Error::invalid("blobs need at least one sample per class"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be non-negative"));
    }
    let centers = blob_centers(num_classes, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        let ex: f64 = StandardNormal.sample(&mut rng);
        let ey: f64 = StandardNormal.sample(&mut rng);
        features.push(vec![centers[c][0] + spread * ex, centers[c][1] + spread * ey]);
        labels.push(c);
    }
    let (features, labels) = shuffled(features, labels, &mut rng);
    DomainDataset::new(Matrix::from_rows(&features)?, labels, Some(num_classes), "blobs", seed)
}

/// Covariate shift `x ↦ scale·R(rotation)·x + translation + noise·ε`.
/// The rotation acts on the plane of the first two features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShift {
    /// Radians.
    pub rotation: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise: 0.0,
        }
    }
}

impl DomainShift {
    pub fn rotation_degrees(deg: f64, noise: f64) -> Self {
        Self {
            rotation: deg.to_radians(),
            noise,
            ..Self::default()
        }
    }
}

pub fn shift_domain(data: &DomainDataset, shift: &DomainShift, new_tag: &str, seed: u64) -> Result<DomainDataset> {
    let d = data.dim();
    if !shift.translation.is_empty() && shift.translation.len() != d {
        return Err(Error::DimensionMismatch {
            context: "shift translation",
            expected: d,
            actual: shift.translation.len(),
        });
    }
    if shift.rotation != 0.0 && d < 2 {
        return Err(Error::invalid("rotation needs at least two features"));
    }
    if !(shift.scale > 0.0) || !(shift.noise >= 0.0) {
        return Err(Error::invalid("shift needs scale > 0 and noise >= 0"));
    }
    let (s, c) = shift.rotation.sin_cos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = data.features().clone();
    for i in 0..features.rows() {
        let row = features.row_mut(i);
        if d >= 2 {
            let (x, y) = (row[0], row[1]);
            row[0] = c * x - s * y;
            row[1] = s * x + c * y;
        }
        for (j, v) in row.iter_mut().enumerate() {
            *v *= shift.scale;
            if let Some(t) = shift.translation.get(j) {
                *v += t;
            }
            if shift.noise > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += shift.noise * e;
            }
        }
    }
    DomainDataset::new(
        features,
        data.labels().to_vec(),
        Some(data.num_classes()),
        new_tag,
        seed,
    )
}

pub fn save_csv(data: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        let mut header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        header.push("domain".into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..data.len() {
            for v in data.features().row(i) {
                write!(w, "{v:?},")?;
            }
            writeln!(w, "{},{}", data.labels()[i], data.domain())?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Loads a dataset written by [`save_csv`]. The seed is not stored in the
/// file and comes back as 0.
pub fn load_csv(path: impl AsRef<Path>) -> Result<DomainDataset> {
    load_csv_with_classes(path, None)
}

/// As [`load_csv`], additionally rejecting labels `>= num_classes`.
pub fn load_csv_with_classes(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let cols = header.len();
    if cols < 2 || &header[cols - 2] != "label" || &header[cols - 1] != "domain" {
        return Err(parse_err(1, "header must end with `label,domain`".into()));
    }
    let d = cols - 2;
    if d == 0 {
        return Err(parse_err(1, "file declares no feature columns".into()));
    }
    for (j, name) in header.iter().take(d).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(1, format!("expected column `f{j}`, found `{name}`")));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domain: Option<String> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                    parse_err(line, format!("ragged row: expected {expected_len} fields, got {len}"))
                }
                _ => parse_err(line, e.to_string()),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for j in 0..d {
            let v: f64 = record[j]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column f{j}: `{}` is not a number", &record[j])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column f{j}: non-finite value")));
            }
            data.push(v);
        }
        let label: usize = record[d]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("label `{}` is not a class index", &record[d])))?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(parse_err(line, format!("label {label} out of range for {k} classes")));
            }
        }
        labels.push(label);
        let tag = &record[d + 1];
        match &domain {
            None => {
                validate_tag(tag).map_err(|e| parse_err(line, e.to_string()))?;
                domain = Some(tag.to_string());
            }
            Some(t) if t != tag => {
                return Err(parse_err(line, format!("mixed domain tags `{t}` and `{tag}`")));
            }
            _ => {}
        }
    }
    let domain = domain.ok_or_else(|| parse_err(2, "file contains no samples".into()))?;
    let n = labels.len();
    DomainDataset::new(Matrix::new(n, d, data)?, labels, num_classes, domain, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn noiseless_moons_lie_on_circles() {
        let ds = gen_two_moons(4, 0.0, 1).unwrap();
        for i in 0..4 {
            let r = ds.features().row(i);
            let radius = if ds.labels()[i] == 0 {
                (r[0] * r[0] + r[1] * r[1]).sqrt()
            } else {
                ((r[0] - 1.0).powi(2) + (r[1] - 0.5).powi(2)).sqrt()
            };
            assert_abs_diff_eq!(radius, 1.0, epsilon = 1e-12);
        }
        assert_eq!(ds.class_counts(), vec![2, 2]);
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(gen_two_moons(50, 0.1, 3).unwrap(), gen_two_moons(50, 0.1, 3).unwrap());
        assert_ne!(gen_two_moons(50, 0.1, 3).unwrap(), gen_two_moons(50, 0.1, 4).unwrap());
        assert_eq!(gen_blobs(30, 3, 0.2, 9).unwrap(), gen_blobs(30, 3, 0.2, 9).unwrap());
    }

    #[test]
    fn odd_sizes_stay_balanced() {
        let ds = gen_two_moons(101, 0.1, 0).unwrap();
        let c = ds.class_counts();
        assert!(c[0].abs_diff(c[1]) <= 1);
        let ds = gen_blobs(103, 5, 0.3, 0).unwrap();
        let c = ds.class_counts();
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
    }

    #[test]
    fn zero_spread_blobs_sit_on_centers() {
        let ds = gen_blobs(20, 4, 0.0, 5).unwrap();
        let centers = blob_centers(4, 5);
        for i in 0..ds.len() {
            let c = centers[ds.labels()[i]];
            assert_eq!(ds.features().row(i), &c[..]);
        }
        let min_dist = 2.0 * BLOB_RADIUS * (PI / 4.0).sin();
        for a in 0..4 {
            for b in (a + 1)..4 {
                let d = ((centers[a][0] - centers[b][0]).powi(2) + (centers[a][1] - centers[b][1]).powi(2)).sqrt();
                assert!(d >= min_dist - 1e-12);
            }
        }
    }

    #[test]
    fn shift_identity_and_full_turn() {
        let ds = gen_two_moons(40, 0.1, 2).unwrap();
        let same = shift_domain(&ds, &DomainShift::default(), "t", 0).unwrap();
        assert_eq!(same.features(), ds.features());
        assert_eq!(same.labels(), ds.labels());
        assert_eq!(same.domain(), "t");
        let turned = shift_domain(&ds, &DomainShift { rotation: 2.0 * PI, ..Default::default() }, "t", 0).unwrap();
        for (a, b) in turned.features().as_slice().iter().zip(ds.features().as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn shift_errors() {
        let ds = gen_two_moons(10, 0.0, 2).unwrap();
        let bad = DomainShift {
            translation: vec![1.0, 2.0, 3.0],
            ..Default::default()
        };
        assert!(shift_domain(&ds, &bad, "t", 0).is_err());
        assert!(shift_domain(&ds, &DomainShift::default(), "has,comma", 0).is_err());
    }

    #[test]
    fn stratified_sizes() {
        let ds = gen_two_moons(200, 0.1, 1).unwrap();
        for f in [0.1, 0.2, 0.5] {
            let sub = ds.stratified_subsample(f, 7).unwrap();
            assert_eq!(sub.class_counts(), vec![(f * 100.0f64).floor() as usize; 2]);
        }
        assert!(ds.stratified_subsample(0.0, 7).is_err());
        assert!(ds.stratified_subsample(0.001, 7).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moons.csv");
        let ds = gen_two_moons(60, 0.1, 11).unwrap();
        save_csv(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("f0,f1,label,domain\n"));
        assert!(!text.contains('\r'));
        let back = load_csv(&path).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.domain(), "two_moons");

        let write = |name: &str, body: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, body).unwrap();
            p
        };
        assert!(load_csv(write("empty.csv", "label,domain\n0,a\n")).is_err());
        let err = load_csv(write("ragged.csv", "f0,f1,label,domain\n1,2,0,a\n1,0,a\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = load_csv(write("nan.csv", "f0,label,domain\n1,0,a\nx,1,a\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = load_csv_with_classes(write("range.csv", "f0,label,domain\n1,0,a\n1,5,a\n"), Some(2)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(load_csv(write("neg.csv", "f0,label,domain\n1,-1,a\n")).is_err());
    }
}
