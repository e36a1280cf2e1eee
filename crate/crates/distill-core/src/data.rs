//! Deterministic synthetic 2-D classification tasks, train/test splitting,
//! feature standardization, and the CSV dataset format.
//!
//! Generators are pure functions of their parameters and seed. A split pair
//! is drawn from one RNG stream, train first, so the two halves are disjoint
//! random draws and jointly exhaust the sample budget.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which half of a split a dataset came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled feature matrix, row-major `n x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split = split;
        self
    }

    /// Full feature matrix as a `[n, d]` tensor.
    pub fn features_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.d], self.x.clone()).expect("dataset shape consistent")
    }

    /// Gathers the rows at `idx` into a batch tensor plus its labels.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.d..(i + 1) * self.d]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![idx.len(), self.d], x).expect("gather shape consistent"),
            labels,
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset must hold at least one row".into()));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Label {
                label: l,
                classes: self.classes,
            });
        }
        Ok(())
    }
}

fn check_common(classes: usize, per_class: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Parameter {
            name: "classes",
            message: format!("need at least 2 classes, got {classes}"),
        });
    }
    if per_class == 0 {
        return Err(Error::Parameter {
            name: "per_class",
            message: "need at least 1 sample per class".into(),
        });
    }
    Ok(())
}

const BLOB_RADIUS: f64 = 4.0;

fn gen_blobs(
    classes: usize,
    per_class: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
    split: Split,
) -> Dataset {
    let n = classes * per_class;
    let mut x = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        let (cx, cy) = (BLOB_RADIUS * angle.cos(), BLOB_RADIUS * angle.sin());
        for _ in 0..per_class {
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            x.push(cx + sigma * nx);
            x.push(cy + sigma * ny);
            labels.push(k);
        }
    }
    Dataset {
        x,
        n,
        d: 2,
        labels,
        classes,
        split,
    }
}

/// Gaussian clusters centered on a circle of radius 4, one per class.
pub fn make_blobs(classes: usize, per_class: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    check_common(classes, per_class)?;
    if sigma <= 0.0 {
        return Err(Error::Parameter {
            name: "sigma",
            message: format!("spread must be positive, got {sigma}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gen_blobs(classes, per_class, sigma, &mut rng, Split::Train))
}

/// Train/test blob pair drawn from one stream: train first, then test.
pub fn make_blobs_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    check_common(classes, train_per_class)?;
    check_common(classes, test_per_class)?;
    if sigma <= 0.0 {
        return Err(Error::Parameter {
            name: "sigma",
            message: format!("spread must be positive, got {sigma}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = gen_blobs(classes, train_per_class, sigma, &mut rng, Split::Train);
    let test = gen_blobs(classes, test_per_class, sigma, &mut rng, Split::Test);
    Ok((train, test))
}

/// Radial extent of the spiral arms before noise; the inner offset keeps
/// arms from collapsing onto each other at the origin. The outer radius is
/// calibrated so a small network trained on hard labels alone lands mid-band
/// rather than saturating the task.
const SPIRAL_R_INNER: f64 = 0.5;
const SPIRAL_R_OUTER: f64 = 3.5;

fn gen_spirals(
    classes: usize,
    per_class: usize,
    sigma: f64,
    turns: f64,
    rng: &mut ChaCha8Rng,
    split: Split,
) -> Dataset {
    let n = classes * per_class;
    let mut x = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        let phase = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        for _ in 0..per_class {
            let u: f64 = rng.random();
            let r = SPIRAL_R_INNER + (SPIRAL_R_OUTER - SPIRAL_R_INNER) * u;
            let theta = std::f64::consts::PI * turns * u + phase;
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            x.push(r * theta.cos() + sigma * nx);
            x.push(r * theta.sin() + sigma * ny);
            labels.push(k);
        }
    }
    Dataset {
        x,
        n,
        d: 2,
        labels,
        classes,
        split,
    }
}

fn check_spiral_params(sigma: f64, turns: f64) -> Result<()> {
    if sigma < 0.0 {
        return Err(Error::Parameter {
            name: "sigma",
            message: format!("noise must be nonnegative, got {sigma}"),
        });
    }
    if turns <= 0.0 {
        return Err(Error::Parameter {
            name: "turns",
            message: format!("turns must be positive, got {turns}"),
        });
    }
    Ok(())
}

/// Interleaved Archimedean spiral arms, one per class, with Gaussian noise.
/// `turns` counts half revolutions: each arm sweeps `turns * PI` radians.
pub fn make_spirals(
    classes: usize,
    per_class: usize,
    sigma: f64,
    turns: f64,
    seed: u64,
) -> Result<Dataset> {
    check_common(classes, per_class)?;
    check_spiral_params(sigma, turns)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gen_spirals(
        classes,
        per_class,
        sigma,
        turns,
        &mut rng,
        Split::Train,
    ))
}

/// Train/test spiral pair drawn from one stream: train first, then test.
pub fn make_spirals_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    sigma: f64,
    turns: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    check_common(classes, train_per_class)?;
    check_common(classes, test_per_class)?;
    check_spiral_params(sigma, turns)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = gen_spirals(classes, train_per_class, sigma, turns, &mut rng, Split::Train);
    let test = gen_spirals(classes, test_per_class, sigma, turns, &mut rng, Split::Test);
    Ok((train, test))
}

/// Per-column affine map fitted on a train split: subtract mean, divide by
/// (population) standard deviation, guarded against constant columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-12;

impl Standardizer {
    pub fn fit(train: &Dataset) -> Standardizer {
        let (n, d) = (train.n, train.d);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += train.x[i * d + j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let diff = train.x[i * d + j] - mean[j];
                var[j] += diff * diff;
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        for i in 0..ds.n {
            for j in 0..ds.d {
                ds.x[i * ds.d + j] = (ds.x[i * ds.d + j] - self.mean[j]) / self.std[j];
            }
        }
    }
}

/// Standardizes both splits using statistics of the train split only.
pub fn standardize_pair(train: &mut Dataset, test: &mut Dataset) -> Standardizer {
    let s = Standardizer::fit(train);
    s.apply(train);
    s.apply(test);
    s
}

pub const CANONICAL_CLASSES: usize = 3;
pub const CANONICAL_NOISE: f64 = 0.35;
pub const CANONICAL_TURNS: f64 = 1.75;
pub const CANONICAL_TRAIN_PER_CLASS: usize = 500;
pub const CANONICAL_TEST_PER_CLASS: usize = 500;

/// The standard desk task: standardized 3-class spirals, 500/class per split.
pub fn canonical_task(seed: u64) -> (Dataset, Dataset) {
    let (mut train, mut test) = make_spirals_split(
        CANONICAL_CLASSES,
        CANONICAL_TRAIN_PER_CLASS,
        CANONICAL_TEST_PER_CLASS,
        CANONICAL_NOISE,
        CANONICAL_TURNS,
        seed,
    )
    .expect("canonical parameters are valid");
    standardize_pair(&mut train, &mut test);
    (train, test)
}

/// Writes the CSV form: header `x0,...,x{d-1},label`, one row per sample,
/// floats at 17 significant digits so values round trip exactly.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let mut out = String::new();
    for j in 0..ds.d {
        let _ = write!(out, "x{j},");
    }
    out.push_str("label\n");
    for i in 0..ds.n {
        for j in 0..ds.d {
            let _ = write!(out, "{:.16e},", ds.x[i * ds.d + j]);
        }
        let _ = writeln!(out, "{}", ds.labels[i]);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Reads a dataset CSV. When `classes` is given, labels are checked against
/// it; otherwise the class count is `max(label) + 1`. Line numbers in errors
/// are 1-based and include the header.
pub fn load_dataset(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(1, "empty file, expected a dataset header"));
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "label" {
        return Err(parse_err(1, format!("bad header {header:?}")));
    }
    let d = cols.len() - 1;
    for (j, col) in cols[..d].iter().enumerate() {
        if *col != format!("x{j}") {
            return Err(parse_err(
                1,
                format!("expected feature column x{j}, found {col:?}"),
            ));
        }
    }

    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", d + 1, fields.len()),
            ));
        }
        for (j, f) in fields[..d].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("column x{j}: invalid float {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("column x{j}: non-finite value")));
            }
            x.push(v);
        }
        let label: usize = fields[d]
            .parse()
            .map_err(|_| parse_err(lineno, format!("invalid label {:?}", fields[d])))?;
        if let Some(c) = classes {
            if label >= c {
                return Err(parse_err(
                    lineno,
                    format!("label {label} out of range for {c} classes"),
                ));
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let ds = Dataset {
        n: labels.len(),
        x,
        d,
        labels,
        classes,
        split: Split::Train,
    };
    ds.validate()?;
    Ok(ds)
}
