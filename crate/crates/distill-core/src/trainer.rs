//! Optimizer and schedule machinery shared by all training strategies:
//! SGD with optional Nesterov momentum and weight decay, milestone learning
//! rate decay, the seeded epoch loop, and per-epoch metrics records.
//!
//! Everything is bit-deterministic: (seed, config, dataset) fully determines
//! every parameter and every metric a run produces.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mixes `stream` into `base` so one user-facing seed yields independent
/// streams (model init, connector init, batch shuffling) that never collide.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training recipe: SGD hyperparameters, schedule, and run seeding.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Apply weight decay to batchnorm gamma/beta as well (the default);
    /// turning this off exempts them.
    pub decay_bn_params: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            milestones: vec![120, 160, 180],
            gamma: 0.1,
            seed: 0,
            shuffle: true,
            decay_bn_params: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        for pair in self.milestones.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config(format!(
                    "milestones must be strictly increasing, got {:?}",
                    self.milestones
                )));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "milestones must stay below epochs ({}), got {:?}",
                    self.epochs, self.milestones
                )));
            }
        }
        Ok(())
    }

    /// Learning rate at `epoch`: base lr decayed once per milestone that has
    /// been reached, the milestone epoch itself included.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.gamma.powi(k as i32)
    }
}

/// Per-parameter momentum buffers, allocated lazily on the first step.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new() -> SgdState {
        SgdState::default()
    }

    /// One SGD update over `params` with matching `grads`.
    ///
    /// Weight decay is added into the gradient (g <- g + wd*w), the buffer
    /// advances as v <- mu*v + g, and the update is w <- w - lr*(g + mu*v)
    /// with Nesterov momentum or w <- w - lr*v without. Parameter order must
    /// be stable across calls; buffers are keyed by position.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Vec<f64>],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "optimizer got {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|(_, p)| vec![0.0; p.numel()])
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer state tracks {} parameters, step got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for ((name, param), (grad, v)) in params
            .iter_mut()
            .zip(grads.iter().zip(self.velocity.iter_mut()))
        {
            if param.numel() != grad.len() {
                return Err(Error::Config(format!(
                    "gradient size {} does not match parameter {name} of size {}",
                    grad.len(),
                    param.numel()
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter {name}"),
                });
            }
            let is_bn = name.ends_with(".gamma") || name.ends_with(".beta");
            let wd = if is_bn && !cfg.decay_bn_params {
                0.0
            } else {
                cfg.weight_decay
            };
            let data = param.data_mut();
            for ((w, &g0), vel) in data.iter_mut().zip(grad).zip(v.iter_mut()) {
                let g = g0 + wd * *w;
                *vel = cfg.momentum * *vel + g;
                let update = if cfg.nesterov { g + cfg.momentum * *vel } else { *vel };
                *w -= lr * update;
            }
        }
        Ok(())
    }
}

/// What one training strategy exposes to the epoch loop: a named batch
/// update, end-of-epoch accuracy evaluation, and an optional classifier
/// distance metric.
pub trait TrainStrategy {
    fn name(&self) -> &'static str;

    /// Runs one optimizer step on a batch and returns the loss terms by
    /// name, in a stable order.
    fn batch_step(&mut self, x: &Tensor, labels: &[usize], lr: f64)
        -> Result<Vec<(String, f64)>>;

    /// Top-1 accuracy on both splits with current parameters.
    fn epoch_eval(&self, train: &Dataset, test: &Dataset) -> Result<(f64, f64)>;

    /// Frobenius distance between teacher and student classifiers, when the
    /// strategy defines one.
    fn frobenius_metric(&self) -> Option<f64> {
        None
    }
}

/// One epoch row of the training trace.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub terms: Vec<(String, f64)>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub frob_dist: Option<f64>,
}

/// Drives `strategy` for `cfg.epochs` epochs over `train`, evaluating on
/// both splits at each epoch end.
///
/// Batch order comes from a per-run seeded shuffle stream (dataset order
/// when `shuffle` is off). A trailing batch of a single sample is dropped so
/// batch statistics stay defined. Loss terms are averaged over the epoch
/// weighted by batch size. A non-finite term aborts with epoch and step.
pub fn run_epochs<S: TrainStrategy>(
    strategy: &mut S,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..train.n).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if cfg.shuffle {
            indices.shuffle(&mut shuffle_rng);
        }
        let mut sums: Vec<(String, f64)> = Vec::new();
        let mut seen = 0usize;
        for (step, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = train.gather(chunk);
            let terms = strategy.batch_step(&x, &labels, lr).map_err(|e| match e {
                Error::NonFinite { context } => Error::Divergence {
                    epoch,
                    step,
                    context,
                },
                other => other,
            })?;
            for (i, (name, value)) in terms.iter().enumerate() {
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        context: format!("loss term {name} is not finite"),
                    });
                }
                match sums.get_mut(i) {
                    Some((n, s)) if n == name => *s += value * chunk.len() as f64,
                    _ => {
                        if sums.len() != i {
                            return Err(Error::Config(format!(
                                "strategy {} changed its loss term order",
                                strategy.name()
                            )));
                        }
                        sums.push((name.clone(), value * chunk.len() as f64));
                    }
                }
            }
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::Config(
                "no trainable batches: dataset smaller than two samples".into(),
            ));
        }
        let terms: Vec<(String, f64)> = sums
            .into_iter()
            .map(|(n, s)| (n, s / seen as f64))
            .collect();
        let (train_acc, test_acc) = strategy.epoch_eval(train, test)?;
        if !train_acc.is_finite() || !test_acc.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: 0,
                context: "accuracy evaluation produced a non-finite value".into(),
            });
        }
        records.push(MetricsRecord {
            epoch,
            lr,
            terms,
            train_acc,
            test_acc,
            frob_dist: strategy.frobenius_metric(),
        });
    }
    Ok(records)
}

/// Writes one CSV row per record: epoch, lr, each loss term (union of names
/// in first-seen order), accuracies, and the optional classifier distance.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut term_names: Vec<String> = Vec::new();
    for r in records {
        for (name, _) in &r.terms {
            if !term_names.iter().any(|n| n == name) {
                term_names.push(name.clone());
            }
        }
    }
    let mut out = String::from("epoch,lr");
    for name in &term_names {
        let _ = write!(out, ",{name}");
    }
    out.push_str(",train_acc,test_acc,frob_dist\n");
    for r in records {
        let _ = write!(out, "{},{:.16e}", r.epoch, r.lr);
        for name in &term_names {
            match r.terms.iter().find(|(n, _)| n == name) {
                Some((_, v)) => {
                    let _ = write!(out, ",{v:.16e}");
                }
                None => out.push(','),
            }
        }
        let _ = write!(out, ",{:.16e},{:.16e}", r.train_acc, r.test_acc);
        match r.frob_dist {
            Some(v) => {
                let _ = writeln!(out, ",{v:.16e}");
            }
            None => out.push_str(",\n"),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            message: "empty metrics file".into(),
        });
    };
    let cols: Vec<&str> = header.split(',').collect();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    if cols.len() < 5
        || cols[0] != "epoch"
        || cols[1] != "lr"
        || cols[cols.len() - 3] != "train_acc"
        || cols[cols.len() - 2] != "test_acc"
        || cols[cols.len() - 1] != "frob_dist"
    {
        return Err(parse_err(1, format!("bad metrics header {header:?}")));
    }
    let term_names: Vec<String> = cols[2..cols.len() - 3].iter().map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let epoch: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad epoch {:?}", fields[0])))?;
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| parse_err(lineno, format!("bad float {s:?}")))
        };
        let lr = f(fields[1])?;
        let mut terms = Vec::new();
        for (name, field) in term_names.iter().zip(&fields[2..2 + term_names.len()]) {
            if !field.is_empty() {
                terms.push((name.clone(), f(field)?));
            }
        }
        let train_acc = f(fields[fields.len() - 3])?;
        let test_acc = f(fields[fields.len() - 2])?;
        let frob_field = fields[fields.len() - 1];
        let frob_dist = if frob_field.is_empty() {
            None
        } else {
            Some(f(frob_field)?)
        };
        records.push(MetricsRecord {
            epoch,
            lr,
            terms,
            train_acc,
            test_acc,
            frob_dist,
        });
    }
    Ok(records)
}
