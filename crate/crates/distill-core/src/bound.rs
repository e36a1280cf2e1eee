//! Empirical verification of the error decomposition eps_student <=
//! eps_teacher + delta1 + delta2: per-sample triangle-inequality audits,
//! the two disagreement terms, and the shared-classifier fitting probe.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss;
use crate::nn::{Binding, Classifier, Connector, FeatureExtractor, Network, Predictor};
use crate::tensor::{frobenius_diff_kernel, softmax_rows, Graph, Tensor};
use crate::trainer::{derive_seed, SgdState, TrainConfig};

/// Float slack for the per-sample and aggregate inequality checks.
pub const BOUND_SLACK: f64 = 1e-9;

/// Space in which all four points of the decomposition are compared. The
/// `*_prob` kinds embed outputs through a row softmax; `l1_logit` compares
/// raw logits. Labels embed as unit one-hot vectors in every kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L1Prob,
    L2Prob,
    L1Logit,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::L1Prob => "l1_prob",
            NormKind::L2Prob => "l2_prob",
            NormKind::L1Logit => "l1_logit",
        }
    }

    pub fn parse(s: &str) -> Option<NormKind> {
        match s {
            "l1_prob" => Some(NormKind::L1Prob),
            "l2_prob" => Some(NormKind::L2Prob),
            "l1_logit" => Some(NormKind::L1Logit),
            _ => None,
        }
    }

    pub const ALL: [NormKind; 3] = [NormKind::L1Prob, NormKind::L2Prob, NormKind::L1Logit];
}

/// Everything one bound audit reports; serializes with these field names.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundReport {
    pub eps_teacher: f64,
    pub eps_student: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub rhs: f64,
    pub holds_aggregate: bool,
    pub per_sample_violations: usize,
    pub norm_kind: NormKind,
    pub used_connector_for_delta2: bool,
}

/// A jointly fitted classifier with the risks it achieves on each frozen
/// feature stream; `joint_risk` is their exact sum.
#[derive(Clone, Debug)]
pub struct JointFitResult {
    pub classifier: Classifier,
    pub joint_risk: f64,
    pub teacher_stream_risk: f64,
    pub student_stream_risk: f64,
}

fn embed(logits: &Tensor, kind: NormKind) -> Vec<f64> {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    match kind {
        NormKind::L1Prob | NormKind::L2Prob => {
            let mut out = vec![0.0; n * c];
            softmax_rows(logits.data(), n, c, &mut out);
            out
        }
        NormKind::L1Logit => logits.data().to_vec(),
    }
}

fn pair_norm(a: &[f64], b: &[f64], kind: NormKind) -> f64 {
    match kind {
        NormKind::L1Prob | NormKind::L1Logit => {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
        }
        NormKind::L2Prob => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Norm of a row against the one-hot embedding of `label`.
fn onehot_norm(row: &[f64], label: usize, kind: NormKind) -> f64 {
    match kind {
        NormKind::L1Prob | NormKind::L1Logit => row
            .iter()
            .enumerate()
            .map(|(j, &v)| (v - if j == label { 1.0 } else { 0.0 }).abs())
            .sum(),
        NormKind::L2Prob => row
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let d = v - if j == label { 1.0 } else { 0.0 };
                d * d
            })
            .sum::<f64>()
            .sqrt(),
    }
}

/// Eval-mode classifier outputs for a plain feature batch.
fn classifier_logits(cls: &Classifier, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let zid = g.leaf_constant(z);
    let o = cls.forward(&mut g, zid, None)?;
    Ok(g.value(o).clone())
}

/// Maps student features into a classifier's input width: through the
/// connector when one is supplied, directly when widths already agree.
/// Returns the routed features and whether the connector was used.
fn route_features(
    z_s: &Tensor,
    target_width: usize,
    connector: Option<&Connector>,
) -> Result<(Tensor, bool)> {
    let width = z_s.shape()[1];
    match connector {
        Some(conn) => {
            if conn.in_dim() != width || conn.out_dim() != target_width {
                return Err(Error::Config(format!(
                    "connector maps {} -> {} but the audit needs {} -> {}",
                    conn.in_dim(),
                    conn.out_dim(),
                    width,
                    target_width
                )));
            }
            let mut g = Graph::new();
            let zid = g.leaf_constant(z_s);
            let out = conn.forward_eval(&mut g, zid)?;
            Ok((g.value(out).clone(), true))
        }
        None if width == target_width => Ok((z_s.clone(), false)),
        None => Err(Error::Config(format!(
            "feature widths differ ({width} vs {target_width}); supply a connector"
        ))),
    }
}

fn check_task(classes: usize, data: &Dataset, what: &str) -> Result<()> {
    if classes != data.classes {
        return Err(Error::Config(format!(
            "{what} classifies {classes} classes but the dataset has {}",
            data.classes
        )));
    }
    Ok(())
}

/// Mean distance between a model's embedded outputs and the one-hot labels.
pub fn empirical_risk(model: &Predictor, data: &Dataset, kind: NormKind) -> Result<f64> {
    check_task(model.classes(), data, "model")?;
    let logits = model.logits(&data.features_tensor())?;
    let e = embed(&logits, kind);
    let c = data.classes;
    let mut sum = 0.0;
    for (i, &label) in data.labels.iter().enumerate() {
        sum += onehot_norm(&e[i * c..(i + 1) * c], label, kind);
    }
    Ok(sum / data.n as f64)
}

/// Mean distance between two classifiers' embedded outputs on the same
/// student features. `g_t` sees the features through `connector` when the
/// widths disagree.
pub fn delta1(
    g_s: &Classifier,
    g_t: &Classifier,
    phi_s: &FeatureExtractor,
    data: &Dataset,
    kind: NormKind,
    connector: Option<&Connector>,
) -> Result<f64> {
    if g_s.classes() != g_t.classes() {
        return Err(Error::Config(format!(
            "classifier outputs disagree: {} vs {} classes",
            g_s.classes(),
            g_t.classes()
        )));
    }
    check_task(g_s.classes(), data, "classifier")?;
    let x = data.features_tensor();
    let mut g = Graph::new();
    let xid = g.leaf_constant(&x);
    let z = phi_s.forward(&mut g, xid, None)?;
    let z_s = g.value(z).clone();
    let o_s = g_s.forward(&mut g, z, None)?;
    let a = embed(g.value(o_s), kind);
    let (routed, _) = route_features(&z_s, g_t.in_dim(), connector)?;
    let b = embed(&classifier_logits(g_t, &routed)?, kind);
    let c = data.classes;
    let mut sum = 0.0;
    for i in 0..data.n {
        sum += pair_norm(&a[i * c..(i + 1) * c], &b[i * c..(i + 1) * c], kind);
    }
    Ok(sum / data.n as f64)
}

/// Mean distance between the teacher classifier's embedded outputs on
/// (routed) student features versus the teacher's own features.
pub fn delta2(
    g_t: &Classifier,
    phi_s: &FeatureExtractor,
    phi_t: &FeatureExtractor,
    data: &Dataset,
    kind: NormKind,
    connector: Option<&Connector>,
) -> Result<f64> {
    check_task(g_t.classes(), data, "classifier")?;
    let x = data.features_tensor();
    let mut g = Graph::new();
    let xid = g.leaf_constant(&x);
    let zs = phi_s.forward(&mut g, xid, None)?;
    let z_s = g.value(zs).clone();
    let zt = phi_t.forward(&mut g, xid, None)?;
    let o_t = g_t.forward(&mut g, zt, None)?;
    let d = embed(g.value(o_t), kind);
    let (routed, _) = route_features(&z_s, g_t.in_dim(), connector)?;
    let b = embed(&classifier_logits(g_t, &routed)?, kind);
    let c = data.classes;
    let mut sum = 0.0;
    for i in 0..data.n {
        sum += pair_norm(&b[i * c..(i + 1) * c], &d[i * c..(i + 1) * c], kind);
    }
    Ok(sum / data.n as f64)
}

/// Audits the full decomposition in one pass over `data`.
///
/// Per sample it checks the chain `|a-y| <= |a-b| + |b-d| + |d-y|` with
/// a = student logits, b = teacher classifier on (routed) student features,
/// d = teacher logits, all embedded under `kind`; the aggregate inequality
/// follows by averaging, so `holds_aggregate` can only fail by more than
/// float slack if the arithmetic is wrong.
pub fn verify_bound(
    teacher: &Network,
    student: &Network,
    data: &Dataset,
    kind: NormKind,
    connector: Option<&Connector>,
) -> Result<BoundReport> {
    check_task(teacher.classes(), data, "teacher")?;
    check_task(student.classes(), data, "student")?;
    let x = data.features_tensor();
    let a_logits = student.logits(&x)?;
    let z_s = student.features(&x)?;
    let (routed, used_connector) =
        route_features(&z_s, teacher.g.in_dim(), connector)?;
    let b_logits = classifier_logits(&teacher.g, &routed)?;
    let d_logits = teacher.logits(&x)?;
    let a = embed(&a_logits, kind);
    let b = embed(&b_logits, kind);
    let d = embed(&d_logits, kind);
    let c = data.classes;
    let n = data.n;
    let (mut s_ay, mut s_ab, mut s_bd, mut s_dy) = (0.0, 0.0, 0.0, 0.0);
    let mut violations = 0usize;
    for (i, &label) in data.labels.iter().enumerate() {
        let (ra, rb, rd) = (
            &a[i * c..(i + 1) * c],
            &b[i * c..(i + 1) * c],
            &d[i * c..(i + 1) * c],
        );
        let ay = onehot_norm(ra, label, kind);
        let ab = pair_norm(ra, rb, kind);
        let bd = pair_norm(rb, rd, kind);
        let dy = onehot_norm(rd, label, kind);
        if ay > ab + bd + dy + BOUND_SLACK {
            violations += 1;
        }
        s_ay += ay;
        s_ab += ab;
        s_bd += bd;
        s_dy += dy;
    }
    let nf = n as f64;
    let (eps_student, delta1, delta2, eps_teacher) =
        (s_ay / nf, s_ab / nf, s_bd / nf, s_dy / nf);
    let rhs = eps_teacher + delta1 + delta2;
    Ok(BoundReport {
        eps_teacher,
        eps_student,
        delta1,
        delta2,
        rhs,
        holds_aggregate: eps_student <= rhs + BOUND_SLACK,
        per_sample_violations: violations,
        norm_kind: kind,
        used_connector_for_delta2: used_connector,
    })
}

/// Both frozen feature streams over a dataset, ready for classifier fits
/// and objective comparisons.
#[derive(Clone, Debug)]
pub struct JointStreams {
    pub z_t: Tensor,
    pub z_s: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Runs both backbones over `data` and routes the student stream into the
/// teacher's width.
pub fn joint_streams(
    phi_t: &FeatureExtractor,
    phi_s: &FeatureExtractor,
    data: &Dataset,
    connector: Option<&Connector>,
) -> Result<JointStreams> {
    let x = data.features_tensor();
    let mut g = Graph::new();
    let xid = g.leaf_constant(&x);
    let zt = phi_t.forward(&mut g, xid, None)?;
    let z_t = g.value(zt).clone();
    let zs = phi_s.forward(&mut g, xid, None)?;
    let z_s_raw = g.value(zs).clone();
    let (z_s, _) = route_features(&z_s_raw, phi_t.feature_dim(), connector)?;
    Ok(JointStreams {
        z_t,
        z_s,
        labels: data.labels.clone(),
        classes: data.classes,
    })
}

/// Mean cross-entropy of a classifier on each stream, as
/// `(teacher_stream, student_stream)`; the summed objective both fitting
/// and the comparisons below use.
pub fn joint_objective(cls: &Classifier, streams: &JointStreams) -> Result<(f64, f64)> {
    check_streams(cls, streams)?;
    let t = loss::cross_entropy_value(&classifier_logits(cls, &streams.z_t)?, &streams.labels)?;
    let s = loss::cross_entropy_value(&classifier_logits(cls, &streams.z_s)?, &streams.labels)?;
    Ok((t, s))
}

fn check_streams(cls: &Classifier, streams: &JointStreams) -> Result<()> {
    if cls.classes() != streams.classes {
        return Err(Error::Config(format!(
            "classifier outputs {} classes but the streams carry {}",
            cls.classes(),
            streams.classes
        )));
    }
    if cls.in_dim() != streams.z_t.shape()[1] || cls.in_dim() != streams.z_s.shape()[1] {
        return Err(Error::Config(format!(
            "classifier takes width {} but the streams are {} and {}",
            cls.in_dim(),
            streams.z_t.shape()[1],
            streams.z_s.shape()[1]
        )));
    }
    Ok(())
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let d = t.data();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&d[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![idx.len(), c], out).expect("gather shape consistent")
}

/// Fits one fresh linear classifier to minimize the summed cross-entropy
/// over both frozen streams, by minibatch SGD under `cfg`. The iterate
/// with the lowest full-data objective (the untrained start included) is
/// returned, so the result can only improve on its own random init.
pub fn fit_joint_classifier(
    phi_t: &FeatureExtractor,
    phi_s: &FeatureExtractor,
    data: &Dataset,
    cfg: &TrainConfig,
    connector: Option<&Connector>,
) -> Result<JointFitResult> {
    cfg.validate()?;
    let streams = joint_streams(phi_t, phi_s, data, connector)?;
    let width = streams.z_t.shape()[1];
    // The head draws from its own seed stream; shuffling reuses the
    // trainer's batch-order stream.
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut cls = Classifier::init(streams.classes, width, &mut init_rng)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut sgd = SgdState::new();
    let n = data.n;
    let mut indices: Vec<usize> = (0..n).collect();
    let snapshot = |cls: &Classifier| -> Result<(f64, f64)> { joint_objective(cls, &streams) };
    let (mut best_t, mut best_s) = snapshot(&cls)?;
    let mut best = (cls.w.clone(), cls.b.clone());
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if cfg.shuffle {
            indices.shuffle(&mut shuffle_rng);
        }
        for (step, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let zt = gather_rows(&streams.z_t, chunk);
            let zs = gather_rows(&streams.z_s, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| streams.labels[i]).collect();
            let mut g = Graph::new();
            let mut bind = Binding::new();
            let zt_id = g.leaf_constant(&zt);
            let zs_id = g.leaf_constant(&zs);
            let o_t = cls.forward(&mut g, zt_id, Some(&mut bind))?;
            // The student stream reuses the same weight leaves.
            let wt = g.transpose(bind.ids[0])?;
            let xw = g.matmul(zs_id, wt)?;
            let o_s = g.add(xw, bind.ids[1])?;
            let ce_t = loss::cross_entropy(&mut g, o_t, &labels)?;
            let ce_s = loss::cross_entropy(&mut g, o_s, &labels)?;
            let total = g.add(ce_t, ce_s)?;
            if !g.value(total).item()?.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    context: "joint classifier objective went non-finite".into(),
                });
            }
            g.backward(total)?;
            let grads: Vec<Vec<f64>> = bind
                .ids
                .iter()
                .map(|&id| g.grad(id).expect("head is trainable").to_vec())
                .collect();
            let mut params = vec![
                ("ghat.w".to_string(), &mut cls.w),
                ("ghat.b".to_string(), &mut cls.b),
            ];
            sgd.step(&mut params, &grads, lr, cfg).map_err(|e| match e {
                Error::NonFinite { context } => Error::Divergence {
                    epoch,
                    step,
                    context,
                },
                other => other,
            })?;
        }
        let (t, s) = snapshot(&cls)?;
        if !(t + s).is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: 0,
                context: "joint classifier objective went non-finite".into(),
            });
        }
        if t + s < best_t + best_s {
            best_t = t;
            best_s = s;
            best = (cls.w.clone(), cls.b.clone());
        }
    }
    Ok(JointFitResult {
        classifier: Classifier::from_parts(best.0, best.1, false),
        joint_risk: best_t + best_s,
        teacher_stream_risk: best_t,
        student_stream_risk: best_s,
    })
}

/// Frobenius norm of the difference of two equally shaped tensors. Agrees
/// bit-exactly with the differentiable graph op on the same inputs.
pub fn frobenius_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "frobenius distance needs equal shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(frobenius_diff_kernel(a.data(), b.data()))
}
