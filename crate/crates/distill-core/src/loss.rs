//! Differentiable scalar losses, built from graph primitives.
//!
//! Every matching loss treats its teacher-side argument as a constant: the
//! teacher tensor is detached inside the loss, so no gradient ever reaches it
//! regardless of how the caller registered it.

use crate::error::{Error, Result};
use crate::tensor::{logsumexp, softmax_rows, Graph, NodeId, Tensor};

/// Loss families selectable in configs. The logits-matching family is
/// restricted to `mse`, `neg_cosine`, and `cross_entropy`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
    KdKl,
    NegCosine,
    FeatureMatch,
    DistancePenalty,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
            LossKind::KdKl => "kd_kl",
            LossKind::NegCosine => "neg_cosine",
            LossKind::FeatureMatch => "feature_match",
            LossKind::DistancePenalty => "distance_penalty",
        }
    }
}

/// Mean over the batch of `-log softmax(logits)[i, labels[i]]`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lp = g.log_softmax(logits)?;
    g.nll_from_log_probs(lp, labels)
}

/// Mean over all elements of the squared difference. Gradient flows to both
/// arguments; detach one side for a fixed target.
pub fn mse(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::dim("mse", g.value(a).shape(), g.value(b).shape()));
    }
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Temperature-softened KL divergence `mean_i KL(softmax(o_t/tau) ||
/// softmax(o_s/tau)) * tau^2`. The tau^2 factor keeps gradient magnitudes
/// comparable across temperatures; the teacher side is constant.
pub fn kd_kl(g: &mut Graph, student_logits: NodeId, teacher_logits: NodeId, tau: f64) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::Parameter {
            name: "tau",
            message: format!("temperature must be positive, got {tau}"),
        });
    }
    let shape = g.value(student_logits).shape().to_vec();
    if shape != g.value(teacher_logits).shape() {
        return Err(Error::dim(
            "kd_kl",
            &shape,
            g.value(teacher_logits).shape(),
        ));
    }
    let n = shape[0] as f64;
    let t = g.detach(teacher_logits);
    let ts = g.scale(t, 1.0 / tau)?;
    let ss = g.scale(student_logits, 1.0 / tau)?;
    let pt = g.softmax(ts)?;
    let lpt = g.log_softmax(ts)?;
    let lps = g.log_softmax(ss)?;
    let diff = g.sub(lpt, lps)?;
    let prod = g.mul(pt, diff)?;
    let total = g.sum(prod)?;
    g.scale(total, tau * tau / n)
}

/// Mean over rows of the negative cosine similarity; teacher side constant.
pub fn neg_cosine(g: &mut Graph, student: NodeId, teacher: NodeId) -> Result<NodeId> {
    let t = g.detach(teacher);
    g.neg_cosine_rows(student, t)
}

/// Soft-target cross-entropy: `mean_i -sum_k softmax(o_t)_k *
/// log_softmax(o_s)_k`, teacher side constant.
pub fn soft_cross_entropy(g: &mut Graph, student: NodeId, teacher: NodeId) -> Result<NodeId> {
    let shape = g.value(student).shape().to_vec();
    if shape != g.value(teacher).shape() {
        return Err(Error::dim(
            "soft_cross_entropy",
            &shape,
            g.value(teacher).shape(),
        ));
    }
    let n = shape[0] as f64;
    let t = g.detach(teacher);
    let pt = g.softmax(t)?;
    let lps = g.log_softmax(student)?;
    let prod = g.mul(pt, lps)?;
    let total = g.sum(prod)?;
    g.scale(total, -1.0 / n)
}

/// Dispatch for the logits-matching family: the loss between the logits a
/// student produces through the teacher's classifier and the teacher's own
/// logits. Teacher logits are constant under every family.
pub fn softmax_regression_loss(
    g: &mut Graph,
    kind: LossKind,
    student_aux_logits: NodeId,
    teacher_logits: NodeId,
) -> Result<NodeId> {
    match kind {
        LossKind::Mse => {
            let t = g.detach(teacher_logits);
            mse(g, student_aux_logits, t)
        }
        LossKind::NegCosine => neg_cosine(g, student_aux_logits, teacher_logits),
        LossKind::CrossEntropy => soft_cross_entropy(g, student_aux_logits, teacher_logits),
        other => Err(Error::Parameter {
            name: "matching_loss",
            message: format!(
                "logits matching supports mse, neg_cosine, cross_entropy; got {}",
                other.name()
            ),
        }),
    }
}

/// MSE between connector-aligned student features and teacher features;
/// teacher features constant.
pub fn feature_match(g: &mut Graph, student_features: NodeId, teacher_features: NodeId) -> Result<NodeId> {
    if g.value(student_features).shape() != g.value(teacher_features).shape() {
        return Err(Error::dim(
            "feature_match",
            g.value(student_features).shape(),
            g.value(teacher_features).shape(),
        ));
    }
    let t = g.detach(teacher_features);
    mse(g, student_features, t)
}

/// Frobenius norm of the difference between two classifier weight matrices.
/// Gradient flows to the student matrix only.
pub fn distance_penalty(g: &mut Graph, w_teacher: NodeId, w_student: NodeId) -> Result<NodeId> {
    if g.value(w_teacher).shape() != g.value(w_student).shape() {
        return Err(Error::Config(format!(
            "penalty variant requires equal classifier shapes: {:?} vs {:?}",
            g.value(w_teacher).shape(),
            g.value(w_student).shape()
        )));
    }
    let t = g.detach(w_teacher);
    g.frobenius_diff(t, w_student)
}

/// Plain-value cross-entropy over precomputed logits, used by evaluation
/// paths that never differentiate. Stable logsumexp form.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || labels.len() != s[0] {
        return Err(Error::dim("cross_entropy_value", s, &[labels.len()]));
    }
    let (n, c) = (s[0], s[1]);
    let d = logits.data();
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Label {
                label: y,
                classes: c,
            });
        }
        let row = &d[i * c..(i + 1) * c];
        acc += logsumexp(row) - row[y];
    }
    Ok(acc / n as f64)
}

/// Plain-value softmax rows for evaluation paths.
pub fn softmax_value(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Rank {
            op: "softmax_value",
            expected: "2-D tensor",
            got: s.to_vec(),
        });
    }
    let mut out = vec![0.0; logits.numel()];
    softmax_rows(logits.data(), s[0], s[1], &mut out);
    Tensor::new(s.to_vec(), out)
}
