//! Training strategies: the cross-entropy baseline, soft-logit distillation,
//! feature alignment through a trainable connector, and three flavours of
//! teacher-classifier reuse, all driven by the shared epoch runner.

use crate::checkpoint::SavedModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{self, LossKind};
use crate::nn::{
    Binding, Classifier, Connector, FeatureExtractor, Network, Predictor, RoutedNetwork,
};
use crate::tensor::{frobenius_diff_kernel, Graph, NodeId, Tensor};
use crate::trainer::{
    derive_seed, run_epochs, MetricsRecord, SgdState, TrainConfig, TrainStrategy,
};

/// Which recipe drives the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CeOnly,
    Kd,
    Srrl,
    Simkd,
    IjckdReuse,
    IjckdJoint,
    IjckdPenalty,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::CeOnly => "ce_only",
            Strategy::Kd => "kd",
            Strategy::Srrl => "srrl",
            Strategy::Simkd => "simkd",
            Strategy::IjckdReuse => "ijckd_reuse",
            Strategy::IjckdJoint => "ijckd_joint",
            Strategy::IjckdPenalty => "ijckd_penalty",
        }
    }

    /// Every strategy except the plain baseline consults a teacher.
    pub fn uses_teacher(self) -> bool {
        self != Strategy::CeOnly
    }

    /// Strategies that map student features into the teacher's width.
    pub fn uses_connector(self) -> bool {
        matches!(
            self,
            Strategy::Srrl | Strategy::Simkd | Strategy::IjckdReuse | Strategy::IjckdJoint
        )
    }

    /// Strategies whose student keeps its own classifier head; the rest
    /// classify through a reused (or jointly fitted) teacher head.
    pub fn own_classifier(self) -> bool {
        matches!(
            self,
            Strategy::CeOnly | Strategy::Kd | Strategy::Srrl | Strategy::IjckdPenalty
        )
    }
}

/// Hyperparameters of one distillation run. Unset weights resolve to
/// per-strategy defaults, see [`DistillConfig::resolved`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub strategy: Strategy,
    /// Loss applied wherever student logits are matched to teacher logits.
    pub matching_loss: LossKind,
    /// Soft-target weight of vanilla logit distillation.
    pub lambda: Option<f64>,
    /// Softmax temperature of vanilla logit distillation.
    pub tau: Option<f64>,
    /// Logit-matching weight; under ijckd_joint the mix between the
    /// student-stream and teacher-stream cross-entropies.
    pub alpha: Option<f64>,
    /// Feature-matching weight; under ijckd_joint the logit-bridge weight,
    /// under ijckd_penalty the classifier-distance weight.
    pub beta: Option<f64>,
    /// Hard-label weight of ijckd_reuse; 0 trains on teacher signal alone.
    pub alpha_ce: Option<f64>,
    /// Connector depth in blocks (1-3).
    pub connector_depth: usize,
}

impl Default for DistillConfig {
    fn default() -> DistillConfig {
        DistillConfig {
            strategy: Strategy::CeOnly,
            matching_loss: LossKind::Mse,
            lambda: None,
            tau: None,
            alpha: None,
            beta: None,
            alpha_ce: None,
            connector_depth: 1,
        }
    }
}

/// Concrete weights after per-strategy defaults are filled in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedWeights {
    pub lambda: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_ce: f64,
}

impl DistillConfig {
    pub fn with_strategy(strategy: Strategy) -> DistillConfig {
        DistillConfig {
            strategy,
            ..DistillConfig::default()
        }
    }

    /// Fills unset weights with the strategy's defaults: srrl and the
    /// penalty variant weight both auxiliary terms at 1, reuse matches
    /// logits at 1 with the feature term off, and the joint variant mixes
    /// streams at 0.2 with the bridge at 1.
    pub fn resolved(&self) -> ResolvedWeights {
        let (alpha_default, beta_default) = match self.strategy {
            Strategy::IjckdJoint => (0.2, 1.0),
            Strategy::Srrl | Strategy::IjckdPenalty => (1.0, 1.0),
            _ => (1.0, 0.0),
        };
        ResolvedWeights {
            lambda: self.lambda.unwrap_or(1.0),
            tau: self.tau.unwrap_or(4.0),
            alpha: self.alpha.unwrap_or(alpha_default),
            beta: self.beta.unwrap_or(beta_default),
            alpha_ce: self.alpha_ce.unwrap_or(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha_ce", self.alpha_ce),
        ];
        for (name, value) in named {
            if let Some(v) = value {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Parameter {
                        name,
                        message: format!("must be finite and nonnegative, got {v}"),
                    });
                }
            }
        }
        let w = self.resolved();
        if w.tau <= 0.0 {
            return Err(Error::Parameter {
                name: "tau",
                message: format!("temperature must be positive, got {}", w.tau),
            });
        }
        if self.strategy == Strategy::IjckdJoint && w.alpha > 1.0 {
            return Err(Error::Parameter {
                name: "alpha",
                message: format!("joint stream mix must lie in [0, 1], got {}", w.alpha),
            });
        }
        if !(1..=3).contains(&self.connector_depth) {
            return Err(Error::Config(format!(
                "connector_depth must be 1, 2, or 3, got {}",
                self.connector_depth
            )));
        }
        let uses_matching = matches!(
            self.strategy,
            Strategy::Srrl | Strategy::IjckdReuse | Strategy::IjckdPenalty
        );
        if uses_matching
            && !matches!(
                self.matching_loss,
                LossKind::Mse | LossKind::NegCosine | LossKind::CrossEntropy
            )
        {
            return Err(Error::Parameter {
                name: "matching_loss",
                message: format!(
                    "logits matching supports mse, neg_cosine, cross_entropy; got {}",
                    self.matching_loss.name()
                ),
            });
        }
        if self.strategy == Strategy::IjckdReuse
            && w.alpha_ce == 0.0
            && w.alpha == 0.0
            && w.beta == 0.0
        {
            return Err(Error::Config(
                "ijckd_reuse with alpha_ce, alpha, and beta all zero has no loss left".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a finished run hands back: the trained model, the per-epoch
/// trace, and echoes of both configs.
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub model: SavedModel,
    pub metrics: Vec<MetricsRecord>,
    pub config: DistillConfig,
    pub train_config: TrainConfig,
}

impl DistillOutcome {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.metrics.last().map(|r| r.test_acc)
    }

    pub fn final_train_acc(&self) -> Option<f64> {
        self.metrics.last().map(|r| r.train_acc)
    }
}

/// Top-1 accuracy of a logits batch; argmax ties break toward the lowest
/// class index.
pub fn accuracy_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("accuracy", s, &[labels.len()]));
    }
    let (n, c) = (s[0], s[1]);
    if n == 0 {
        return Err(Error::BatchSize {
            op: "accuracy",
            got: 0,
            min: 1,
        });
    }
    let d = logits.data();
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &d[i * c..(i + 1) * c];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Scores a model over a whole dataset split.
pub fn evaluate(model: &Predictor, ds: &Dataset) -> Result<f64> {
    if model.classes() != ds.classes {
        return Err(Error::Config(format!(
            "model classifies {} classes but the dataset has {}",
            model.classes(),
            ds.classes
        )));
    }
    let logits = model.logits(&ds.features_tensor())?;
    accuracy_logits(&logits, &ds.labels)
}

fn logits_own(phi: &FeatureExtractor, cls: &Classifier, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xid = g.leaf_constant(x);
    let z = phi.forward(&mut g, xid, None)?;
    let o = cls.forward(&mut g, z, None)?;
    Ok(g.value(o).clone())
}

fn logits_routed(
    phi: &FeatureExtractor,
    conn: &Connector,
    cls: &Classifier,
    x: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xid = g.leaf_constant(x);
    let z = phi.forward(&mut g, xid, None)?;
    let aligned = conn.forward_eval(&mut g, z)?;
    let o = cls.forward(&mut g, aligned, None)?;
    Ok(g.value(o).clone())
}

/// Classifier output built from already-registered weight nodes; the same
/// op sequence as the module forward, so shared heads register leaves once.
fn affine_nodes(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let wt = g.transpose(w)?;
    let xw = g.matmul(x, wt)?;
    g.add(xw, b)
}

/// Adds `weight * term` into the running total, skipping the scale node at
/// weight 1 so single-term graphs stay structurally minimal.
fn add_weighted(
    g: &mut Graph,
    total: Option<NodeId>,
    term: NodeId,
    weight: f64,
) -> Result<Option<NodeId>> {
    let t = if weight == 1.0 {
        term
    } else {
        g.scale(term, weight)?
    };
    Ok(Some(match total {
        None => t,
        Some(acc) => g.add(acc, t)?,
    }))
}

/// One in-flight run: the student's trainable parts, a frozen teacher copy,
/// and the optimizer. Implements the epoch runner's strategy interface.
struct DistillRun {
    strategy: Strategy,
    w: ResolvedWeights,
    matching: LossKind,
    cfg: TrainConfig,
    phi: FeatureExtractor,
    cls: Option<Classifier>,
    connector: Option<Connector>,
    joint_cls: Option<Classifier>,
    teacher: Option<Network>,
    sgd: SgdState,
}

impl DistillRun {
    /// Whether the connector takes part in the loss; with its weights at
    /// zero, srrl never touches it and reduces structurally to the
    /// baseline graph.
    fn connector_active(&self) -> bool {
        match self.strategy {
            Strategy::Srrl => self.w.alpha > 0.0 || self.w.beta > 0.0,
            Strategy::Simkd | Strategy::IjckdReuse | Strategy::IjckdJoint => true,
            _ => false,
        }
    }

    /// Trainable parameters in registration order: backbone, own head,
    /// connector, joint head. Must mirror the binding order of
    /// `build_loss` exactly; the optimizer pairs gradients by position.
    fn trainable_parts(
        &mut self,
    ) -> (Vec<(String, &mut Tensor)>, &mut SgdState, &TrainConfig) {
        let conn_active = self.connector_active();
        let DistillRun {
            phi,
            cls,
            connector,
            joint_cls,
            sgd,
            cfg,
            ..
        } = self;
        let mut out = Vec::new();
        phi.collect_params("phi", &mut out);
        if let Some(c) = cls.as_mut() {
            c.collect_params("g", &mut out);
        }
        if conn_active {
            if let Some(c) = connector.as_mut() {
                c.collect_params("conn", &mut out);
            }
        }
        if let Some(j) = joint_cls.as_mut() {
            j.collect_params("ghat", &mut out);
        }
        (out, sgd, cfg)
    }

    /// Builds the strategy's loss graph over one batch. Returns the named
    /// unweighted terms and the weighted total; terms with zero weight are
    /// never constructed, so degenerate configs reproduce smaller graphs
    /// bit-for-bit.
    fn build_loss(
        &mut self,
        g: &mut Graph,
        bind: &mut Binding,
        xid: NodeId,
        labels: &[usize],
    ) -> Result<(Vec<(&'static str, NodeId)>, NodeId)> {
        let w = self.w;
        let mut terms: Vec<(&'static str, NodeId)> = Vec::new();
        let mut total: Option<NodeId> = None;
        match self.strategy {
            Strategy::CeOnly | Strategy::Kd => {
                let cls = self.cls.as_ref().expect("baseline keeps its own head");
                let z = self.phi.forward(g, xid, Some(bind))?;
                let o_s = cls.forward(g, z, Some(bind))?;
                let ce = loss::cross_entropy(g, o_s, labels)?;
                terms.push(("ce", ce));
                total = add_weighted(g, total, ce, 1.0)?;
                if self.strategy == Strategy::Kd && w.lambda > 0.0 {
                    let teacher = self.teacher.as_ref().expect("kd needs a teacher");
                    let (o_t, _) = teacher.forward(g, xid, None)?;
                    let kd = loss::kd_kl(g, o_s, o_t, w.tau)?;
                    terms.push(("kd", kd));
                    total = add_weighted(g, total, kd, w.lambda)?;
                }
            }
            Strategy::Srrl => {
                let cls = self.cls.as_ref().expect("srrl keeps its own head");
                let z_s = self.phi.forward(g, xid, Some(bind))?;
                let o_s = cls.forward(g, z_s, Some(bind))?;
                let ce = loss::cross_entropy(g, o_s, labels)?;
                terms.push(("ce", ce));
                total = add_weighted(g, total, ce, 1.0)?;
                if w.alpha > 0.0 || w.beta > 0.0 {
                    let conn = self.connector.as_mut().expect("srrl aligns features");
                    let aligned = conn.forward_train(g, z_s, Some(bind))?;
                    let teacher = self.teacher.as_ref().expect("srrl needs a teacher");
                    let (o_t, z_t) = teacher.forward(g, xid, None)?;
                    if w.alpha > 0.0 {
                        let aux = teacher.g.forward(g, aligned, None)?;
                        let lm = loss::softmax_regression_loss(g, self.matching, aux, o_t)?;
                        terms.push(("lm", lm));
                        total = add_weighted(g, total, lm, w.alpha)?;
                    }
                    if w.beta > 0.0 {
                        let fm = loss::feature_match(g, aligned, z_t)?;
                        terms.push(("fm", fm));
                        total = add_weighted(g, total, fm, w.beta)?;
                    }
                }
            }
            Strategy::Simkd => {
                // Labels are deliberately unread: alignment is the whole loss.
                let conn = self.connector.as_mut().expect("simkd aligns features");
                let z_s = self.phi.forward(g, xid, Some(bind))?;
                let aligned = conn.forward_train(g, z_s, Some(bind))?;
                let teacher = self.teacher.as_ref().expect("simkd needs a teacher");
                let z_t = teacher.phi.forward(g, xid, None)?;
                let fm = loss::feature_match(g, aligned, z_t)?;
                terms.push(("fm", fm));
                total = add_weighted(g, total, fm, 1.0)?;
            }
            Strategy::IjckdReuse => {
                let conn = self.connector.as_mut().expect("reuse aligns features");
                let z_s = self.phi.forward(g, xid, Some(bind))?;
                let aligned = conn.forward_train(g, z_s, Some(bind))?;
                let teacher = self.teacher.as_ref().expect("reuse needs a teacher");
                // Gradients reach the student through the frozen head.
                let o_s = teacher.g.forward(g, aligned, None)?;
                if w.alpha_ce > 0.0 {
                    let ce = loss::cross_entropy(g, o_s, labels)?;
                    terms.push(("ce", ce));
                    total = add_weighted(g, total, ce, w.alpha_ce)?;
                }
                if w.alpha > 0.0 || w.beta > 0.0 {
                    let (o_t, z_t) = teacher.forward(g, xid, None)?;
                    if w.alpha > 0.0 {
                        let lm = loss::softmax_regression_loss(g, self.matching, o_s, o_t)?;
                        terms.push(("lm", lm));
                        total = add_weighted(g, total, lm, w.alpha)?;
                    }
                    if w.beta > 0.0 {
                        let fm = loss::feature_match(g, aligned, z_t)?;
                        terms.push(("fm", fm));
                        total = add_weighted(g, total, fm, w.beta)?;
                    }
                }
            }
            Strategy::IjckdJoint => {
                let conn = self.connector.as_mut().expect("joint aligns features");
                let z_s = self.phi.forward(g, xid, Some(bind))?;
                let aligned = conn.forward_train(g, z_s, Some(bind))?;
                let jc = self.joint_cls.as_ref().expect("joint fits a shared head");
                // The shared head registers once; both streams reuse the
                // same leaves so its gradient sums across streams.
                let (w_id, b_id) = if jc.frozen() {
                    (g.leaf_constant(&jc.w), g.leaf_constant(&jc.b))
                } else {
                    let w_id = g.leaf(&jc.w);
                    let b_id = g.leaf(&jc.b);
                    bind.ids.push(w_id);
                    bind.ids.push(b_id);
                    (w_id, b_id)
                };
                let o_s = affine_nodes(g, aligned, w_id, b_id)?;
                let teacher_mix = 1.0 - w.alpha;
                let o_t = if teacher_mix > 0.0 || w.beta > 0.0 {
                    let teacher = self.teacher.as_ref().expect("joint needs a teacher");
                    let z_t = teacher.phi.forward(g, xid, None)?;
                    Some(affine_nodes(g, z_t, w_id, b_id)?)
                } else {
                    None
                };
                if w.alpha > 0.0 {
                    let ce = loss::cross_entropy(g, o_s, labels)?;
                    terms.push(("ce", ce));
                    total = add_weighted(g, total, ce, w.alpha)?;
                }
                if teacher_mix > 0.0 {
                    let ce_t = loss::cross_entropy(g, o_t.expect("teacher stream"), labels)?;
                    terms.push(("ce_t", ce_t));
                    total = add_weighted(g, total, ce_t, teacher_mix)?;
                }
                if w.beta > 0.0 {
                    // Both sides live: the bridge pulls the streams together
                    // through the shared head.
                    let lm = loss::mse(g, o_s, o_t.expect("teacher stream"))?;
                    terms.push(("lm", lm));
                    total = add_weighted(g, total, lm, w.beta)?;
                }
            }
            Strategy::IjckdPenalty => {
                let cls = self.cls.as_ref().expect("penalty keeps its own head");
                let z_s = self.phi.forward(g, xid, Some(bind))?;
                let o_s = cls.forward(g, z_s, Some(bind))?;
                let ce = loss::cross_entropy(g, o_s, labels)?;
                terms.push(("ce", ce));
                total = add_weighted(g, total, ce, 1.0)?;
                let teacher = self.teacher.as_ref().expect("penalty needs a teacher");
                if w.alpha > 0.0 {
                    let (o_t, _) = teacher.forward(g, xid, None)?;
                    let lm = loss::softmax_regression_loss(g, self.matching, o_s, o_t)?;
                    terms.push(("lm", lm));
                    total = add_weighted(g, total, lm, w.alpha)?;
                }
                if w.beta > 0.0 {
                    // The head registers (w, b) last, so its weight leaf sits
                    // two from the end of the binding.
                    let w_s = bind.ids[bind.ids.len() - 2];
                    let w_t = g.leaf_constant(&teacher.g.w);
                    let pen = loss::distance_penalty(g, w_t, w_s)?;
                    terms.push(("penalty", pen));
                    total = add_weighted(g, total, pen, w.beta)?;
                }
            }
        }
        let total = total.ok_or_else(|| {
            Error::Config(format!(
                "strategy {} has no loss term with positive weight",
                self.strategy.name()
            ))
        })?;
        Ok((terms, total))
    }

    fn infer_logits(&self, x: &Tensor) -> Result<Tensor> {
        if self.strategy.own_classifier() {
            let cls = self.cls.as_ref().expect("own head");
            return logits_own(&self.phi, cls, x);
        }
        let conn = self.connector.as_ref().expect("routed head");
        let cls = match self.strategy {
            Strategy::IjckdJoint => self.joint_cls.as_ref().expect("joint head"),
            _ => &self.teacher.as_ref().expect("reused head").g,
        };
        logits_routed(&self.phi, conn, cls, x)
    }

    fn accuracy_on(&self, ds: &Dataset) -> Result<f64> {
        let logits = self.infer_logits(&ds.features_tensor())?;
        accuracy_logits(&logits, &ds.labels)
    }
}

impl TrainStrategy for DistillRun {
    fn name(&self) -> &'static str {
        self.strategy.name()
    }

    fn batch_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        lr: f64,
    ) -> Result<Vec<(String, f64)>> {
        let mut g = Graph::new();
        let mut bind = Binding::new();
        let xid = g.leaf_constant(x);
        let (terms, total) = self.build_loss(&mut g, &mut bind, xid, labels)?;
        g.backward(total)?;
        let mut grads = Vec::with_capacity(bind.ids.len());
        for &id in &bind.ids {
            let grad = g.grad(id).ok_or_else(|| {
                Error::Config("a registered parameter received no gradient".into())
            })?;
            grads.push(grad.to_vec());
        }
        let mut out = Vec::with_capacity(terms.len() + 1);
        for (name, id) in &terms {
            out.push((name.to_string(), g.value(*id).item()?));
        }
        out.push(("total".to_string(), g.value(total).item()?));
        let (mut params, sgd, cfg) = self.trainable_parts();
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "binding registered {} parameters but {} are trainable",
                grads.len(),
                params.len()
            )));
        }
        sgd.step(&mut params, &grads, lr, cfg)?;
        Ok(out)
    }

    fn epoch_eval(&self, train: &Dataset, test: &Dataset) -> Result<(f64, f64)> {
        Ok((self.accuracy_on(train)?, self.accuracy_on(test)?))
    }

    /// Distance between the teacher head and whichever head the strategy
    /// trains, when their shapes line up.
    fn frobenius_metric(&self) -> Option<f64> {
        let teacher = self.teacher.as_ref()?;
        let current = match self.strategy {
            Strategy::IjckdJoint => &self.joint_cls.as_ref()?.w,
            _ => &self.cls.as_ref()?.w,
        };
        if teacher.g.w.shape() != current.shape() {
            return None;
        }
        Some(frobenius_diff_kernel(teacher.g.w.data(), current.data()))
    }
}

/// Wires up a run: student init from the raw seed, connector init from its
/// own derived stream, teacher copied and frozen.
fn build_run(
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    teacher: Option<&Network>,
    student_widths: &[usize],
    input_dim: usize,
    classes: usize,
) -> Result<DistillRun> {
    dcfg.validate()?;
    tcfg.validate()?;
    let strategy = dcfg.strategy;
    if student_widths.first() != Some(&input_dim) {
        return Err(Error::Config(format!(
            "student widths {:?} must start at the input width {}",
            student_widths, input_dim
        )));
    }
    let teacher = match (strategy.uses_teacher(), teacher) {
        (false, None) => None,
        (false, Some(_)) => {
            return Err(Error::Config(
                "ce_only trains without a teacher; drop the teacher input".into(),
            ));
        }
        (true, None) => {
            return Err(Error::Config(format!(
                "strategy {} requires a teacher",
                strategy.name()
            )));
        }
        (true, Some(t)) => {
            if t.phi.input_dim() != input_dim {
                return Err(Error::Config(format!(
                    "teacher expects {}-dimensional inputs but the task has {}",
                    t.phi.input_dim(),
                    input_dim
                )));
            }
            if t.classes() != classes {
                return Err(Error::Config(format!(
                    "teacher classifies {} classes but the task has {}",
                    t.classes(),
                    classes
                )));
            }
            let mut copy = t.clone();
            copy.freeze();
            Some(copy)
        }
    };
    // The classifier draw happens even when a reused head replaces it, so
    // backbones match across strategies at a fixed seed.
    let student = Network::init(student_widths, classes, tcfg.seed)?;
    let (phi, cls) = if strategy.own_classifier() {
        (student.phi, Some(student.g))
    } else {
        (student.phi, None)
    };
    if strategy == Strategy::IjckdPenalty {
        let t = teacher.as_ref().expect("checked above");
        if t.phi.feature_dim() != phi.feature_dim() {
            return Err(Error::Config(format!(
                "penalty variant needs matching feature widths, got student {} vs teacher {}",
                phi.feature_dim(),
                t.phi.feature_dim()
            )));
        }
    }
    let connector = if strategy.uses_connector() {
        let t = teacher.as_ref().expect("checked above");
        Some(Connector::init(
            phi.feature_dim(),
            t.phi.feature_dim(),
            dcfg.connector_depth,
            None,
            derive_seed(tcfg.seed, 1),
        )?)
    } else {
        None
    };
    let joint_cls = if strategy == Strategy::IjckdJoint {
        // Warm start: the shared head begins at the teacher's solution.
        let tg = &teacher.as_ref().expect("checked above").g;
        Some(Classifier::from_parts(tg.w.clone(), tg.b.clone(), false))
    } else {
        None
    };
    Ok(DistillRun {
        strategy,
        w: dcfg.resolved(),
        matching: dcfg.matching_loss,
        cfg: tcfg.clone(),
        phi,
        cls,
        connector,
        joint_cls,
        teacher,
        sgd: SgdState::new(),
    })
}

/// Trains a student on `train` under `dcfg.strategy`, evaluating both
/// splits every epoch. The teacher is copied and frozen; the caller's
/// network is never touched.
pub fn run_distillation(
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    teacher: Option<&Network>,
    student_widths: &[usize],
    train: &Dataset,
    test: &Dataset,
) -> Result<DistillOutcome> {
    if train.d != test.d || train.classes != test.classes {
        return Err(Error::Config(format!(
            "splits disagree: train is {}-d/{} classes, test is {}-d/{} classes",
            train.d, train.classes, test.d, test.classes
        )));
    }
    let mut run = build_run(dcfg, tcfg, teacher, student_widths, train.d, train.classes)?;
    let metrics = run_epochs(&mut run, train, test, tcfg)?;
    let model = match run.strategy {
        Strategy::CeOnly | Strategy::Kd | Strategy::Srrl | Strategy::IjckdPenalty => {
            SavedModel::Network(Network {
                phi: run.phi,
                g: run.cls.expect("own head"),
            })
        }
        Strategy::Simkd | Strategy::IjckdReuse => SavedModel::Routed(RoutedNetwork {
            phi: run.phi,
            connector: run.connector.expect("routed head"),
            classifier: run.teacher.expect("reused head").g,
        }),
        Strategy::IjckdJoint => SavedModel::Routed(RoutedNetwork {
            phi: run.phi,
            connector: run.connector.expect("routed head"),
            classifier: run.joint_cls.expect("joint head"),
        }),
    };
    Ok(DistillOutcome {
        model,
        metrics,
        config: dcfg.clone(),
        train_config: tcfg.clone(),
    })
}
