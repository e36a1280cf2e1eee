//! Network components: feature extractor, linear classifier, and the
//! connector stack that aligns student features to the teacher's width.
//!
//! Forward passes record parameter leaves into a [`Binding`] in a fixed
//! order; each component's `collect_params` yields the same tensors in the
//! same order, which is the contract the optimizer relies on to pair
//! gradients with parameters. Frozen components register their leaves as
//! constants and contribute neither binding entries nor trainable params.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Graph, Mode, NodeId, Tensor};

/// Per-layer activation of the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "relu" => Some(Activation::Relu),
            "none" => Some(Activation::None),
            _ => None,
        }
    }
}

/// Graph node ids of the parameters registered by a forward pass, in the
/// same order as `collect_params`.
#[derive(Default)]
pub struct Binding {
    pub ids: Vec<NodeId>,
}

impl Binding {
    pub fn new() -> Binding {
        Binding::default()
    }
}

fn apply_affine(
    g: &mut Graph,
    w: &Tensor,
    b: &Tensor,
    x: NodeId,
    trainable: bool,
    bind: Option<&mut Binding>,
) -> Result<NodeId> {
    let (wid, bid) = if trainable {
        let wid = g.leaf(w);
        let bid = g.leaf(b);
        if let Some(bind) = bind {
            bind.ids.push(wid);
            bind.ids.push(bid);
        }
        (wid, bid)
    } else {
        (g.leaf_constant(w), g.leaf_constant(b))
    };
    let wt = g.transpose(wid)?;
    let xw = g.matmul(x, wt)?;
    g.add(xw, bid)
}

/// Affine map `x W^T + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    /// Weights uniform in +-sqrt(1/fan_in), biases zero.
    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Affine {
        let bound = (1.0 / in_dim as f64).sqrt();
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Affine {
            w: Tensor::new(vec![out_dim, in_dim], data)
                .expect("init shape consistent")
                .with_requires_grad(),
            b: Tensor::zeros(vec![out_dim]).with_requires_grad(),
        }
    }

    /// Square identity map; used so adapter blocks can start as a no-op.
    fn identity(dim: usize) -> Affine {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Affine {
            w: Tensor::new(vec![dim, dim], data)
                .expect("identity shape consistent")
                .with_requires_grad(),
            b: Tensor::zeros(vec![dim]).with_requires_grad(),
        }
    }

    fn apply(
        &self,
        g: &mut Graph,
        x: NodeId,
        trainable: bool,
        bind: Option<&mut Binding>,
    ) -> Result<NodeId> {
        apply_affine(g, &self.w, &self.b, x, trainable, bind)
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Feature extractor Phi: a stack of affine layers with optional relu.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<(Affine, Activation)>,
    input_dim: usize,
    feature_dim: usize,
    frozen: bool,
}

impl FeatureExtractor {
    /// Builds from a width chain `[d, h1, ..., h]`: `widths[0]` is the input
    /// width, every later entry one affine+relu layer. A single-element
    /// chain is the identity extractor.
    pub fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Result<FeatureExtractor> {
        if widths.is_empty() {
            return Err(Error::Config(
                "feature extractor needs at least the input width".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "feature extractor widths must be >= 1, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|pair| (Affine::init(pair[1], pair[0], rng), Activation::Relu))
            .collect();
        Ok(FeatureExtractor {
            layers,
            input_dim: widths[0],
            feature_dim: *widths.last().expect("nonempty"),
            frozen: false,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        mut bind: Option<&mut Binding>,
    ) -> Result<NodeId> {
        if g.value(x).shape().len() != 2 || g.value(x).shape()[1] != self.input_dim {
            return Err(Error::dim(
                "feature_extractor",
                &[self.input_dim],
                g.value(x).shape(),
            ));
        }
        let trainable = !self.frozen;
        let mut h = x;
        for (affine, act) in &self.layers {
            h = affine.apply(g, h, trainable, bind.as_deref_mut())?;
            if *act == Activation::Relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if self.frozen {
            return;
        }
        for (i, (affine, _)) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &mut affine.w));
            out.push((format!("{prefix}.{i}.b"), &mut affine.b));
        }
    }

    pub fn layers(&self) -> &[(Affine, Activation)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut Vec<(Affine, Activation)> {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn from_parts(
        layers: Vec<(Affine, Activation)>,
        input_dim: usize,
        feature_dim: usize,
        frozen: bool,
    ) -> FeatureExtractor {
        FeatureExtractor {
            layers,
            input_dim,
            feature_dim,
            frozen,
        }
    }
}

/// Linear classifier g mapping features to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub w: Tensor,
    pub b: Tensor,
    frozen: bool,
}

impl Classifier {
    pub fn init(classes: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Result<Classifier> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {classes}"
            )));
        }
        let affine = Affine::init(classes, feature_dim, rng);
        Ok(Classifier {
            w: affine.w,
            b: affine.b,
            frozen: false,
        })
    }

    pub fn forward(&self, g: &mut Graph, z: NodeId, bind: Option<&mut Binding>) -> Result<NodeId> {
        if g.value(z).shape().len() != 2 || g.value(z).shape()[1] != self.in_dim() {
            return Err(Error::dim("classifier", &[self.in_dim()], g.value(z).shape()));
        }
        apply_affine(g, &self.w, &self.b, z, !self.frozen, bind)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if self.frozen {
            return;
        }
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn from_parts(w: Tensor, b: Tensor, frozen: bool) -> Classifier {
        Classifier { w, b, frozen }
    }
}

/// f = g after Phi: the complete network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub phi: FeatureExtractor,
    pub g: Classifier,
}

impl Network {
    /// `widths` chains input width through hidden widths; the classifier maps
    /// the final width to `classes`. Deterministic in `seed`.
    pub fn init(widths: &[usize], classes: usize, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = FeatureExtractor::init(widths, &mut rng)?;
        let g = Classifier::init(classes, phi.feature_dim(), &mut rng)?;
        Ok(Network { phi, g })
    }

    /// Returns `(logits, features)` so distillers reuse one pass.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        mut bind: Option<&mut Binding>,
    ) -> Result<(NodeId, NodeId)> {
        let z = self.phi.forward(g, x, bind.as_deref_mut())?;
        let o = self.g.forward(g, z, bind)?;
        Ok((o, z))
    }

    /// Eval-mode logits for a plain input batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xid = g.leaf_constant(x);
        let z = self.phi.forward(&mut g, xid, None)?;
        let o = self.g.forward(&mut g, z, None)?;
        Ok(g.value(o).clone())
    }

    /// Eval-mode features for a plain input batch.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xid = g.leaf_constant(x);
        let z = self.phi.forward(&mut g, xid, None)?;
        Ok(g.value(z).clone())
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.phi.collect_params("phi", out);
        self.g.collect_params("g", out);
    }

    pub fn freeze(&mut self) {
        self.phi.freeze();
        self.g.freeze();
    }

    pub fn classes(&self) -> usize {
        self.g.classes()
    }
}

/// One connector block: affine, batchnorm, optional relu.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectorBlock {
    pub affine: Affine,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BnStats,
    pub relu: bool,
}

pub const BN_MOMENTUM_DEFAULT: f64 = 0.1;
pub const BN_EPS_DEFAULT: f64 = 1e-5;

/// Trainable stack of 1-3 blocks aligning student features (width `in_dim`)
/// to teacher features (width `out_dim`). Each block is affine+batchnorm;
/// relu is applied on every block except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Connector {
    blocks: Vec<ConnectorBlock>,
    in_dim: usize,
    out_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    frozen: bool,
}

impl Connector {
    /// `hidden` is the width of intermediate blocks; it defaults to the
    /// output width `out_dim`.
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        depth: usize,
        hidden: Option<usize>,
        seed: u64,
    ) -> Result<Connector> {
        if !(1..=3).contains(&depth) {
            return Err(Error::Config(format!(
                "connector depth must be 1, 2, or 3, got {depth}"
            )));
        }
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("connector widths must be >= 1".into()));
        }
        let h = hidden.unwrap_or(out_dim);
        if h == 0 {
            return Err(Error::Config("connector hidden width must be >= 1".into()));
        }
        let mut widths = vec![in_dim];
        widths.extend(std::iter::repeat(h).take(depth - 1));
        widths.push(out_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Square blocks start as the identity so a fresh connector acts as a
        // pure batchnorm map; only rectangular blocks draw random weights.
        let blocks = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| ConnectorBlock {
                affine: if pair[0] == pair[1] {
                    Affine::identity(pair[0])
                } else {
                    Affine::init(pair[1], pair[0], &mut rng)
                },
                gamma: Tensor::new(vec![pair[1]], vec![1.0; pair[1]])
                    .expect("gamma shape")
                    .with_requires_grad(),
                beta: Tensor::zeros(vec![pair[1]]).with_requires_grad(),
                stats: BnStats::fresh(pair[1]),
                relu: i + 1 < depth,
            })
            .collect();
        Ok(Connector {
            blocks,
            in_dim,
            out_dim,
            bn_momentum: BN_MOMENTUM_DEFAULT,
            bn_eps: BN_EPS_DEFAULT,
            frozen: false,
        })
    }

    /// Train-mode pass: batch statistics, running-stat updates, parameters
    /// registered as trainable. Falls back to the eval path when frozen.
    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        z: NodeId,
        mut bind: Option<&mut Binding>,
    ) -> Result<NodeId> {
        if self.frozen {
            return self.forward_eval_inner(g, z);
        }
        self.check_input(g, z)?;
        let momentum = self.bn_momentum;
        let eps = self.bn_eps;
        let mut h = z;
        for block in &mut self.blocks {
            h = block.affine.apply(g, h, true, bind.as_deref_mut())?;
            let gamma = g.leaf(&block.gamma);
            let beta = g.leaf(&block.beta);
            if let Some(b) = bind.as_deref_mut() {
                b.ids.push(gamma);
                b.ids.push(beta);
            }
            h = g.batchnorm1d(h, gamma, beta, &mut block.stats, Mode::Train, momentum, eps)?;
            if block.relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Eval-mode pass: running statistics, all leaves constant.
    pub fn forward_eval(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        self.forward_eval_inner(g, z)
    }

    fn forward_eval_inner(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        self.check_input(g, z)?;
        let mut h = z;
        for block in &self.blocks {
            h = block.affine.apply(g, h, false, None)?;
            let gamma = g.leaf_constant(&block.gamma);
            let beta = g.leaf_constant(&block.beta);
            let mut stats = block.stats.clone();
            h = g.batchnorm1d(
                h,
                gamma,
                beta,
                &mut stats,
                Mode::Eval,
                self.bn_momentum,
                self.bn_eps,
            )?;
            if block.relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    fn check_input(&self, g: &Graph, z: NodeId) -> Result<()> {
        let s = g.value(z).shape();
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::dim("connector", &[self.in_dim], s));
        }
        Ok(())
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if self.frozen {
            return;
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &mut block.affine.w));
            out.push((format!("{prefix}.{i}.b"), &mut block.affine.b));
            out.push((format!("{prefix}.{i}.gamma"), &mut block.gamma));
            out.push((format!("{prefix}.{i}.beta"), &mut block.beta));
        }
    }

    pub fn blocks(&self) -> &[ConnectorBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut Vec<ConnectorBlock> {
        &mut self.blocks
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn from_parts(
        blocks: Vec<ConnectorBlock>,
        in_dim: usize,
        out_dim: usize,
        bn_momentum: f64,
        bn_eps: f64,
        frozen: bool,
    ) -> Connector {
        Connector {
            blocks,
            in_dim,
            out_dim,
            bn_momentum,
            bn_eps,
            frozen,
        }
    }
}

/// Student assembled from a backbone, a connector, and a borrowed (teacher)
/// classifier; the inference path of classifier-reuse strategies.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedNetwork {
    pub phi: FeatureExtractor,
    pub connector: Connector,
    pub classifier: Classifier,
}

impl RoutedNetwork {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xid = g.leaf_constant(x);
        let z = self.phi.forward(&mut g, xid, None)?;
        let a = self.connector.forward_eval(&mut g, z)?;
        let o = self.classifier.forward(&mut g, a, None)?;
        Ok(g.value(o).clone())
    }
}

/// Anything that can score a batch: a self-contained network or a routed
/// student.
#[derive(Clone, Debug)]
pub enum Predictor {
    Own(Network),
    Routed(RoutedNetwork),
}

impl Predictor {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Predictor::Own(net) => net.logits(x),
            Predictor::Routed(r) => r.logits(x),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Predictor::Own(net) => net.classes(),
            Predictor::Routed(r) => r.classifier.classes(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_builds_declared_topology() {
        let net = Network::init(&[2, 8], 3, 1).unwrap();
        assert_eq!(net.phi.layers().len(), 1);
        assert_eq!(net.phi.layers()[0].0.in_dim(), 2);
        assert_eq!(net.phi.layers()[0].0.out_dim(), 8);
        assert_eq!(net.phi.layers()[0].1, Activation::Relu);
        assert_eq!(net.g.in_dim(), 8);
        assert_eq!(net.g.classes(), 3);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = Network::init(&[2, 16, 8], 4, 99).unwrap();
        let b = Network::init(&[2, 16, 8], 4, 99).unwrap();
        assert_eq!(a, b);
        let c = Network::init(&[2, 16, 8], 4, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_empty_widths_and_single_class() {
        assert!(Network::init(&[], 3, 0).is_err());
        assert!(Network::init(&[2, 4], 1, 0).is_err());
    }

    #[test]
    fn init_weight_sample_mean_near_zero() {
        // 10^4 draws from U(-a, a): sample mean within 3 sigma of 0,
        // sigma_mean = a / sqrt(3 * n).
        let fan_in = 50;
        let net = Network::init(&[fan_in, 200], 2, 7).unwrap();
        let w = net.phi.layers()[0].0.w.data();
        let a = (1.0 / fan_in as f64).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sigma_mean = a / (3.0 * w.len() as f64).sqrt();
        assert!(
            mean.abs() < 3.0 * sigma_mean,
            "mean {mean} vs 3 sigma {}",
            3.0 * sigma_mean
        );
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max <= a && min >= -a, "draws stay inside the bound");
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let mut net = Network::init(&[2, 4], 3, 5).unwrap();
        for (affine, _) in net.phi.layers_mut() {
            affine.w.data_mut().fill(0.0);
            affine.b.data_mut().fill(0.0);
        }
        net.g.w.data_mut().fill(0.0);
        net.g.b.data_mut().fill(0.0);
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let o = net.logits(&x).unwrap();
        assert_eq!(o.data(), &[0.0; 6]);
        let p = crate::loss::softmax_value(&o).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_row_equals_single_row_forward() {
        let net = Network::init(&[3, 16, 8], 4, 11).unwrap();
        let rows = vec![
            vec![0.2, -1.0, 0.7],
            vec![1.5, 0.0, -0.3],
            vec![-0.8, 0.25, 2.0],
        ];
        let batch = Tensor::from_rows(&rows).unwrap();
        let batch_logits = net.logits(&batch).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let single = Tensor::from_rows(std::slice::from_ref(row)).unwrap();
            let single_logits = net.logits(&single).unwrap();
            let c = single_logits.numel();
            assert_eq!(
                &batch_logits.data()[i * c..(i + 1) * c],
                single_logits.data(),
                "row {i}"
            );
        }
    }

    #[test]
    fn hand_computed_two_layer_network() {
        // Phi: one 2->2 relu layer, then classifier 2->2.
        let mut net = Network::init(&[2, 2], 2, 0).unwrap();
        let (affine, _) = &mut net.phi.layers_mut()[0];
        affine.w.data_mut().copy_from_slice(&[1.0, -1.0, 0.5, 2.0]);
        affine.b.data_mut().copy_from_slice(&[0.0, 1.0]);
        net.g.w.data_mut().copy_from_slice(&[2.0, 0.0, -1.0, 1.0]);
        net.g.b.data_mut().copy_from_slice(&[0.5, -0.5]);
        // x = [1, 2]: pre = [1*1 + 2*(-1), 1*0.5 + 2*2] + [0, 1] = [-1, 5.5]
        // z = relu = [0, 5.5]; o = [2*0 + 0*5.5 + 0.5, -1*0 + 1*5.5 - 0.5]
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let o = net.logits(&x).unwrap();
        assert_eq!(o.data(), &[0.5, 5.0]);
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let net = Network::init(&[2, 4], 3, 0).unwrap();
        let x = Tensor::zeros(vec![1, 5]);
        assert!(matches!(net.logits(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn param_names_follow_binding_order() {
        let mut net = Network::init(&[2, 4, 6], 3, 0).unwrap();
        let mut params = Vec::new();
        net.collect_params(&mut params);
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            ["phi.0.w", "phi.0.b", "phi.1.w", "phi.1.b", "g.w", "g.b"]
        );
        let mut g = Graph::new();
        let x = g.leaf_constant(&Tensor::zeros(vec![2, 2]));
        let mut bind = Binding::new();
        let net2 = Network::init(&[2, 4, 6], 3, 0).unwrap();
        net2.forward(&mut g, x, Some(&mut bind)).unwrap();
        assert_eq!(bind.ids.len(), 6, "one binding entry per parameter");
    }

    #[test]
    fn connector_depths_reach_declared_output_width() {
        for depth in 1..=3 {
            let conn = Connector::init(8, 64, depth, None, 3).unwrap();
            assert_eq!(conn.depth(), depth);
            let mut g = Graph::new();
            let z = g.leaf_constant(&Tensor::zeros(vec![4, 8]));
            let out = conn.forward_eval(&mut g, z).unwrap();
            assert_eq!(g.value(out).shape(), &[4, 64], "depth {depth}");
        }
        assert!(Connector::init(8, 64, 0, None, 3).is_err());
        assert!(Connector::init(8, 64, 4, None, 3).is_err());
    }

    #[test]
    fn connector_relu_only_on_inner_blocks() {
        let conn = Connector::init(8, 64, 3, Some(16), 3).unwrap();
        let relus: Vec<bool> = conn.blocks().iter().map(|b| b.relu).collect();
        assert_eq!(relus, [true, true, false]);
        assert_eq!(conn.blocks()[0].affine.out_dim(), 16);
        assert_eq!(conn.blocks()[1].affine.out_dim(), 16);
        assert_eq!(conn.blocks()[2].affine.out_dim(), 64);
    }

    #[test]
    fn identity_acting_connector_matches_batchnorm_eval_semantics() {
        let mut conn = Connector::init(3, 3, 1, None, 0).unwrap();
        let eps = conn.bn_eps;
        let block = &mut conn.blocks_mut()[0];
        block.affine.w.data_mut().copy_from_slice(&[
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
        ]);
        block.affine.b.data_mut().fill(0.0);
        // Running stats mean 0 / var (1 - eps) make eval normalization the
        // exact identity; gamma 1, beta 0 leave it untouched.
        for v in &mut block.stats.var {
            *v = 1.0 - eps;
        }
        let x = Tensor::from_rows(&[vec![0.5, -2.0, 1.25], vec![3.0, 0.0, -0.75]]).unwrap();
        let mut g = Graph::new();
        let z = g.leaf_constant(&x);
        let out = conn.forward_eval(&mut g, z).unwrap();
        for (o, i) in g.value(out).data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-12);
        }
    }

    #[test]
    fn connector_train_updates_stats_eval_does_not() {
        let mut conn = Connector::init(4, 6, 1, None, 9).unwrap();
        let before = conn.blocks()[0].stats.clone();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 1.0, 2.0]]).unwrap();
        let mut g = Graph::new();
        let z = g.leaf_constant(&x);
        conn.forward_eval(&mut g, z).unwrap();
        assert_eq!(conn.blocks()[0].stats, before, "eval leaves stats alone");
        let mut g = Graph::new();
        let z = g.leaf_constant(&x);
        conn.forward_train(&mut g, z, None).unwrap();
        assert_ne!(conn.blocks()[0].stats, before, "train updates stats");
    }

    #[test]
    fn connector_gradient_reaches_student_backbone() {
        let student = Network::init(&[2, 6], 3, 21).unwrap();
        let mut conn = Connector::init(6, 10, 2, None, 22).unwrap();
        let mut g = Graph::new();
        let x = g.leaf_constant(
            &Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![1.0, 1.0]]).unwrap(),
        );
        let mut bind = Binding::new();
        let z = student.phi.forward(&mut g, x, Some(&mut bind)).unwrap();
        let aligned = conn.forward_train(&mut g, z, Some(&mut bind)).unwrap();
        let target = g.leaf_constant(&Tensor::zeros(vec![3, 10]));
        let fm = crate::loss::feature_match(&mut g, aligned, target).unwrap();
        g.backward(fm).unwrap();
        let phi_w = bind.ids[0];
        let grad = g.grad(phi_w).expect("feature-matching gradient reaches phi");
        assert!(grad.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn frozen_modules_register_constants() {
        let mut net = Network::init(&[2, 4], 3, 1).unwrap();
        net.freeze();
        let mut g = Graph::new();
        let x = g.leaf_constant(&Tensor::zeros(vec![2, 2]));
        let mut bind = Binding::new();
        let (o, _) = net.forward(&mut g, x, Some(&mut bind)).unwrap();
        assert!(bind.ids.is_empty(), "frozen network contributes no binding");
        let s = g.sum(o).unwrap();
        g.backward(s).unwrap();
        let mut params = Vec::new();
        net.collect_params(&mut params);
        assert!(params.is_empty());
    }

    #[test]
    fn routed_network_composes_eval_paths() {
        let teacher = Network::init(&[2, 10], 3, 1).unwrap();
        let student = Network::init(&[2, 4], 3, 2).unwrap();
        let conn = Connector::init(4, 10, 1, None, 3).unwrap();
        let routed = RoutedNetwork {
            phi: student.phi.clone(),
            connector: conn.clone(),
            classifier: teacher.g.clone(),
        };
        let x = Tensor::from_rows(&[vec![0.3, -0.6], vec![1.2, 0.9]]).unwrap();
        let byhand = {
            let z = student.features(&x).unwrap();
            let mut g = Graph::new();
            let zid = g.leaf_constant(&z);
            let a = conn.forward_eval(&mut g, zid).unwrap();
            let o = teacher.g.forward(&mut g, a, None).unwrap();
            g.value(o).clone()
        };
        let routed_logits = routed.logits(&x).unwrap();
        assert_eq!(routed_logits.data(), byhand.data());
        assert_eq!(Predictor::Routed(routed).classes(), 3);
    }
}
