//! Encoder → bottleneck → classifier network with hand-written reverse mode.
//!
//! The encoder is a stack of dense layers, each followed by a smooth
//! activation and (optionally) inverted dropout. The bottleneck and the
//! classifier are plain affine maps. `backward` returns gradients for every
//! trainable group and for the input batch; the input gradient is what the
//! virtual adversarial perturbation is built from.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, row_softmax, Matrix};

/// Hidden-layer nonlinearity of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Param(format!("unknown activation {other:?}"))),
        }
    }
}

/// Parameter groups that can be frozen independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Encoder,
    Bottleneck,
    Classifier,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Bottleneck, Group::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Bottleneck => "bottleneck",
            Group::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Affine layer `x · weight + bias`, with `weight` stored as (in × out).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = matmul(x, &self.weight)?;
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    fn num_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Weights of the three-part network plus the set of frozen groups.
#[derive(Debug)]
pub struct ModelParams {
    activation: Activation,
    encoder: Vec<Dense>,
    bottleneck: Dense,
    classifier: Dense,
    frozen: BTreeSet<Group>,
    // Changes whenever weights may have changed; ties a ForwardCache to the
    // exact parameters that produced it.
    version: u64,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        Self {
            activation: self.activation,
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            classifier: self.classifier.clone(),
            frozen: self.frozen.clone(),
            version: self.version,
        }
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.activation == other.activation
            && self.encoder == other.encoder
            && self.bottleneck == other.bottleneck
            && self.classifier == other.classifier
            && self.frozen == other.frozen
    }
}

impl ModelParams {
    /// Assembles a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(
        activation: Activation,
        encoder: Vec<Dense>,
        bottleneck: Dense,
        classifier: Dense,
    ) -> Result<Self> {
        if encoder.is_empty() {
            return Err(Error::Param("encoder needs at least one layer".into()));
        }
        let chain = encoder.iter().chain([&bottleneck, &classifier]);
        let mut prev: Option<usize> = None;
        for (i, layer) in chain.enumerate() {
            if layer.fan_in() == 0 || layer.fan_out() == 0 {
                return Err(Error::Param(format!("layer {i} has a zero dimension")));
            }
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} vs fan-out {}",
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
            if let Some(p) = prev {
                if p != layer.fan_in() {
                    return Err(Error::Shape(format!(
                        "layer {i} expects {} inputs but the previous layer emits {p}",
                        layer.fan_in()
                    )));
                }
            }
            prev = Some(layer.fan_out());
        }
        Ok(Self {
            activation,
            encoder,
            bottleneck,
            classifier,
            frozen: BTreeSet::new(),
            version: fresh_version(),
        })
    }

    /// Layer sizes `[input, hidden..., bottleneck, classes]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.encoder[0].fan_in()];
        d.extend(self.encoder.iter().map(Dense::fan_out));
        d.push(self.bottleneck.fan_out());
        d.push(self.classifier.fan_out());
        d
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].fan_in()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.bottleneck.fan_out()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|(_, l)| l.num_params()).sum()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.encoder
    }

    pub fn bottleneck(&self) -> &Dense {
        &self.bottleneck
    }

    pub fn classifier(&self) -> &Dense {
        &self.classifier
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn frozen(&self) -> &BTreeSet<Group> {
        &self.frozen
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    pub fn freeze(&mut self, group: Group) {
        self.frozen.insert(group);
    }

    pub fn unfreeze(&mut self, group: Group) {
        self.frozen.remove(&group);
    }

    /// All layers in forward order, tagged with their group.
    pub fn layers(&self) -> impl Iterator<Item = (Group, &Dense)> {
        self.encoder.iter().map(|l| (Group::Encoder, l)).chain([
            (Group::Bottleneck, &self.bottleneck),
            (Group::Classifier, &self.classifier),
        ])
    }

    /// Mutable access to all layers, frozen ones included. Invalidates
    /// outstanding forward caches.
    pub fn layers_mut(&mut self) -> impl Iterator<Item = (Group, &mut Dense)> {
        self.version = fresh_version();
        self.encoder.iter_mut().map(|l| (Group::Encoder, l)).chain([
            (Group::Bottleneck, &mut self.bottleneck),
            (Group::Classifier, &mut self.classifier),
        ])
    }
}

/// Creates a network for `dims = [input, hidden..., bottleneck, classes]`
/// with Glorot-uniform weights and zero biases.
pub fn init_model(dims: &[usize], activation: Activation, seed: u64) -> Result<ModelParams> {
    if dims.len() < 4 {
        return Err(Error::Param(format!(
            "dims needs [input, hidden.., bottleneck, classes], got {dims:?}"
        )));
    }
    if let Some(d) = dims.iter().find(|&&d| d == 0) {
        return Err(Error::Param(format!(
            "non-positive layer size {d} in {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |fan_in: usize, fan_out: usize| {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-s..s))
            .collect();
        Dense {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized buffer"),
            bias: vec![0.0; fan_out],
        }
    };
    let n = dims.len();
    let encoder = dims[..n - 2]
        .windows(2)
        .map(|w| layer(w[0], w[1]))
        .collect::<Vec<_>>();
    let bottleneck = layer(dims[n - 3], dims[n - 2]);
    let classifier = layer(dims[n - 2], dims[n - 1]);
    ModelParams::from_layers(activation, encoder, bottleneck, classifier)
}

/// Dropout settings for one forward evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub enabled: bool,
    pub seed: u64,
}

impl Dropout {
    pub const OFF: Dropout = Dropout {
        rate: 0.0,
        enabled: false,
        seed: 0,
    };

    pub fn on(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            enabled: true,
            seed,
        }
    }
}

/// Intermediate values recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Matrix,
    /// Pre-activation of each encoder layer.
    encoder_pre: Vec<Matrix>,
    /// Output of each encoder layer after activation and dropout.
    encoder_out: Vec<Matrix>,
    /// Inverted-dropout masks, `None` when dropout was inactive.
    masks: Vec<Option<Matrix>>,
    features: Matrix,
    logits: Matrix,
}

impl ForwardCache {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    /// Bottleneck outputs.
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn masks(&self) -> &[Option<Matrix>] {
        &self.masks
    }
}

/// Runs the network on a batch. Returns the logits and the cache needed by
/// [`backward`].
pub fn forward(
    params: &ModelParams,
    x: &Matrix,
    dropout: Dropout,
) -> Result<(Matrix, ForwardCache)> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    if dropout.enabled && !(0.0..1.0).contains(&dropout.rate) {
        return Err(Error::Param(format!(
            "dropout rate must lie in [0, 1), got {}",
            dropout.rate
        )));
    }
    let use_dropout = dropout.enabled && dropout.rate > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout.seed);
    let keep = 1.0 - dropout.rate;
    let scale = 1.0 / keep;

    let mut encoder_pre = Vec::with_capacity(params.encoder.len());
    let mut encoder_out = Vec::with_capacity(params.encoder.len());
    let mut masks = Vec::with_capacity(params.encoder.len());
    let mut h = x.clone();
    for layer in &params.encoder {
        let pre = layer.apply(&h)?;
        let mut out = pre.map(|v| params.activation.apply(v));
        let mask = if use_dropout {
            let mut m = Matrix::zeros(out.rows(), out.cols());
            for v in m.as_mut_slice() {
                *v = if rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                };
            }
            for (o, k) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *o *= k;
            }
            Some(m)
        } else {
            None
        };
        encoder_pre.push(pre);
        h = out.clone();
        encoder_out.push(out);
        masks.push(mask);
    }
    let features = params.bottleneck.apply(&h)?;
    let logits = params.classifier.apply(&features)?;
    let cache = ForwardCache {
        version: params.version,
        input: x.clone(),
        encoder_pre,
        encoder_out,
        masks,
        features,
        logits: logits.clone(),
    };
    Ok((logits, cache))
}

/// Gradient of a single dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseGrad {
    fn add_assign(&mut self, other: &DenseGrad) -> Result<()> {
        self.weight.add_scaled(&other.weight, 1.0)?;
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

/// Gradients of a scalar loss. Frozen groups carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Option<Vec<DenseGrad>>,
    pub bottleneck: Option<DenseGrad>,
    pub classifier: Option<DenseGrad>,
    pub input: Matrix,
}

impl Gradients {
    /// Accumulates `other` into `self`. Both must come from the same model.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        fn merge(a: &mut Option<DenseGrad>, b: &Option<DenseGrad>) -> Result<()> {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, None) => Ok(()),
                _ => Err(Error::Contract(
                    "gradient groups disagree on freezing".into(),
                )),
            }
        }
        match (self.encoder.as_mut(), &other.encoder) {
            (Some(a), Some(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    x.add_assign(y)?;
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::Contract(
                    "gradient groups disagree on freezing".into(),
                ))
            }
        }
        merge(&mut self.bottleneck, &other.bottleneck)?;
        merge(&mut self.classifier, &other.classifier)?;
        if self.input.shape() == other.input.shape() {
            self.input.add_scaled(&other.input, 1.0)?;
        }
        Ok(())
    }

    /// Gradient for a group in forward layer order, if trainable.
    pub fn group(&self, group: Group) -> Option<Vec<&DenseGrad>> {
        match group {
            Group::Encoder => self.encoder.as_ref().map(|v| v.iter().collect()),
            Group::Bottleneck => self.bottleneck.as_ref().map(|g| vec![g]),
            Group::Classifier => self.classifier.as_ref().map(|g| vec![g]),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.iter().flatten().all(DenseGrad::all_finite)
            && self.bottleneck.iter().all(DenseGrad::all_finite)
            && self.classifier.iter().all(DenseGrad::all_finite)
            && self.input.all_finite()
    }
}

fn dense_grad(input: &Matrix, dout: &Matrix) -> Result<DenseGrad> {
    let weight = matmul_tn(input, dout)?;
    let mut bias = vec![0.0; dout.cols()];
    for row in dout.iter_rows() {
        for (b, v) in bias.iter_mut().zip(row) {
            *b += v;
        }
    }
    Ok(DenseGrad { weight, bias })
}

/// Reverse-mode pass for the computation recorded in `cache`, seeded with
/// the loss gradient w.r.t. the logits.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
    if cache.version != params.version {
        return Err(Error::Contract(
            "forward cache was produced by different parameters".into(),
        ));
    }
    if cache.encoder_pre.len() != params.encoder.len() {
        return Err(Error::Contract(
            "forward cache depth does not match model".into(),
        ));
    }
    if dlogits.shape() != cache.logits.shape() {
        return Err(Error::Shape(format!(
            "dlogits is {}x{}, logits are {}x{}",
            dlogits.rows(),
            dlogits.cols(),
            cache.logits.rows(),
            cache.logits.cols()
        )));
    }

    let classifier = if params.is_frozen(Group::Classifier) {
        None
    } else {
        Some(dense_grad(&cache.features, dlogits)?)
    };
    let dfeat = matmul_nt(dlogits, &params.classifier.weight)?;

    let last_hidden = cache.encoder_out.last().expect("nonempty encoder");
    let bottleneck = if params.is_frozen(Group::Bottleneck) {
        None
    } else {
        Some(dense_grad(last_hidden, &dfeat)?)
    };
    let mut dh = matmul_nt(&dfeat, &params.bottleneck.weight)?;

    let encoder_trainable = !params.is_frozen(Group::Encoder);
    let mut enc_grads = Vec::with_capacity(params.encoder.len());
    for (i, layer) in params.encoder.iter().enumerate().rev() {
        if let Some(mask) = &cache.masks[i] {
            for (d, m) in dh.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *d *= m;
            }
        }
        let pre = &cache.encoder_pre[i];
        for (d, p) in dh.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *d *= params.activation.derivative(*p);
        }
        let layer_input = if i == 0 {
            &cache.input
        } else {
            &cache.encoder_out[i - 1]
        };
        if encoder_trainable {
            enc_grads.push(dense_grad(layer_input, &dh)?);
        }
        dh = matmul_nt(&dh, &layer.weight)?;
    }
    enc_grads.reverse();

    Ok(Gradients {
        encoder: encoder_trainable.then_some(enc_grads),
        bottleneck,
        classifier,
        input: dh,
    })
}

/// Class probabilities with dropout off.
pub fn predict_proba(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    let (logits, _) = forward(params, x, Dropout::OFF)?;
    Ok(row_softmax(&logits))
}

/// Bottleneck features with dropout off.
pub fn bottleneck_features(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    let (_, cache) = forward(params, x, Dropout::OFF)?;
    Ok(cache.features)
}

/// Mean of `passes` softmax outputs with dropout active. Pass `p` draws its
/// masks from `seed + p`.
pub fn mc_dropout_predict(
    params: &ModelParams,
    x: &Matrix,
    passes: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<Matrix> {
    if passes == 0 {
        return Err(Error::Param("MC dropout needs at least one pass".into()));
    }
    let mut sum = Matrix::zeros(x.rows(), params.num_classes());
    for p in 0..passes {
        let (logits, _) = forward(
            params,
            x,
            Dropout::on(dropout_rate, seed.wrapping_add(p as u64)),
        )?;
        sum.add_scaled(&row_softmax(&logits), 1.0)?;
    }
    let mut mean = sum.scale(1.0 / passes as f64);
    // renormalise so rounding in the running sum cannot drift off the simplex
    for i in 0..mean.rows() {
        let row = mean.row_mut(i);
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_model(&[2, 8, 4, 3], Activation::Tanh, 5).unwrap();
        let b = init_model(&[2, 8, 4, 3], Activation::Tanh, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.encoder().len(), 1);
        assert_eq!(a.encoder()[0].weight.shape(), (2, 8));
        assert_eq!(a.bottleneck().weight.shape(), (8, 4));
        assert_eq!(a.classifier().weight.shape(), (4, 3));
        assert_eq!(a.dims(), vec![2, 8, 4, 3]);
        let c = init_model(&[2, 8, 4, 3], Activation::Tanh, 6).unwrap();
        assert_ne!(a, c);
        let s = (6.0f64 / 10.0).sqrt();
        assert!(a.encoder()[0].weight.as_slice().iter().all(|w| w.abs() < s));
        assert!(a.layers().all(|(_, l)| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(
            init_model(&[2, 4, 3], Activation::Tanh, 0),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            init_model(&[2, 0, 4, 3], Activation::Tanh, 0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let m = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        let x = batch(5, 3, 2);
        let (a, _) = forward(&m, &x, Dropout::OFF).unwrap();
        let (b, _) = forward(&m, &x, Dropout::on(0.0, 99)).unwrap();
        assert_eq!(a, b);
        let (c, _) = forward(&m, &x, Dropout::on(0.5, 99)).unwrap();
        let (d, _) = forward(&m, &x, Dropout::on(0.5, 99)).unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);
    }

    #[test]
    fn masks_are_inverted_dropout() {
        let m = init_model(&[3, 16, 4, 3], Activation::Tanh, 1).unwrap();
        let (_, cache) = forward(&m, &batch(8, 3, 2), Dropout::on(0.25, 3)).unwrap();
        let mask = cache.masks()[0].as_ref().unwrap();
        assert!(mask.as_slice().iter().all(|&v| v == 0.0 || v == 1.0 / 0.75));
    }

    #[test]
    fn zero_network_gives_uniform() {
        let mut m = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        for (_, l) in m.layers_mut() {
            l.weight = l.weight.map(|_| 0.0);
        }
        let p = predict_proba(&m, &batch(4, 3, 1)).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        assert!(matches!(
            forward(&m, &batch(2, 4, 0), Dropout::OFF),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let m = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        let (logits, cache) = forward(&m, &batch(5, 3, 2), Dropout::OFF).unwrap();
        let g = backward(&m, &cache, &Matrix::zeros(logits.rows(), logits.cols())).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        for grads in Group::ALL.iter().filter_map(|&gr| g.group(gr)) {
            for d in grads {
                assert_eq!(d.weight.max_abs(), 0.0);
                assert!(d.bias.iter().all(|b| *b == 0.0));
            }
        }
    }

    #[test]
    fn linear_head_weight_grad_is_xt_g() {
        let m = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        let x = batch(5, 3, 2);
        let (logits, cache) = forward(&m, &x, Dropout::OFF).unwrap();
        let g = batch(logits.rows(), logits.cols(), 9);
        let grads = backward(&m, &cache, &g).unwrap();
        let expect = matmul(&cache.features().transpose(), &g).unwrap();
        assert_eq!(grads.classifier.unwrap().weight, expect);
    }

    #[test]
    fn frozen_groups_are_skipped() {
        let mut m = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        m.freeze(Group::Classifier);
        let (logits, cache) = forward(&m, &batch(5, 3, 2), Dropout::OFF).unwrap();
        let g = backward(&m, &cache, &batch(logits.rows(), logits.cols(), 4)).unwrap();
        assert!(g.classifier.is_none());
        assert!(g.bottleneck.is_some() && g.encoder.is_some());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        let (logits, cache) = forward(&m, &batch(5, 3, 2), Dropout::OFF).unwrap();
        for (_, l) in m.layers_mut() {
            l.bias[0] += 1.0;
        }
        let err = backward(&m, &cache, &Matrix::zeros(logits.rows(), logits.cols()));
        assert!(matches!(err, Err(Error::Contract(_))));
        let other = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        let err = backward(&other, &cache, &Matrix::zeros(logits.rows(), logits.cols()));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn mc_dropout_examples() {
        let m = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        let x = batch(7, 3, 2);
        let det = predict_proba(&m, &x).unwrap();
        let mc = mc_dropout_predict(&m, &x, 5, 0.0, 11).unwrap();
        for (a, b) in det.as_slice().iter().zip(mc.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let one = mc_dropout_predict(&m, &x, 1, 0.5, 11).unwrap();
        let (logits, _) = forward(&m, &x, Dropout::on(0.5, 11)).unwrap();
        let single = row_softmax(&logits);
        for (a, b) in one.as_slice().iter().zip(single.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let ten = mc_dropout_predict(&m, &x, 10, 0.5, 11).unwrap();
        for r in ten.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(ten, mc_dropout_predict(&m, &x, 10, 0.5, 11).unwrap());
        assert!(matches!(
            mc_dropout_predict(&m, &x, 0, 0.5, 11),
            Err(Error::Param(_))
        ));
    }
}
