//! Encoder, frozen replica encoder, and the known/novel classification heads.
//!
//! The encoder maps `d → hidden → k` with one nonlinearity in between. The
//! known head is a single affine map `k → C^l`; the novel head is an MLP
//! `k → k_mlp → C^u`. Predictions concatenate both heads' logits and apply a
//! temperature softmax over all `C^l + C^u` slots.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{softmax_rows, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and its output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
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

/// Shape and temperature of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Encoder output dimension `k`.
    pub feature_dim: usize,
    /// Hidden width of the novel-head MLP.
    pub novel_hidden_dim: usize,
    pub known_classes: usize,
    pub novel_classes: usize,
    /// Softmax temperature `τ` over the concatenated logits.
    pub temperature: f64,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("feature_dim", self.feature_dim),
            ("novel_hidden_dim", self.novel_hidden_dim),
            ("known_classes", self.known_classes),
            ("novel_classes", self.novel_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.known_classes + self.novel_classes
    }
}

/// Affine map `x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub(crate) weight: Matrix,
    pub(crate) bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Matrix::new(fan_in, fan_out, data).expect("positive dims"),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight).expect("layer shapes checked at forward entry");
        out.add_row_vector(&self.bias);
        out
    }

    /// Returns the parameter gradients and the gradient w.r.t. the input.
    fn backward(&self, input: &Matrix, grad_out: &Matrix) -> (LinearGrads, Matrix) {
        let weight = input.t_matmul(grad_out).expect("cached shapes");
        let bias = grad_out.column_sums();
        let grad_in = grad_out.matmul_t(&self.weight).expect("cached shapes");
        (LinearGrads { weight, bias }, grad_in)
    }

    fn zero_grads(&self) -> LinearGrads {
        LinearGrads {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Two affine layers with a nonlinearity between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoLayer {
    pub(crate) hidden: Linear,
    pub(crate) output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerGrads {
    pub hidden: LinearGrads,
    pub output: LinearGrads,
}

struct TwoLayerCache {
    pre: Matrix,
    act: Matrix,
}

impl TwoLayer {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let hidden = Linear::init(input, hidden, rng);
        let output = Linear::init(hidden.bias.len(), output, rng);
        Self { hidden, output }
    }

    pub fn hidden(&self) -> &Linear {
        &self.hidden
    }

    pub fn output(&self) -> &Linear {
        &self.output
    }

    fn forward(&self, x: &Matrix, activation: Activation) -> (Matrix, TwoLayerCache) {
        let pre = self.hidden.forward(x);
        let act = pre.map(|v| activation.apply(v));
        let out = self.output.forward(&act);
        (out, TwoLayerCache { pre, act })
    }

    fn backward(
        &self,
        input: &Matrix,
        cache: &TwoLayerCache,
        grad_out: &Matrix,
        activation: Activation,
    ) -> (TwoLayerGrads, Matrix) {
        let (output, grad_act) = self.output.backward(&cache.act, grad_out);
        let mut grad_pre = grad_act;
        for ((g, &p), &a) in grad_pre
            .as_mut_slice()
            .iter_mut()
            .zip(cache.pre.as_slice())
            .zip(cache.act.as_slice())
        {
            *g *= activation.derivative(p, a);
        }
        let (hidden, grad_in) = self.hidden.backward(input, &grad_pre);
        (TwoLayerGrads { hidden, output }, grad_in)
    }
}

/// Frozen copy of the encoder taken after supervised pre-training. It has
/// no mutating methods and is never handed to the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaEncoder {
    encoder: TwoLayer,
    activation: Activation,
}

impl ReplicaEncoder {
    pub(crate) fn from_parts(encoder: TwoLayer, activation: Activation) -> Self {
        Self { encoder, activation }
    }

    pub fn encoder(&self) -> &TwoLayer {
        &self.encoder
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Features `E^r(x)`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.encoder.hidden.weight.rows())?;
        Ok(self.encoder.forward(x, self.activation).0)
    }
}

/// Which part of the network a parameter block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    KnownHead,
    NovelHead,
}

/// A trainable parameter block as seen by the optimizer.
pub struct ParamBlock<'a> {
    pub name: &'static str,
    pub group: ParamGroup,
    /// Weight matrices decay; biases do not.
    pub decay: bool,
    pub values: &'a mut [f64],
}

/// Trainable parameters plus an optional frozen replica encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub(crate) config: ModelConfig,
    pub(crate) encoder: TwoLayer,
    pub(crate) known_head: Linear,
    pub(crate) novel_head: TwoLayer,
    pub(crate) replica: Option<ReplicaEncoder>,
}

/// Outputs of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub features: Matrix,
    pub known_logits: Matrix,
    pub novel_logits: Matrix,
    /// `softmax([known, novel] / τ)` per row.
    pub concat_probs: Matrix,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    input: Matrix,
    encoder: TwoLayerCache,
    novel: TwoLayerCache,
    pub features: Matrix,
    pub known_logits: Matrix,
    pub novel_logits: Matrix,
}

/// Gradients mirroring the trainable blocks of [`ModelState`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub encoder: TwoLayerGrads,
    pub known_head: LinearGrads,
    pub novel_head: TwoLayerGrads,
}

impl ModelGrads {
    /// Blocks in the same order as [`ModelState::param_blocks_mut`].
    pub fn blocks(&self) -> [&[f64]; 10] {
        [
            self.encoder.hidden.weight.as_slice(),
            &self.encoder.hidden.bias,
            self.encoder.output.weight.as_slice(),
            &self.encoder.output.bias,
            self.known_head.weight.as_slice(),
            &self.known_head.bias,
            self.novel_head.hidden.weight.as_slice(),
            &self.novel_head.hidden.bias,
            self.novel_head.output.weight.as_slice(),
            &self.novel_head.output.bias,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }
}

fn check_input(x: &Matrix, dim: usize) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::Contract(format!(
            "input has {} columns, model expects {dim}",
            x.cols()
        )));
    }
    x.ensure_finite("model input")
}

impl ModelState {
    /// Fan-in scaled uniform weights, zero biases, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = TwoLayer::init(config.input_dim, config.hidden_dim, config.feature_dim, &mut rng);
        let known_head = Linear::init(config.feature_dim, config.known_classes, &mut rng);
        let novel_head = TwoLayer::init(
            config.feature_dim,
            config.novel_hidden_dim,
            config.novel_classes,
            &mut rng,
        );
        Ok(Self {
            config,
            encoder,
            known_head,
            novel_head,
            replica: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &TwoLayer {
        &self.encoder
    }

    pub fn known_head(&self) -> &Linear {
        &self.known_head
    }

    pub fn novel_head(&self) -> &TwoLayer {
        &self.novel_head
    }

    pub fn replica(&self) -> Option<&ReplicaEncoder> {
        self.replica.as_ref()
    }

    /// Deep copy of the current encoder.
    pub fn snapshot_replica(&self) -> ReplicaEncoder {
        ReplicaEncoder::from_parts(self.encoder.clone(), self.config.activation)
    }

    /// Stores the replica used by the discovery stage.
    pub fn install_replica(&mut self, replica: ReplicaEncoder) -> Result<()> {
        let (a, b) = (&replica.encoder, &self.encoder);
        if a.hidden.weight.shape() != b.hidden.weight.shape() || a.output.weight.shape() != b.output.weight.shape() {
            return Err(Error::Contract("replica shape differs from encoder".into()));
        }
        self.replica = Some(replica);
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        let cache = self.forward_cached(x)?;
        let concat_probs = softmax_rows(&cache.known_logits.hcat(&cache.novel_logits)?, self.config.temperature)?;
        Ok(ForwardOutput {
            features: cache.features,
            known_logits: cache.known_logits,
            novel_logits: cache.novel_logits,
            concat_probs,
        })
    }

    /// Encoder features only.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.config.input_dim)?;
        Ok(self.encoder.forward(x, self.config.activation).0)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        check_input(x, self.config.input_dim)?;
        let act = self.config.activation;
        let (features, encoder) = self.encoder.forward(x, act);
        let known_logits = self.known_head.forward(&features);
        let (novel_logits, novel) = self.novel_head.forward(&features, act);
        Ok(ForwardCache {
            input: x.clone(),
            encoder,
            novel,
            features,
            known_logits,
            novel_logits,
        })
    }

    /// Backpropagates gradients w.r.t. the known and novel logits.
    pub fn backward(&self, cache: &ForwardCache, d_known: &Matrix, d_novel: &Matrix) -> Result<ModelGrads> {
        self.backward_inner(cache, d_known, d_novel, None)
    }

    /// As [`ModelState::backward`], with an extra gradient arriving directly
    /// at the encoder features.
    pub fn backward_with_features(
        &self,
        cache: &ForwardCache,
        d_known: &Matrix,
        d_novel: &Matrix,
        d_features: &Matrix,
    ) -> Result<ModelGrads> {
        self.backward_inner(cache, d_known, d_novel, Some(d_features))
    }

    fn backward_inner(
        &self,
        cache: &ForwardCache,
        d_known: &Matrix,
        d_novel: &Matrix,
        d_extra: Option<&Matrix>,
    ) -> Result<ModelGrads> {
        if d_known.shape() != cache.known_logits.shape() || d_novel.shape() != cache.novel_logits.shape() {
            return Err(Error::Contract("logit gradient shapes differ from forward pass".into()));
        }
        let act = self.config.activation;
        let (known_head, mut d_features) = self.known_head.backward(&cache.features, d_known);
        let (novel_head, d_feat_novel) = self.novel_head.backward(&cache.features, &cache.novel, d_novel, act);
        d_features.add_assign_scaled(&d_feat_novel, 1.0)?;
        if let Some(extra) = d_extra {
            d_features.add_assign_scaled(extra, 1.0)?;
        }
        let (encoder, _) = self.encoder.backward(&cache.input, &cache.encoder, &d_features, act);
        Ok(ModelGrads {
            encoder,
            known_head,
            novel_head,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: TwoLayerGrads {
                hidden: self.encoder.hidden.zero_grads(),
                output: self.encoder.output.zero_grads(),
            },
            known_head: self.known_head.zero_grads(),
            novel_head: TwoLayerGrads {
                hidden: self.novel_head.hidden.zero_grads(),
                output: self.novel_head.output.zero_grads(),
            },
        }
    }

    /// Every trainable block. The replica encoder is not among them.
    pub fn param_blocks_mut(&mut self) -> [ParamBlock<'_>; 10] {
        use ParamGroup::*;
        let block = |name, group, decay, values| ParamBlock {
            name,
            group,
            decay,
            values,
        };
        [
            block("encoder.hidden.weight", Encoder, true, self.encoder.hidden.weight.as_mut_slice()),
            block("encoder.hidden.bias", Encoder, false, &mut self.encoder.hidden.bias[..]),
            block("encoder.output.weight", Encoder, true, self.encoder.output.weight.as_mut_slice()),
            block("encoder.output.bias", Encoder, false, &mut self.encoder.output.bias[..]),
            block("known_head.weight", KnownHead, true, self.known_head.weight.as_mut_slice()),
            block("known_head.bias", KnownHead, false, &mut self.known_head.bias[..]),
            block("novel_head.hidden.weight", NovelHead, true, self.novel_head.hidden.weight.as_mut_slice()),
            block("novel_head.hidden.bias", NovelHead, false, &mut self.novel_head.hidden.bias[..]),
            block("novel_head.output.weight", NovelHead, true, self.novel_head.output.weight.as_mut_slice()),
            block("novel_head.output.bias", NovelHead, false, &mut self.novel_head.output.bias[..]),
        ]
    }

    pub fn trainable_params(&self) -> Vec<f64> {
        let mut copy = self.clone();
        copy.param_blocks_mut().iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    pub fn set_trainable_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.param_blocks_mut().iter().map(|b| b.values.len()).sum();
        if flat.len() != total {
            return Err(Error::Contract(format!(
                "expected {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for block in self.param_blocks_mut() {
            let n = block.values.len();
            block.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.trainable_params().iter().all(|x| x.is_finite())
    }
}
