//! The encoder stack: a strided convolutional front-end that shortens the
//! input four-fold in time, then `n_layers` post-norm transformer layers
//! (optionally one shared set of weights reused at every depth), with the
//! same position information handed to every layer and concatenated to the
//! final output.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, glorot, multi_head, AttentionConfig, AttentionWeights, PositionInputs, Variant};
use crate::error::{Error, Result};
use crate::position::{self, OffsetRange, PositionConfig, PositionKind, LIGHT_DIM};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Time stride of each front-end convolution.
pub const TIME_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub attention: AttentionConfig,
    pub d_ff: usize,
    pub dropout: f64,
    /// Apply dropout to the position rows as well as the content in training.
    pub position_dropout: bool,
    pub share_layers: bool,
    /// `max_len == 0` means "derive from the data" and must be resolved
    /// with [`EncoderConfig::resolve_max_len`] before use.
    pub position: PositionConfig,
    /// `false` zeroes every position input (the order-blind control model).
    pub use_position: bool,
    /// Output channels of the two front-end convolutions.
    pub conv_channels: [usize; 2],
    pub conv_kernel: usize,
    pub freq_stride: usize,
    /// Feature rows per input frame.
    pub input_dim: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            attention: AttentionConfig::default(),
            d_ff: 2048,
            dropout: 0.1,
            position_dropout: true,
            share_layers: true,
            position: PositionConfig::new(30),
            use_position: true,
            conv_channels: [32, 64],
            conv_kernel: 5,
            freq_stride: 2,
            input_dim: 40,
            layer_norm_eps: 1e-5,
        }
    }
}

/// Length after the front-end: `ceil(ceil(len / 2) / 2)`.
pub fn downsampled_len(len: usize) -> usize {
    len.div_ceil(TIME_STRIDE).div_ceil(TIME_STRIDE)
}

impl EncoderConfig {
    pub fn d_model(&self) -> usize {
        self.attention.d_model()
    }

    /// Width of the encoder output: content plus the 6 light position rows.
    pub fn output_dim(&self) -> usize {
        self.d_model() + LIGHT_DIM
    }

    pub fn reduced_freq(&self) -> usize {
        self.input_dim.div_ceil(self.freq_stride).div_ceil(self.freq_stride)
    }

    /// Fills in `T` from the longest raw input length when it was left at 0.
    pub fn resolve_max_len(&mut self, longest_input: usize) {
        if self.position.max_len == 0 {
            self.position.max_len = downsampled_len(longest_input).max(self.position.m1 + 1);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::param("encoder needs at least one layer"));
        }
        if self.d_ff < 1 {
            return Err(Error::param("feed-forward width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.conv_channels.contains(&0) || self.conv_kernel == 0 || self.freq_stride == 0 || self.input_dim == 0 {
            return Err(Error::param("front-end sizes must be positive"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::param("layer norm epsilon must be positive"));
        }
        self.attention.validate()?;
        self.position.validate()
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        EncoderConfig { attention: self.attention.with_variant(variant), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub attention: AttentionWeights<T>,
    pub ln1_gamma: T,
    pub ln1_beta: T,
    /// `W₁`: `d_ff × d_model`.
    pub ff1: T,
    pub ff1_bias: T,
    /// `W₂`: `d_model × d_ff`.
    pub ff2: T,
    pub ff2_bias: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    /// `C₁ × 1 × k × k`.
    pub conv1: T,
    pub conv1_bias: T,
    /// `C₂ × C₁ × k × k`.
    pub conv2: T,
    pub conv2_bias: T,
    /// `d_model × (C₂ · reduced_freq)`.
    pub proj: T,
    pub proj_bias: T,
    /// One entry when layers are shared, otherwise one per layer.
    pub layers: Vec<LayerWeights<T>>,
}

impl<T> LayerWeights<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl FnMut(&str, &T) -> U) -> LayerWeights<U> {
        LayerWeights {
            attention: self.attention.map(&format!("{path}.attn"), f),
            ln1_gamma: f(&format!("{path}.ln1.gamma"), &self.ln1_gamma),
            ln1_beta: f(&format!("{path}.ln1.beta"), &self.ln1_beta),
            ff1: f(&format!("{path}.ff1.weight"), &self.ff1),
            ff1_bias: f(&format!("{path}.ff1.bias"), &self.ff1_bias),
            ff2: f(&format!("{path}.ff2.weight"), &self.ff2),
            ff2_bias: f(&format!("{path}.ff2.bias"), &self.ff2_bias),
            ln2_gamma: f(&format!("{path}.ln2.gamma"), &self.ln2_gamma),
            ln2_beta: f(&format!("{path}.ln2.beta"), &self.ln2_beta),
        }
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.attention.for_each_mut(&format!("{path}.attn"), f);
        f(&format!("{path}.ln1.gamma"), &mut self.ln1_gamma);
        f(&format!("{path}.ln1.beta"), &mut self.ln1_beta);
        f(&format!("{path}.ff1.weight"), &mut self.ff1);
        f(&format!("{path}.ff1.bias"), &mut self.ff1_bias);
        f(&format!("{path}.ff2.weight"), &mut self.ff2);
        f(&format!("{path}.ff2.bias"), &mut self.ff2_bias);
        f(&format!("{path}.ln2.gamma"), &mut self.ln2_gamma);
        f(&format!("{path}.ln2.beta"), &mut self.ln2_beta);
    }
}

impl<T> EncoderWeights<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl FnMut(&str, &T) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            conv1: f(&format!("{path}.conv1.weight"), &self.conv1),
            conv1_bias: f(&format!("{path}.conv1.bias"), &self.conv1_bias),
            conv2: f(&format!("{path}.conv2.weight"), &self.conv2),
            conv2_bias: f(&format!("{path}.conv2.bias"), &self.conv2_bias),
            proj: f(&format!("{path}.proj.weight"), &self.proj),
            proj_bias: f(&format!("{path}.proj.bias"), &self.proj_bias),
            layers: self.layers.iter().enumerate().map(|(l, w)| w.map(&format!("{path}.layer{l}"), f)).collect(),
        }
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{path}.conv1.weight"), &mut self.conv1);
        f(&format!("{path}.conv1.bias"), &mut self.conv1_bias);
        f(&format!("{path}.conv2.weight"), &mut self.conv2);
        f(&format!("{path}.conv2.bias"), &mut self.conv2_bias);
        f(&format!("{path}.proj.weight"), &mut self.proj);
        f(&format!("{path}.proj.bias"), &mut self.proj_bias);
        for (l, w) in self.layers.iter_mut().enumerate() {
            w.for_each_mut(&format!("{path}.layer{l}"), f);
        }
    }

    /// Weights used at depth `depth`, honoring layer sharing.
    pub fn layer(&self, depth: usize) -> &LayerWeights<T> {
        &self.layers[depth.min(self.layers.len() - 1)]
    }
}

impl EncoderWeights<Tensor> {
    /// Records every weight as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> EncoderWeights<Var> {
        self.map("", &mut |_, t| tape.param(t))
    }

    /// Records every weight as a constant (no gradient bookkeeping).
    pub fn bind_frozen(&self, tape: &mut Tape) -> EncoderWeights<Var> {
        self.map("", &mut |_, t| tape.constant(t.clone()))
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.map("", &mut |_, t| n += t.len());
        n
    }
}

fn conv_glorot<R: Rng + ?Sized>(rng: &mut R, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let limit = (6.0 / ((c_in + c_out) * k * k) as f64).sqrt();
    Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.random_range(-limit..limit))
}

fn layer_init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> LayerWeights<Tensor> {
    let d = cfg.d_model();
    LayerWeights {
        attention: AttentionWeights::init(&cfg.attention, rng),
        ln1_gamma: Tensor::full(&[d], 1.0),
        ln1_beta: Tensor::zeros(&[d]),
        ff1: glorot(rng, cfg.d_ff, d),
        ff1_bias: Tensor::zeros(&[cfg.d_ff]),
        ff2: glorot(rng, d, cfg.d_ff),
        ff2_bias: Tensor::zeros(&[d]),
        ln2_gamma: Tensor::full(&[d], 1.0),
        ln2_beta: Tensor::zeros(&[d]),
    }
}

pub fn init_with_rng<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> EncoderWeights<Tensor> {
    let [c1, c2] = cfg.conv_channels;
    let k = cfg.conv_kernel;
    let n_stacks = if cfg.share_layers { 1 } else { cfg.n_layers };
    EncoderWeights {
        conv1: conv_glorot(rng, c1, 1, k),
        conv1_bias: Tensor::zeros(&[c1]),
        conv2: conv_glorot(rng, c2, c1, k),
        conv2_bias: Tensor::zeros(&[c2]),
        proj: glorot(rng, cfg.d_model(), c2 * cfg.reduced_freq()),
        proj_bias: Tensor::zeros(&[cfg.d_model()]),
        layers: (0..n_stacks).map(|_| layer_init(cfg, rng)).collect(),
    }
}

/// Glorot-uniform weights, zero biases, unit layer-norm gains; reproducible per seed.
pub fn init_weights(cfg: &EncoderConfig, seed: u64) -> EncoderWeights<Tensor> {
    init_with_rng(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Trainable scalars in one transformer layer.
pub fn layer_parameters(cfg: &EncoderConfig) -> usize {
    let d = cfg.d_model();
    attention::count_parameters(&cfg.attention) + 2 * cfg.d_ff * d + cfg.d_ff + d + 4 * d
}

/// Scalars in the layer stack, counting a shared layer once.
pub fn layer_stack_parameters(cfg: &EncoderConfig) -> usize {
    let stacks = if cfg.share_layers { 1 } else { cfg.n_layers };
    stacks * layer_parameters(cfg)
}

/// Scalars in the convolutional front-end and its projection.
pub fn frontend_parameters(cfg: &EncoderConfig) -> usize {
    let [c1, c2] = cfg.conv_channels;
    let k2 = cfg.conv_kernel * cfg.conv_kernel;
    c1 * k2 + c1 + c2 * c1 * k2 + c2 + cfg.d_model() * c2 * cfg.reduced_freq() + cfg.d_model()
}

pub fn count_encoder_parameters(cfg: &EncoderConfig) -> usize {
    frontend_parameters(cfg) + layer_stack_parameters(cfg)
}

/// Dropout context for one forward pass.
pub struct ForwardMode<'a> {
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> ForwardMode<'a> {
    pub fn eval() -> Self {
        ForwardMode { rng: None }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        ForwardMode { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, rate, true, rng),
            None => Ok(x),
        }
    }
}

/// Two strided 5×5 convolutions with ReLU, then a linear map to `d_model`.
/// Output is `d_model × ceil(L/4)`.
pub fn conv_frontend(tape: &mut Tape, features: Var, w: &EncoderWeights<Var>, cfg: &EncoderConfig) -> Result<Var> {
    let (rows, len) = tape.value(features).dims2()?;
    if rows != cfg.input_dim {
        return Err(Error::dim(format!("features have {rows} rows, encoder expects {}", cfg.input_dim)));
    }
    let stride = (cfg.freq_stride, TIME_STRIDE);
    let img = tape.reshape(features, &[1, rows, len])?;
    let h1 = tape.conv2d(img, w.conv1, stride)?;
    let h1 = tape.add_channel_bias(h1, w.conv1_bias)?;
    let h1 = tape.relu(h1);
    let h2 = tape.conv2d(h1, w.conv2, stride)?;
    let h2 = tape.add_channel_bias(h2, w.conv2_bias)?;
    let h2 = tape.relu(h2);
    let [c, f, t] = tape.shape(h2)[..] else { unreachable!("conv output is 3-D") };
    let flat = tape.reshape(h2, &[c * f, t])?;
    let x = tape.matmul(w.proj, flat)?;
    tape.add_col_bias(x, w.proj_bias)
}

/// Position inputs shared by every layer of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SequencePositions {
    pub inputs: PositionInputs,
    /// `6 × L` light matrix appended to the final output.
    pub light: Var,
}

/// Builds position inputs for a sequence of `len` (down-sampled) steps.
pub fn sequence_positions(tape: &mut Tape, len: usize, cfg: &EncoderConfig, mode: &mut ForwardMode) -> Result<SequencePositions> {
    let on = cfg.use_position;
    let zero_if_off = |t: Tensor| if on { t } else { Tensor::zeros(t.shape()) };
    let drop_rate = if cfg.position_dropout { cfg.dropout } else { 0.0 };

    let light = zero_if_off(position::light_position(len, &cfg.position)?.values);
    let light = tape.constant(light);
    let light = mode.dropout(tape, light, drop_rate)?;

    let absolute = match cfg.attention.variant {
        Variant::Absolute => {
            let p = position::sinusoidal_position(len, cfg.d_model(), cfg.position.max_len)?.values;
            let p = tape.constant(zero_if_off(p));
            Some(mode.dropout(tape, p, drop_rate)?)
        }
        Variant::ConcatAbs => Some(light),
        _ => None,
    };
    let offsets = OffsetRange::for_sequence(len, cfg.attention.window);
    let relative = match cfg.attention.variant {
        Variant::Light => Some(position::relative_table(PositionKind::Light, LIGHT_DIM, offsets, &cfg.position)),
        Variant::RelativeDai => {
            Some(position::relative_table(PositionKind::Sinusoidal, cfg.d_model(), offsets, &cfg.position))
        }
        _ => None,
    }
    .map(|t| (tape.constant(zero_if_off(t)), offsets));
    Ok(SequencePositions { inputs: PositionInputs { absolute, relative }, light })
}

/// `z = LN(y + Drop(FFN(y)))` with `y = LN(x + Drop(MultiHead(x, p)))`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    pos: &PositionInputs,
    w: &LayerWeights<Var>,
    cfg: &EncoderConfig,
    mode: &mut ForwardMode,
) -> Result<Var> {
    let len = tape.shape(x)[1];
    if let Some(p) = pos.absolute {
        if tape.shape(p)[1] != len {
            return Err(Error::dim(format!("positions cover {} steps, content {len}", tape.shape(p)[1])));
        }
    }
    let attn = multi_head(tape, x, pos, &w.attention, &cfg.attention)?;
    let attn = mode.dropout(tape, attn, cfg.dropout)?;
    let y = tape.add(x, attn)?;
    let y = tape.layer_norm(y, w.ln1_gamma, w.ln1_beta, cfg.layer_norm_eps)?;

    let h = tape.matmul(w.ff1, y)?;
    let h = tape.add_col_bias(h, w.ff1_bias)?;
    let h = tape.relu(h);
    let f = tape.matmul(w.ff2, h)?;
    let f = tape.add_col_bias(f, w.ff2_bias)?;
    let f = mode.dropout(tape, f, cfg.dropout)?;
    let z = tape.add(y, f)?;
    tape.layer_norm(z, w.ln2_gamma, w.ln2_beta, cfg.layer_norm_eps)
}

/// Runs the `n_layers` transformer layers over content `x[d_model × L]`.
pub fn layer_stack(
    tape: &mut Tape,
    x: Var,
    pos: &PositionInputs,
    w: &EncoderWeights<Var>,
    cfg: &EncoderConfig,
    mode: &mut ForwardMode,
) -> Result<Var> {
    let mut h = x;
    for depth in 0..cfg.n_layers {
        h = encoder_layer(tape, h, pos, w.layer(depth), cfg, mode)?;
    }
    Ok(h)
}

/// Full encoder: front-end, layer stack, and the light position rows
/// concatenated underneath. Output is `(d_model + 6) × ceil(L/4)`.
pub fn encode(tape: &mut Tape, features: Var, cfg: &EncoderConfig, w: &EncoderWeights<Var>, mode: &mut ForwardMode) -> Result<Var> {
    let x = conv_frontend(tape, features, w, cfg)?;
    let x = mode.dropout(tape, x, cfg.dropout)?;
    let len = tape.shape(x)[1];
    let pos = sequence_positions(tape, len, cfg, mode)?;
    let h = layer_stack(tape, x, &pos.inputs, w, cfg, mode)?;
    tape.concat_rows(&[h, pos.light])
}

/// A configured encoder with its weights, for inference outside a training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub weights: EncoderWeights<Tensor>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = init_weights(&config, seed);
        Ok(Encoder { config, weights })
    }

    /// Eval-mode encoding of one `input_dim × L` feature matrix.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.weights.bind_frozen(&mut tape);
        let f = tape.constant(features.clone());
        let out = encode(&mut tape, f, &self.config, &w, &mut ForwardMode::eval())?;
        Ok(tape.value(out).clone())
    }
}
