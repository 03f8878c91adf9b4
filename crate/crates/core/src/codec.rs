//! Learnable networks: encoder, decoder, and the mask precursor with its
//! convolutional LSTM memory.
//!
//! Encoder and decoder form a U-Net with its skip connections removed:
//! each encoder level is `residual_blocks_per_level` residual blocks followed
//! by a stride-2 convolution; the decoder mirrors it with nearest-neighbour
//! upsampling. The decoder sees nothing but the token.
//!
//! The trunk is bias-free with a leaky ReLU, so `decode(encode(a·r)) =
//! a·decode(encode(r))` for `a > 0`: a refinement step learnt on large
//! residuals applies unchanged to small ones, and a zero residual adds
//! nothing. Only the recurrent mask path carries biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VleError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::types::{MaskBatch, Token};

/// Negative-side slope of the trunk activation.
pub const LEAKY_SLOPE: f64 = 0.2;

pub mod stub;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub residual_blocks_per_level: usize,
    /// Number of stride-2 stages; spatial downsampling is `2^levels`.
    pub levels: usize,
    pub latent_channels: usize,
    pub mask_enabled: bool,
    pub lstm_hidden_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            image_channels: 3,
            base_channels: 32,
            residual_blocks_per_level: 2,
            levels: 3,
            latent_channels: 3,
            mask_enabled: false,
            lstm_hidden_channels: 8,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_channels", self.image_channels),
            ("base_channels", self.base_channels),
            ("latent_channels", self.latent_channels),
            ("lstm_hidden_channels", self.lstm_hidden_channels),
        ] {
            if v == 0 {
                return Err(VleError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.levels > 8 {
            return Err(VleError::Config(format!("levels = {} is unreasonably deep", self.levels)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.levels
    }

    /// Width at level `l`: base, then doubled once and held.
    pub fn level_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.base_channels
        } else {
            2 * self.base_channels
        }
    }

    pub fn encoder_input_channels(&self) -> usize {
        self.image_channels + usize::from(self.mask_enabled)
    }

    /// Token shape (without batch axis) for an `h × w` image.
    pub fn token_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        let s = self.stride();
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(VleError::contract(format!(
                "image size {h}x{w} is not divisible by the downsampling factor {s}"
            )));
        }
        Ok([self.latent_channels, h / s, w / s])
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv(ConvSpec),
    Res(ConvSpec, ConvSpec),
    Act,
    Upsample,
}

#[derive(Debug, Clone)]
struct PrecursorLayout {
    block: (ConvSpec, ConvSpec),
    gates: ConvSpec,
    mask_head: ConvSpec,
    transform_head: ConvSpec,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    precursor: Option<PrecursorLayout>,
}

#[derive(Clone, Copy)]
enum Init {
    FanIn,
    Zero,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, init: Init) -> ConvSpec {
        let weight = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            init,
        });
        let bias = bias.then(|| {
            self.specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                init,
            });
            self.specs.len() - 1
        });
        ConvSpec {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    fn res(&mut self, name: &str, ch: usize, inner: usize) -> Layer {
        let a = self.conv(&format!("{name}.conv1"), ch, inner, 3, 1, false, Init::FanIn);
        // Zeroed so every block starts as the identity.
        let b = self.conv(&format!("{name}.conv2"), inner, ch, 3, 1, false, Init::Zero);
        Layer::Res(a, b)
    }
}

fn build_layout(cfg: &CodecConfig) -> (Layout, Vec<ParamSpec>) {
    let mut lb = LayoutBuilder::default();
    let mut encoder = Vec::new();
    let c0 = cfg.level_channels(0);
    encoder.push(Layer::Conv(lb.conv("encoder.stem", cfg.encoder_input_channels(), c0, 3, 1, false, Init::FanIn)));
    let mut ch = c0;
    for l in 0..cfg.levels {
        for r in 0..cfg.residual_blocks_per_level {
            encoder.push(lb.res(&format!("encoder.level{l}.res{r}"), ch, ch));
        }
        let next = cfg.level_channels(l + 1);
        encoder.push(Layer::Conv(lb.conv(&format!("encoder.level{l}.down"), ch, next, 3, 2, false, Init::FanIn)));
        ch = next;
    }
    encoder.push(Layer::Act);
    encoder.push(Layer::Conv(lb.conv("encoder.out", ch, cfg.latent_channels, 3, 1, false, Init::FanIn)));

    let mut decoder = Vec::new();
    decoder.push(Layer::Conv(lb.conv("decoder.stem", cfg.latent_channels, ch, 3, 1, false, Init::FanIn)));
    for l in (0..cfg.levels).rev() {
        for r in 0..cfg.residual_blocks_per_level {
            decoder.push(lb.res(&format!("decoder.level{l}.res{r}"), ch, ch));
        }
        let next = cfg.level_channels(l);
        decoder.push(Layer::Upsample);
        decoder.push(Layer::Conv(lb.conv(&format!("decoder.level{l}.up"), ch, next, 3, 1, false, Init::FanIn)));
        ch = next;
    }
    decoder.push(Layer::Act);
    // Zeroed: an untrained decoder emits exactly 0.
    decoder.push(Layer::Conv(lb.conv("decoder.out", ch, cfg.image_channels, 3, 1, false, Init::Zero)));

    let precursor = cfg.mask_enabled.then(|| {
        let c = cfg.image_channels;
        let hid = cfg.lstm_hidden_channels;
        let Layer::Res(a, b) = lb.res("precursor.block", c, cfg.base_channels) else {
            unreachable!()
        };
        PrecursorLayout {
            block: (a, b),
            gates: lb.conv("precursor.lstm.gates", c + hid, 4 * hid, 3, 1, true, Init::FanIn),
            mask_head: lb.conv("precursor.mask_head", hid, 1, 1, 1, true, Init::FanIn),
            transform_head: lb.conv("precursor.transform_head", hid, c, 1, 1, true, Init::FanIn),
        }
    });
    (
        Layout {
            encoder,
            decoder,
            precursor,
        },
        lb.specs,
    )
}

/// Named parameter tensors in a fixed order determined by the config.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> CodecParams<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Recurrent memory of the precursor; zeros at the start of every run.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T = f32> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Real> MemoryState<T> {
    pub fn zeros(batch: usize, channels: usize, h: usize, w: usize) -> Self {
        MemoryState {
            hidden: Tensor::zeros(&[batch, channels, h, w]),
            cell: Tensor::zeros(&[batch, channels, h, w]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryVars {
    pub hidden: Var,
    pub cell: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PrecursorVars {
    pub transformed: Var,
    pub mask: Var,
    pub memory: MemoryVars,
}

/// A codec whose parameters live on a particular graph.
pub trait CodecGraph<T: Real> {
    fn encode(&self, g: &mut Graph<T>, input: Var) -> Result<Var>;

    fn decode(&self, g: &mut Graph<T>, token: Var) -> Result<Var>;

    fn mask_enabled(&self) -> bool {
        false
    }

    fn initial_memory(&self, _g: &mut Graph<T>, _image_shape: &[usize]) -> Result<MemoryVars> {
        Err(VleError::contract("codec has no mask precursor"))
    }

    fn precursor(&self, _g: &mut Graph<T>, _memory: MemoryVars, _residual: Var) -> Result<PrecursorVars> {
        Err(VleError::contract("codec has no mask precursor"))
    }
}

/// Anything that can place its parameters on a graph.
pub trait Codec<T: Real> {
    fn bind<'a>(&'a self, g: &mut Graph<T>) -> Box<dyn CodecGraph<T> + 'a>;

    fn mask_enabled(&self) -> bool;
}

/// Encoder input for a masked step: concat(M̃ ⊙ X̃, M̃) along channels.
pub fn condition_var<T: Real>(g: &mut Graph<T>, transformed: Var, mask: Var) -> Result<Var> {
    let selected = g.mul_mask(transformed, mask)?;
    g.concat_channels(&[selected, mask])
}

pub fn condition<T: Real>(transformed: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(transformed.clone());
    let m = g.constant(mask.clone());
    let out = condition_var(&mut g, x, m)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone)]
pub struct ConvCodec<T = f32> {
    config: CodecConfig,
    layout: Layout,
    params: CodecParams<T>,
}

impl<T: Real> PartialEq for ConvCodec<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Real> ConvCodec<T> {
    /// Fan-in scaled uniform initialisation (±√(6/((1+s²)·fan_in)) for
    /// weights, ±1/√fan_in for biases); the last conv of every residual
    /// block and of the decoder is zeroed.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        let mut fan_in = 1;
        for spec in specs {
            if spec.shape.len() == 4 {
                fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3];
            }
            let tensor = match spec.init {
                Init::Zero => Tensor::zeros(&spec.shape),
                Init::FanIn => {
                    // Variance-preserving gain for the leaky trunk; nothing normalises activations.
                    let scale = if spec.shape.len() == 4 { 6.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) } else { 1.0 };
                    let bound = (scale / fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| T::lit(rng.random_range(-bound..bound)))
                }
            };
            names.push(spec.name);
            tensors.push(tensor);
        }
        Ok(ConvCodec {
            config,
            layout,
            params: CodecParams { names, tensors },
        })
    }

    /// Rebuild from stored tensors; names and shapes must match the config.
    pub fn from_params(config: CodecConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if specs.len() != named.len() {
            return Err(VleError::contract(format!(
                "config expects {} parameter tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name {
                return Err(VleError::contract(format!("expected parameter {}, got {name}", spec.name)));
            }
            t.expect_shape(&spec.shape)?;
            if !t.all_finite() {
                return Err(VleError::NonFinite(format!("parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ConvCodec {
            config,
            layout,
            params: CodecParams { names, tensors },
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &CodecParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut CodecParams<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn cast<U: Real>(&self) -> ConvCodec<U> {
        ConvCodec {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: CodecParams {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(Tensor::cast).collect(),
            },
        }
    }

    /// Bound view with parameters inserted as trainable leaves, in parameter order.
    pub fn bind_params(&self, g: &mut Graph<T>) -> BoundCodec<'_, T> {
        let vars = self.params.tensors.iter().map(|t| g.param(t.clone())).collect();
        BoundCodec { codec: self, vars }
    }

    pub fn encode(&self, input: &Tensor<T>) -> Result<Token<T>> {
        let mut g = Graph::new();
        let bound = self.bind_params(&mut g);
        let x = g.constant(input.clone());
        let z = bound.encode(&mut g, x)?;
        Ok(Token {
            z: g.value(z).clone(),
            index: 1,
        })
    }

    pub fn decode(&self, token: &Token<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind_params(&mut g);
        let z = g.constant(token.z.clone());
        let out = bound.decode(&mut g, z)?;
        Ok(g.value(out).clone())
    }

    /// One precursor step: (X̃_n, M̃_n, advanced memory).
    pub fn precursor(
        &self,
        state: &MemoryState<T>,
        residual: &Tensor<T>,
    ) -> Result<(Tensor<T>, MaskBatch<T>, MemoryState<T>)> {
        let mut g = Graph::new();
        let bound = self.bind_params(&mut g);
        let memory = MemoryVars {
            hidden: g.constant(state.hidden.clone()),
            cell: g.constant(state.cell.clone()),
        };
        let r = g.constant(residual.clone());
        let out = bound.precursor(&mut g, memory, r)?;
        Ok((
            g.value(out.transformed).clone(),
            MaskBatch::new(g.value(out.mask).clone())?,
            MemoryState {
                hidden: g.value(out.memory.hidden).clone(),
                cell: g.value(out.memory.cell).clone(),
            },
        ))
    }
}

impl<T: Real> Codec<T> for ConvCodec<T> {
    fn bind<'a>(&'a self, g: &mut Graph<T>) -> Box<dyn CodecGraph<T> + 'a> {
        Box::new(self.bind_params(g))
    }

    fn mask_enabled(&self) -> bool {
        self.config.mask_enabled
    }
}

pub struct BoundCodec<'a, T> {
    codec: &'a ConvCodec<T>,
    vars: Vec<Var>,
}

impl<T: Real> BoundCodec<'_, T> {
    /// Parameter leaves, in the same order as [`CodecParams::tensors`].
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, g: &mut Graph<T>, spec: ConvSpec, x: Var) -> Result<Var> {
        g.conv2d(x, self.vars[spec.weight], spec.bias.map(|b| self.vars[b]), spec.stride, spec.pad)
    }

    fn res(&self, g: &mut Graph<T>, a: ConvSpec, b: ConvSpec, x: Var) -> Result<Var> {
        let h = g.leaky_relu(x, LEAKY_SLOPE);
        let h = self.conv(g, a, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv(g, b, h)?;
        g.add(x, h)
    }

    fn apply(&self, g: &mut Graph<T>, layers: &[Layer], mut x: Var) -> Result<Var> {
        for layer in layers {
            x = match *layer {
                Layer::Conv(spec) => self.conv(g, spec, x)?,
                Layer::Res(a, b) => self.res(g, a, b, x)?,
                Layer::Act => g.leaky_relu(x, LEAKY_SLOPE),
                Layer::Upsample => g.upsample2x(x)?,
            };
        }
        Ok(x)
    }
}

impl<T: Real> CodecGraph<T> for BoundCodec<'_, T> {
    fn encode(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let cfg = &self.codec.config;
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != cfg.encoder_input_channels() {
            return Err(VleError::contract(format!(
                "encoder expects {} input channels, got {c}",
                cfg.encoder_input_channels()
            )));
        }
        cfg.token_shape(h, w)?;
        self.apply(g, &self.codec.layout.encoder, input)
    }

    fn decode(&self, g: &mut Graph<T>, token: Var) -> Result<Var> {
        let cfg = &self.codec.config;
        let (_, c, _, _) = g.value(token).dims4()?;
        if c != cfg.latent_channels {
            return Err(VleError::contract(format!(
                "decoder expects {} latent channels, got {c}",
                cfg.latent_channels
            )));
        }
        self.apply(g, &self.codec.layout.decoder, token)
    }

    fn mask_enabled(&self) -> bool {
        self.codec.config.mask_enabled
    }

    fn initial_memory(&self, g: &mut Graph<T>, image_shape: &[usize]) -> Result<MemoryVars> {
        if !self.codec.config.mask_enabled {
            return Err(VleError::contract("codec has no mask precursor"));
        }
        let [b, _, h, w] = image_shape[..] else {
            return Err(VleError::contract("image shape must be rank 4"));
        };
        let state = MemoryState::zeros(b, self.codec.config.lstm_hidden_channels, h, w);
        Ok(MemoryVars {
            hidden: g.constant(state.hidden),
            cell: g.constant(state.cell),
        })
    }

    fn precursor(&self, g: &mut Graph<T>, memory: MemoryVars, residual: Var) -> Result<PrecursorVars> {
        let Some(p) = &self.codec.layout.precursor else {
            return Err(VleError::contract("precursor called on a codec without masks"));
        };
        let (_, c, _, _) = g.value(residual).dims4()?;
        if c != self.codec.config.image_channels {
            return Err(VleError::contract(format!("precursor expects {} channels, got {c}", self.codec.config.image_channels)));
        }
        let hid = self.codec.config.lstm_hidden_channels;
        let x = self.res(g, p.block.0, p.block.1, residual)?;

        let joint = g.concat_channels(&[x, memory.hidden])?;
        let gates = self.conv(g, p.gates, joint)?;
        let i = g.narrow_channels(gates, 0, hid)?;
        let f = g.narrow_channels(gates, hid, hid)?;
        let o = g.narrow_channels(gates, 2 * hid, hid)?;
        let cand = g.narrow_channels(gates, 3 * hid, hid)?;
        let (i, f, o, cand) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(cand));
        let kept = g.mul(f, memory.cell)?;
        let written = g.mul(i, cand)?;
        let cell = g.add(kept, written)?;
        let squashed = g.tanh(cell);
        let hidden = g.mul(o, squashed)?;

        let logits = self.conv(g, p.mask_head, hidden)?;
        let mask = g.sigmoid(logits);
        let transformed = self.conv(g, p.transform_head, hidden)?;
        Ok(PrecursorVars {
            transformed,
            mask,
            memory: MemoryVars { hidden, cell },
        })
    }
}
