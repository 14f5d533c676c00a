//! The bottlenecked transformer encoder–decoder.
//!
//! The encoder `E` maps a sentence to a fixed-length vector by averaging the
//! encoder states over token positions and applying a linear projection. The
//! decoder `D` reads that vector as a single cross-attention memory slot and
//! defines an autoregressive distribution over sentences.

mod checkpoint;
mod config;
pub mod decode;
mod train;
mod transformer;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::{Real, Tensor};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, PositionalEncoding};
pub use decode::{beam_search, nucleus_support, sample, sample_many, DecodeConfig, DecodeStrategy, Sampled, VecToText};
pub use train::{batch_indices, batch_loss, fit, loss_and_gradients, train_step, Adam, LrSchedule, TrainConfig};
pub use transformer::{LogLikelihood, TokenPair};

/// A point in the control space: the output of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// What the decoder is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub enum Context {
    /// A bottleneck vector (requires `bottleneck_dim > 0`).
    Embedding(EmbeddingVector),
    /// A source sentence, encoded and attended to in full (any config).
    Source(Vec<TokenId>),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForwardIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SelfAttnIdx {
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CrossAttnIdx {
    pub w_q: usize,
    pub b_q: usize,
    pub w_kv: usize,
    pub b_kv: usize,
    pub w_o: usize,
    pub b_o: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayerIdx {
    pub ln_attn: LayerNormIdx,
    pub attn: SelfAttnIdx,
    pub ln_ff: LayerNormIdx,
    pub ff: FeedForwardIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayerIdx {
    pub ln_self: LayerNormIdx,
    pub self_attn: SelfAttnIdx,
    pub ln_cross: LayerNormIdx,
    pub cross: CrossAttnIdx,
    pub ln_ff: LayerNormIdx,
    pub ff: FeedForwardIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BottleneckIdx {
    /// `d_model × d`, no bias: the embedding is a linear map of the mean state.
    pub proj: usize,
    /// `d × d_model` and bias: re-expands the embedding into a memory slot.
    pub up_w: usize,
    pub up_b: usize,
}

/// Parameter indices by role.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub enc_embed: usize,
    pub enc_layers: Vec<EncoderLayerIdx>,
    pub enc_ln: LayerNormIdx,
    pub bottleneck: Option<BottleneckIdx>,
    /// `(vocab_size + 1) × d_model`; the extra last row is the start-of-decoding input.
    pub dec_embed: usize,
    pub dec_layers: Vec<DecoderLayerIdx>,
    pub dec_ln: LayerNormIdx,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(ParamSpec { name, rows, cols, init });
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LayerNormIdx {
        LayerNormIdx {
            gain: self.add(format!("{prefix}.gain"), 1, d, Init::Ones),
            bias: self.add(format!("{prefix}.bias"), 1, d, Init::Zeros),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForwardIdx {
        FeedForwardIdx {
            w1: self.add(format!("{prefix}.w1"), d, d_ff, Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), 1, d_ff, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), d_ff, d, Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }

    fn self_attn(&mut self, prefix: &str, d: usize) -> SelfAttnIdx {
        SelfAttnIdx {
            w_qkv: self.add(format!("{prefix}.w_qkv"), d, 3 * d, Init::Xavier),
            b_qkv: self.add(format!("{prefix}.b_qkv"), 1, 3 * d, Init::Zeros),
            w_o: self.add(format!("{prefix}.w_o"), d, d, Init::Xavier),
            b_o: self.add(format!("{prefix}.b_o"), 1, d, Init::Zeros),
        }
    }

    fn cross_attn(&mut self, prefix: &str, d: usize) -> CrossAttnIdx {
        CrossAttnIdx {
            w_q: self.add(format!("{prefix}.w_q"), d, d, Init::Xavier),
            b_q: self.add(format!("{prefix}.b_q"), 1, d, Init::Zeros),
            w_kv: self.add(format!("{prefix}.w_kv"), d, 2 * d, Init::Xavier),
            b_kv: self.add(format!("{prefix}.b_kv"), 1, 2 * d, Init::Zeros),
            w_o: self.add(format!("{prefix}.w_o"), d, d, Init::Xavier),
            b_o: self.add(format!("{prefix}.b_o"), 1, d, Init::Zeros),
        }
    }
}

pub(crate) fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder::default();
    let enc_embed = b.add("encoder.embed".into(), cfg.vocab_size, d, Init::Xavier);
    let enc_layers = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("encoder.layer{l}");
            EncoderLayerIdx {
                ln_attn: b.ln(&format!("{p}.ln_attn"), d),
                attn: b.self_attn(&format!("{p}.attn"), d),
                ln_ff: b.ln(&format!("{p}.ln_ff"), d),
                ff: b.ff(&format!("{p}.ff"), d, cfg.d_ff),
            }
        })
        .collect();
    let enc_ln = b.ln("encoder.ln_final", d);
    let bottleneck = cfg.has_bottleneck().then(|| BottleneckIdx {
        proj: b.add("bottleneck.proj".into(), d, cfg.bottleneck_dim, Init::Xavier),
        up_w: b.add("bottleneck.up_w".into(), cfg.bottleneck_dim, d, Init::Xavier),
        up_b: b.add("bottleneck.up_b".into(), 1, d, Init::Zeros),
    });
    let dec_embed = b.add("decoder.embed".into(), cfg.vocab_size + 1, d, Init::Xavier);
    let dec_layers = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("decoder.layer{l}");
            DecoderLayerIdx {
                ln_self: b.ln(&format!("{p}.ln_self"), d),
                self_attn: b.self_attn(&format!("{p}.self_attn"), d),
                ln_cross: b.ln(&format!("{p}.ln_cross"), d),
                cross: b.cross_attn(&format!("{p}.cross_attn"), d),
                ln_ff: b.ln(&format!("{p}.ln_ff"), d),
                ff: b.ff(&format!("{p}.ff"), d, cfg.d_ff),
            }
        })
        .collect();
    let dec_ln = b.ln("decoder.ln_final", d);
    let out_w = b.add("output.w".into(), d, cfg.vocab_size, Init::Xavier);
    let out_b = b.add("output.b".into(), 1, cfg.vocab_size, Init::Zeros);
    let layout = Layout {
        enc_embed,
        enc_layers,
        enc_ln,
        bottleneck,
        dec_embed,
        dec_layers,
        dec_ln,
        out_w,
        out_b,
    };
    (layout, b.specs)
}

/// Configuration, parameters and step counter of one model.
///
/// `Model<f32>` is what gets trained and checkpointed; `Model<f64>` is used
/// to check gradients against finite differences.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    pub(crate) layout: Layout,
    names: Vec<String>,
    pub(crate) params: Vec<Tensor<T>>,
    pub(crate) positions: Tensor<T>,
    step: u64,
}

pub type ModelState = Model<f32>;

impl<T: Real> Model<T> {
    /// Fresh parameters: scaled-uniform weights `±sqrt(6 / (fan_in + fan_out))`,
    /// zero biases and unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let tree = SeedTree::new(seed).child("model-init");
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = tree.index(i as u64).rng();
                let n = s.rows * s.cols;
                let data = match s.init {
                    Init::Zeros => vec![T::ZERO; n],
                    Init::Ones => vec![T::ONE; n],
                    Init::Xavier => {
                        let limit = (6.0 / (s.rows + s.cols) as f64).sqrt();
                        (0..n).map(|_| T::from_f64(rng.random_range(-limit..limit))).collect()
                    }
                };
                Tensor::from_vec(s.rows, s.cols, data)
            })
            .collect();
        let names = specs.into_iter().map(|s| s.name).collect();
        let positions = sinusoidal(config.max_len, config.d_model);
        Ok(Self {
            config,
            layout,
            names,
            params,
            positions,
            step: 0,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>, step: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(tensors) {
            if spec.name != name || (spec.rows, spec.cols) != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    (spec.rows, spec.cols)
                )));
            }
            params.push(t);
        }
        if !params.iter().all(Tensor::all_finite) {
            return Err(Error::Data("non-finite parameter value".into()));
        }
        let names = specs.into_iter().map(|s| s.name).collect();
        let positions = sinusoidal(config.max_len, config.d_model);
        Ok(Self {
            config,
            layout,
            names,
            params,
            positions,
            step,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            positions: sinusoidal(self.config.max_len, self.config.d_model),
            step: self.step,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }
}

fn sinusoidal<T: Real>(max_len: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            t.row_mut(pos)[i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}
