//! Transformer encoder with learned positions and a first-token regression head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, DEFAULT_MAX_POSITIONS};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    Tanh,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Post,
    Pre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub head_activation: HeadActivation,
    pub norm: NormPlacement,
    /// Recorded so checkpoints state which GELU was used; only "tanh" exists.
    #[serde(default = "default_gelu")]
    pub gelu: String,
}

fn default_gelu() -> String {
    "tanh".to_string()
}

impl EncoderConfig {
    /// Desk-scale defaults: 4 layers, 4 heads, hidden 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            hidden_size: 64,
            ffn_size: 256,
            max_positions: DEFAULT_MAX_POSITIONS,
            vocab_size,
            dropout_rate: 0.1,
            head_activation: HeadActivation::Tanh,
            norm: NormPlacement::Post,
            gelu: default_gelu(),
        }
    }

    /// 12 layers, 12 heads, hidden 768.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            hidden_size: 768,
            ffn_size: 3072,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.hidden_size.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.ffn_size == 0 || self.max_positions == 0 {
            return bad("layers, ffn size and max positions must be positive".into());
        }
        if self.vocab_size == 0 {
            return bad("empty vocabulary".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.gelu != "tanh" {
            return bad(format!("unsupported gelu variant {:?}", self.gelu));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }
}

/// Per-layer weights. Matrices are stored input-major (`x * w`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub q_w: T,
    pub q_b: T,
    pub k_w: T,
    pub k_b: T,
    pub v_w: T,
    pub v_b: T,
    pub o_w: T,
    pub o_b: T,
    pub norm1_g: T,
    pub norm1_b: T,
    pub ffn_in_w: T,
    pub ffn_in_b: T,
    pub ffn_out_w: T,
    pub ffn_out_b: T,
    pub norm2_g: T,
    pub norm2_b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub token_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    /// Present only for pre-norm models.
    pub final_norm: Option<(T, T)>,
    pub head_dense_w: T,
    pub head_dense_b: T,
    pub head_out_w: T,
    pub head_out_b: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "norm1.gain",
    "norm1.bias",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
    "norm2.gain",
    "norm2.bias",
];

impl<T> LayerWeights<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.q_w,
            &self.q_b,
            &self.k_w,
            &self.k_b,
            &self.v_w,
            &self.v_b,
            &self.o_w,
            &self.o_b,
            &self.norm1_g,
            &self.norm1_b,
            &self.ffn_in_w,
            &self.ffn_in_b,
            &self.ffn_out_w,
            &self.ffn_out_b,
            &self.norm2_g,
            &self.norm2_b,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.q_w,
            &mut self.q_b,
            &mut self.k_w,
            &mut self.k_b,
            &mut self.v_w,
            &mut self.v_b,
            &mut self.o_w,
            &mut self.o_b,
            &mut self.norm1_g,
            &mut self.norm1_b,
            &mut self.ffn_in_w,
            &mut self.ffn_in_b,
            &mut self.ffn_out_w,
            &mut self.ffn_out_b,
            &mut self.norm2_g,
            &mut self.norm2_b,
        ]
    }

    fn from_fn(mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            q_w: f(0),
            q_b: f(1),
            k_w: f(2),
            k_b: f(3),
            v_w: f(4),
            v_b: f(5),
            o_w: f(6),
            o_b: f(7),
            norm1_g: f(8),
            norm1_b: f(9),
            ffn_in_w: f(10),
            ffn_in_b: f(11),
            ffn_out_w: f(12),
            ffn_out_b: f(13),
            norm2_g: f(14),
            norm2_b: f(15),
        }
    }
}

impl<T> Weights<T> {
    /// Every parameter with its name, in the declared checkpoint order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_emb),
            ("embeddings.position".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.refs()) {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        if let Some((g, b)) = &self.final_norm {
            out.push(("final_norm.gain".to_string(), g));
            out.push(("final_norm.bias".to_string(), b));
        }
        out.push(("head.dense.weight".to_string(), &self.head_dense_w));
        out.push(("head.dense.bias".to_string(), &self.head_dense_b));
        out.push(("head.out.weight".to_string(), &self.head_out_w));
        out.push(("head.out.bias".to_string(), &self.head_out_b));
        out
    }

    /// Mutable references in the same order as [`Weights::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.refs_mut());
        }
        if let Some((g, b)) = &mut self.final_norm {
            out.push(g);
            out.push(b);
        }
        out.extend([
            &mut self.head_dense_w,
            &mut self.head_dense_b,
            &mut self.head_out_w,
            &mut self.head_out_b,
        ]);
        out
    }

    pub fn len(&self) -> usize {
        self.named().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let refs = l.refs();
                LayerWeights::from_fn(|k| f(&format!("layers.{i}.{}", LAYER_FIELDS[k]), refs[k]))
            })
            .collect();
        Weights {
            token_emb: f("embeddings.token", &self.token_emb),
            pos_emb: f("embeddings.position", &self.pos_emb),
            layers,
            final_norm: self
                .final_norm
                .as_ref()
                .map(|(g, b)| (f("final_norm.gain", g), f("final_norm.bias", b))),
            head_dense_w: f("head.dense.weight", &self.head_dense_w),
            head_dense_b: f("head.dense.bias", &self.head_dense_b),
            head_out_w: f("head.out.weight", &self.head_out_w),
            head_out_b: f("head.out.bias", &self.head_out_b),
        }
    }
}

/// Shape of every parameter, by name, for a configuration.
fn build_weights(config: &EncoderConfig, mut make: impl FnMut(&str, [usize; 2]) -> Tensor) -> Weights<Tensor> {
    let h = config.hidden_size;
    let f = config.ffn_size;
    let layer_shapes: [[usize; 2]; 16] = [
        [h, h],
        [1, h],
        [h, h],
        [1, h],
        [h, h],
        [1, h],
        [h, h],
        [1, h],
        [1, h],
        [1, h],
        [h, f],
        [1, f],
        [f, h],
        [1, h],
        [1, h],
        [1, h],
    ];
    let layers = (0..config.n_layers)
        .map(|i| {
            LayerWeights::from_fn(|k| make(&format!("layers.{i}.{}", LAYER_FIELDS[k]), layer_shapes[k]))
        })
        .collect();
    Weights {
        token_emb: make("embeddings.token", [config.vocab_size, h]),
        pos_emb: make("embeddings.position", [config.max_positions, h]),
        layers,
        final_norm: (config.norm == NormPlacement::Pre)
            .then(|| (make("final_norm.gain", [1, h]), make("final_norm.bias", [1, h]))),
        head_dense_w: make("head.dense.weight", [h, h]),
        head_dense_b: make("head.dense.bias", [1, h]),
        head_out_w: make("head.out.weight", [h, 1]),
        head_out_b: make("head.out.bias", [1, 1]),
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Attention weights of one forward pass: `layers[l][h]` is an L x L matrix
/// whose row i is the attention position i pays to every position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub seq_len: usize,
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> Result<&[Tensor]> {
        self.layers
            .get(layer)
            .map(Vec::as_slice)
            .ok_or(Error::LayerOutOfRange {
                layer,
                n_layers: self.layers.len(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub pooled: Vec<f64>,
    pub energy: f64,
    pub attention: Option<AttentionRecord>,
}

/// Graph handles for one sequence run on a tape.
pub struct TapeOutput {
    /// n x hidden final hidden states.
    pub hidden: Var,
    /// 1 x 1 predicted energy.
    pub energy: Var,
    pub attention: Option<AttentionRecord>,
}

/// Which positions a forward pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Span {
    /// Only the leading run of real tokens. Padding sits after it and is
    /// masked from every key, so the real positions come out identical.
    Real,
    /// Every position, padded ones included.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub weights: Weights<Tensor>,
}

impl EncoderModel {
    /// Normal(0, 0.02) matrices, zero biases, unit layer-norm gains.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let weights = build_weights(&config, |name, [r, c]| {
            if is_gain(name) {
                Tensor::filled(r, c, 1.0)
            } else if is_bias(name) {
                Tensor::zeros(r, c)
            } else {
                let data = (0..r * c).map(|_| normal.sample(rng)).collect();
                Tensor::new(r, c, data).expect("shape")
            }
        });
        Ok(Self { config, weights })
    }

    /// Every parameter zero.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let weights = build_weights(&config, |_, [r, c]| Tensor::zeros(r, c));
        Ok(Self { config, weights })
    }

    /// Rebuild from parameter tensors given in declared order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let slots = model.weights.values_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a model with {}",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor shape {:?} where {:?} expected",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn n_parameters(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Fresh regression head (dense and output layers), as used when
    /// fine-tuning a pretrained encoder.
    pub fn reset_head(&mut self, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for t in [&mut self.weights.head_dense_w, &mut self.weights.head_out_w] {
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        for t in [&mut self.weights.head_dense_b, &mut self.weights.head_out_b] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Register every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Weights<Var> {
        self.weights.map(|_, t| tape.param(t.clone()))
    }

    /// Register every parameter as a constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Weights<Var> {
        self.weights.map(|_, t| tape.constant(t.clone()))
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(&self, seq: &TokenSequence, capture_attention: bool) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let w = self.bind_constant(&mut tape);
        let out = self.forward_on_tape(&mut tape, &w, seq, Span::Real, capture_attention, None)?;
        let hidden = tape.value(out.hidden);
        Ok(ForwardOutput {
            pooled: hidden.row_slice(0).to_vec(),
            energy: tape.value(out.energy).item(),
            attention: out.attention,
        })
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<f64> {
        Ok(self.forward(seq, false)?.energy)
    }

    /// Build the graph for one sequence on `tape` using bound weights `w`.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        seq: &TokenSequence,
        span: Span,
        capture_attention: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TapeOutput> {
        let cfg = &self.config;
        let n = match span {
            Span::Real => seq
                .attention_mask
                .iter()
                .position(|&m| m == 0)
                .unwrap_or(seq.ids.len()),
            Span::Full => seq.ids.len(),
        };
        if n == 0 {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if n > cfg.max_positions {
            return Err(Error::Config(format!(
                "sequence of {n} positions exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        let mut ids = Vec::with_capacity(n);
        for &id in &seq.ids[..n] {
            if id as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: cfg.vocab_size,
                });
            }
            ids.push(id as usize);
        }
        let keep: Vec<bool> = seq.attention_mask[..n].iter().map(|&m| m != 0).collect();
        let positions: Vec<usize> = (0..n).collect();

        let tok = tape.gather(w.token_emb, &ids)?;
        let pos = tape.gather(w.pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let rate = cfg.dropout_rate;
        let mut dropout = |tape: &mut Tape, v: Var| -> Result<Var> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let len = tape.value(v).data().len();
                    let scale = 1.0 / (1.0 - rate);
                    let mask = (0..len)
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
                        .collect();
                    tape.dropout_with_mask(v, mask)
                }
                _ => Ok(v),
            }
        };

        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut record = capture_attention.then(Vec::new);
        let pre = cfg.norm == NormPlacement::Pre;

        for lw in &w.layers {
            let h = if pre {
                tape.layer_norm(x, lw.norm1_g, lw.norm1_b, LAYER_NORM_EPS)?
            } else {
                x
            };
            let q = tape.linear(h, lw.q_w, lw.q_b)?;
            let k = tape.linear(h, lw.k_w, lw.k_b)?;
            let v = tape.linear(h, lw.v_w, lw.v_b)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut captured = Vec::new();
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * hd, hd)?;
                let kh = tape.slice_cols(k, head * hd, hd)?;
                let vh = tape.slice_cols(v, head * hd, hd)?;
                let scores = tape.matmul_scaled(qh, kh, true, scale)?;
                let weights = tape.masked_softmax_rows(scores, &keep)?;
                if record.is_some() {
                    captured.push(tape.value(weights).clone());
                }
                let weights = dropout(tape, weights)?;
                heads.push(tape.matmul(weights, vh)?);
            }
            if let Some(r) = record.as_mut() {
                r.push(captured);
            }
            let cat = tape.concat_cols(&heads)?;
            let attn = tape.linear(cat, lw.o_w, lw.o_b)?;
            x = tape.add(x, attn)?;
            if !pre {
                x = tape.layer_norm(x, lw.norm1_g, lw.norm1_b, LAYER_NORM_EPS)?;
            }

            let h = if pre {
                tape.layer_norm(x, lw.norm2_g, lw.norm2_b, LAYER_NORM_EPS)?
            } else {
                x
            };
            let f = tape.linear(h, lw.ffn_in_w, lw.ffn_in_b)?;
            let f = tape.gelu(f);
            let f = tape.linear(f, lw.ffn_out_w, lw.ffn_out_b)?;
            let f = dropout(tape, f)?;
            x = tape.add(x, f)?;
            if !pre {
                x = tape.layer_norm(x, lw.norm2_g, lw.norm2_b, LAYER_NORM_EPS)?;
            }
        }
        if let Some((g, b)) = w.final_norm {
            x = tape.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        }

        let pooled = tape.select_rows(x, &[0])?;
        let d = tape.linear(pooled, w.head_dense_w, w.head_dense_b)?;
        let a = match cfg.head_activation {
            HeadActivation::Tanh => tape.tanh(d),
            HeadActivation::Gelu => tape.gelu(d),
        };
        let energy = tape.linear(a, w.head_out_w, w.head_out_b)?;

        Ok(TapeOutput {
            hidden: x,
            energy,
            attention: record.map(|layers| AttentionRecord { seq_len: n, layers }),
        })
    }
}
