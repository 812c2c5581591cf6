//! Post-layernorm (BERT-style) transformer encoder whose forward pass can be
//! truncated in depth and thinned in width.
//!
//! Parameters are stored in generic containers ([`Encoder`], [`Layer`]) so the
//! same structure holds concrete tensors, tape handles or optimizer moments.

use serde::{Deserialize, Serialize};
use starbucks_tensor::{AttentionLayout, Rng, Tape, Tensor, Var};

use crate::data::PAD_ID;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Total width of the attention projections (`num_heads * head_dim`).
    /// Equals `hidden_dim` for a standard encoder; smaller for thin models.
    pub attention_dim: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
}

impl EncoderConfig {
    /// BERT-base dimensions (without token-type embeddings).
    pub fn bert_base() -> Self {
        Self {
            vocab_size: 30522,
            max_seq_len: 512,
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            attention_dim: 768,
            ffn_dim: 3072,
            dropout_p: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.attention_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("attention_dim", self.attention_dim),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if self.num_heads > 0 && !self.attention_dim.is_multiple_of(self.num_heads) {
            problems.push(format!(
                "attention_dim {} not divisible by num_heads {}",
                self.attention_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            problems.push(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn full_width(&self) -> WidthSpec {
        WidthSpec {
            ffn_active: self.ffn_dim,
            attn_active: self.attention_dim,
        }
    }
}

/// Active FFN units and attention width of a width-sliced sub-network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSpec {
    pub ffn_active: usize,
    pub attn_active: usize,
}

impl WidthSpec {
    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.ffn_active == 0 || self.ffn_active > config.ffn_dim {
            return Err(Error::Config(format!(
                "ffn_active {} outside [1, {}]",
                self.ffn_active, config.ffn_dim
            )));
        }
        if self.attn_active == 0
            || self.attn_active > config.attention_dim
            || !self.attn_active.is_multiple_of(config.num_heads)
        {
            return Err(Error::Config(format!(
                "attn_active {} must be a positive multiple of {} heads and <= {}",
                self.attn_active, config.num_heads, config.attention_dim
            )));
        }
        Ok(())
    }

    pub fn is_full(&self, config: &EncoderConfig) -> bool {
        *self == config.full_width()
    }

    /// Per-head active dimension.
    pub fn head_dim(&self, config: &EncoderConfig) -> usize {
        self.attn_active / config.num_heads
    }

    /// Columns of Q/K/V (rows of Wo) kept by this width: the first
    /// `attn_active / H` dims of every head.
    pub fn attention_columns(&self, config: &EncoderConfig) -> Vec<usize> {
        let full = config.head_dim();
        let active = self.head_dim(config);
        (0..config.num_heads)
            .flat_map(|h| (0..active).map(move |j| h * full + j))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Cls,
    Mean,
}

/// One transformer layer. Linear maps are stored input-major (`x · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ffn_in: T,
    pub ffn_in_bias: T,
    pub ffn_out: T,
    pub ffn_out_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

impl<T> Layer<T> {
    pub const FIELD_NAMES: [&'static str; 16] = [
        "wq",
        "bq",
        "wk",
        "bk",
        "wv",
        "bv",
        "wo",
        "bo",
        "ln1_gain",
        "ln1_bias",
        "ffn_in",
        "ffn_in_bias",
        "ffn_out",
        "ffn_out_bias",
        "ln2_gain",
        "ln2_bias",
    ];

    pub fn fields(&self) -> [&T; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    /// Builds a layer from 16 values in [`FIELD_NAMES`](Self::FIELD_NAMES) order.
    pub fn from_fields(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            ffn_in: it.next()?,
            ffn_in_bias: it.next()?,
            ffn_out: it.next()?,
            ffn_out_bias: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
        })
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> Layer<U> {
        Layer::from_fields(self.fields().into_iter().map(&mut f)).expect("16 fields")
    }
}

impl Layer<Tensor> {
    /// Shapes `(name, shape)` of a layer with the given interior widths.
    pub fn shapes(hidden: usize, attn: usize, ffn: usize) -> [Vec<usize>; 16] {
        [
            vec![hidden, attn],
            vec![attn],
            vec![hidden, attn],
            vec![attn],
            vec![hidden, attn],
            vec![attn],
            vec![attn, hidden],
            vec![hidden],
            vec![hidden],
            vec![hidden],
            vec![hidden, ffn],
            vec![ffn],
            vec![ffn, hidden],
            vec![hidden],
            vec![hidden],
            vec![hidden],
        ]
    }

    /// Gaussian weights, zero biases, unit layernorm gains.
    pub fn init(hidden: usize, attn: usize, ffn: usize, rng: &mut Rng) -> Self {
        let shapes = Self::shapes(hidden, attn, ffn);
        Layer::from_fields(shapes.iter().enumerate().map(|(i, s)| {
            let name = Self::FIELD_NAMES[i];
            if name.starts_with("ln") && name.ends_with("gain") {
                Tensor::ones(s)
            } else if s.len() == 1 {
                Tensor::zeros(s)
            } else {
                Tensor::randn(s, INIT_STD, rng)
            }
        }))
        .expect("16 fields")
    }

    /// Copy restricted to `width`: per-head Q/K/V columns, matching Wo rows,
    /// and the leading FFN units.
    pub fn slice(&self, config: &EncoderConfig, width: &WidthSpec) -> Result<Self> {
        let cols = width.attention_columns(config);
        let ffn: Vec<usize> = (0..width.ffn_active).collect();
        Ok(Self {
            wq: self.wq.select_cols(&cols)?,
            bq: self.bq.select_cols(&cols)?,
            wk: self.wk.select_cols(&cols)?,
            bk: self.bk.select_cols(&cols)?,
            wv: self.wv.select_cols(&cols)?,
            bv: self.bv.select_cols(&cols)?,
            wo: self.wo.select_rows(&cols)?,
            bo: self.bo.clone(),
            ln1_gain: self.ln1_gain.clone(),
            ln1_bias: self.ln1_bias.clone(),
            ffn_in: self.ffn_in.select_cols(&ffn)?,
            ffn_in_bias: self.ffn_in_bias.select_cols(&ffn)?,
            ffn_out: self.ffn_out.select_rows(&ffn)?,
            ffn_out_bias: self.ffn_out_bias.clone(),
            ln2_gain: self.ln2_gain.clone(),
            ln2_bias: self.ln2_bias.clone(),
        })
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Layer<Var> {
        self.map(|t| {
            if trainable {
                tape.leaf_ref(t)
            } else {
                tape.constant_ref(t)
            }
        })
    }
}

/// Full encoder: embeddings, layers and the tied MLM head's output bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub token_embeddings: T,
    pub position_embeddings: T,
    pub embed_ln_gain: T,
    pub embed_ln_bias: T,
    pub layers: Vec<Layer<T>>,
    pub mlm_bias: T,
}

pub type EncoderParams = Encoder<Tensor>;
pub type EncoderVars = Encoder<Var>;

impl<T> Encoder<T> {
    /// `(name, value)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embeddings),
            ("embeddings.position".to_string(), &self.position_embeddings),
            ("embeddings.ln_gain".to_string(), &self.embed_ln_gain),
            ("embeddings.ln_bias".to_string(), &self.embed_ln_bias),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in Layer::<T>::FIELD_NAMES.iter().zip(layer.fields()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("mlm.bias".to_string(), &self.mlm_bias));
        out
    }

    pub fn fields(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn fields_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.token_embeddings,
            &mut self.position_embeddings,
            &mut self.embed_ln_gain,
            &mut self.embed_ln_bias,
        ];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.mlm_bias);
        out
    }

    /// Rebuilds from values in canonical order for an encoder with `num_layers` layers.
    pub fn from_fields(mut it: impl Iterator<Item = T>, num_layers: usize) -> Option<Self> {
        let out = Self::take_fields(&mut it, num_layers)?;
        it.next().is_none().then_some(out)
    }

    /// Like [`Encoder::from_fields`] but leaves any remaining values in `it`.
    pub fn take_fields(it: &mut impl Iterator<Item = T>, num_layers: usize) -> Option<Self> {
        let token_embeddings = it.next()?;
        let position_embeddings = it.next()?;
        let embed_ln_gain = it.next()?;
        let embed_ln_bias = it.next()?;
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            layers.push(Layer::from_fields(it.by_ref().take(16))?);
        }
        let mlm_bias = it.next()?;
        Some(Self {
            token_embeddings,
            position_embeddings,
            embed_ln_gain,
            embed_ln_bias,
            layers,
            mlm_bias,
        })
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> Encoder<U> {
        Encoder::from_fields(self.fields().into_iter().map(&mut f), self.layers.len())
            .expect("same structure")
    }
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let token_embeddings = Tensor::randn(&[config.vocab_size, d], INIT_STD, rng);
        let position_embeddings = Tensor::randn(&[config.max_seq_len, d], INIT_STD, rng);
        let layers = (0..config.num_layers)
            .map(|_| Layer::init(d, config.attention_dim, config.ffn_dim, rng))
            .collect();
        Ok(Self {
            token_embeddings,
            position_embeddings,
            embed_ln_gain: Tensor::ones(&[d]),
            embed_ln_bias: Tensor::zeros(&[d]),
            layers,
            mlm_bias: Tensor::zeros(&[config.vocab_size]),
        })
    }

    /// Expected `(name, shape)` layout for `config`.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.hidden_dim;
        let mut out = vec![
            ("embeddings.token".to_string(), vec![config.vocab_size, d]),
            ("embeddings.position".to_string(), vec![config.max_seq_len, d]),
            ("embeddings.ln_gain".to_string(), vec![d]),
            ("embeddings.ln_bias".to_string(), vec![d]),
        ];
        for i in 0..config.num_layers {
            let shapes = Layer::shapes(d, config.attention_dim, config.ffn_dim);
            for (name, shape) in Layer::<Tensor>::FIELD_NAMES.iter().zip(shapes) {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("mlm.bias".to_string(), vec![config.vocab_size]));
        out
    }

    /// Checks that every tensor has the shape `config` implies and is finite.
    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        let expected = Self::expected_shapes(config);
        let named = self.named();
        if expected.len() != named.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(&named) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Validation(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.fields().iter().map(|t| t.numel()).sum()
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> EncoderVars {
        self.map(|t| {
            if trainable {
                tape.leaf_ref(t)
            } else {
                tape.constant_ref(t)
            }
        })
    }
}

/// A padded batch of token sequences laid out as `batch * seq_len` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    seq_len: usize,
}

impl TokenBatch {
    /// Pads every sequence with PAD to the longest one.
    pub fn new(sequences: &[Vec<u32>], config: &EncoderConfig) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        if seq_len > config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of length {seq_len} exceeds max_seq_len {}",
                config.max_seq_len
            )));
        }
        let mut ids = Vec::with_capacity(sequences.len() * seq_len);
        let mut lengths = Vec::with_capacity(sequences.len());
        for seq in sequences {
            if seq.is_empty() {
                return Err(Error::Input("empty token sequence".into()));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= config.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
            ids.extend(seq.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat_n(PAD_ID as usize, seq_len - seq.len()));
            lengths.push(seq.len());
        }
        Ok(Self {
            ids,
            lengths,
            seq_len,
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Flat row index of position `pos` in sequence `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq_len + pos
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch()).map(|b| self.row(b, 0)).collect()
    }

    fn attention_layout(&self, config: &EncoderConfig, head_dim: usize) -> AttentionLayout {
        AttentionLayout {
            batch: self.batch(),
            seq_len: self.seq_len,
            heads: config.num_heads,
            head_dim,
            lengths: self.lengths.clone(),
        }
    }
}

/// Hidden states of every layer: index 0 is the embedding output, index `n`
/// the output of layer `n`. Each is `[batch * seq_len, hidden_dim]`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub hidden_states: Vec<Var>,
}

fn dropout(tape: &mut Tape<'_>, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let numel = tape.value(x).numel();
    let mask: Vec<f64> = (0..numel)
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    Ok(tape.mul(x, mask)?)
}

/// Token + position embeddings followed by layernorm.
pub fn embed(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &TokenBatch,
    dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    let positions: Vec<usize> = (0..batch.batch())
        .flat_map(|_| 0..batch.seq_len())
        .collect();
    let tok = tape.gather_rows(vars.token_embeddings, batch.ids())?;
    let pos = tape.gather_rows(vars.position_embeddings, &positions)?;
    let sum = tape.add(tok, pos)?;
    let x = tape.layer_norm(sum, vars.embed_ln_gain, vars.embed_ln_bias, LAYER_NORM_EPS)?;
    dropout(tape, x, config.dropout_p, dropout_rng)
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// One post-layernorm transformer layer, optionally width-sliced.
pub fn layer_forward(
    tape: &mut Tape<'_>,
    layer: &Layer<Var>,
    x: Var,
    config: &EncoderConfig,
    width: Option<&WidthSpec>,
    batch: &TokenBatch,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    let sliced = width.filter(|w| !w.is_full(config));
    let (wq, bq, wk, bk, wv, bv, wo, head_dim) = match sliced {
        Some(w) => {
            let cols = w.attention_columns(config);
            (
                tape.select_cols(layer.wq, &cols)?,
                tape.select_cols(layer.bq, &cols)?,
                tape.select_cols(layer.wk, &cols)?,
                tape.select_cols(layer.bk, &cols)?,
                tape.select_cols(layer.wv, &cols)?,
                tape.select_cols(layer.bv, &cols)?,
                tape.gather_rows(layer.wo, &cols)?,
                w.head_dim(config),
            )
        }
        None => (
            layer.wq,
            layer.bq,
            layer.wk,
            layer.bk,
            layer.wv,
            layer.bv,
            layer.wo,
            config.head_dim(),
        ),
    };
    let (ffn_in, ffn_in_bias, ffn_out) = match sliced {
        Some(w) if w.ffn_active != config.ffn_dim => (
            tape.narrow_cols(layer.ffn_in, w.ffn_active)?,
            tape.narrow_cols(layer.ffn_in_bias, w.ffn_active)?,
            tape.narrow_rows(layer.ffn_out, w.ffn_active)?,
        ),
        _ => (layer.ffn_in, layer.ffn_in_bias, layer.ffn_out),
    };

    let q = linear(tape, x, wq, bq)?;
    let k = linear(tape, x, wk, bk)?;
    let v = linear(tape, x, wv, bv)?;
    let attn = tape.attention(q, k, v, batch.attention_layout(config, head_dim))?;
    let attn_out = linear(tape, attn, wo, layer.bo)?;
    let attn_out = dropout(tape, attn_out, config.dropout_p, dropout_rng.as_deref_mut())?;
    let res1 = tape.add(x, attn_out)?;
    let h = tape.layer_norm(res1, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;

    let inner = linear(tape, h, ffn_in, ffn_in_bias)?;
    let act = tape.gelu(inner)?;
    let ffn = linear(tape, act, ffn_out, layer.ffn_out_bias)?;
    let ffn = dropout(tape, ffn, config.dropout_p, dropout_rng)?;
    let res2 = tape.add(h, ffn)?;
    Ok(tape.layer_norm(res2, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?)
}

/// Runs the first `depth` layers at the given width (full width when `None`).
///
/// Passing a dropout stream puts the encoder in training mode.
pub fn forward(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &TokenBatch,
    width: Option<&WidthSpec>,
    depth: usize,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<ForwardTrace> {
    if depth > vars.layers.len() {
        return Err(Error::Usage(format!(
            "depth {depth} exceeds {} layers",
            vars.layers.len()
        )));
    }
    if let Some(w) = width {
        w.validate(config)?;
    }
    let mut hidden_states = Vec::with_capacity(depth + 1);
    let mut x = embed(tape, vars, config, batch, dropout_rng.as_deref_mut())?;
    hidden_states.push(x);
    for layer in &vars.layers[..depth] {
        x = layer_forward(tape, layer, x, config, width, batch, dropout_rng.as_deref_mut())?;
        hidden_states.push(x);
    }
    Ok(ForwardTrace { hidden_states })
}

/// Pools `[batch * seq_len, d]` hidden rows into `[batch, d]`.
pub fn pool(tape: &mut Tape<'_>, hidden: Var, batch: &TokenBatch, mode: PoolMode) -> Result<Var> {
    if let Some(b) = batch.lengths().iter().position(|&l| l == 0) {
        return Err(Error::Input(format!("sequence {b} has no real tokens")));
    }
    match mode {
        PoolMode::Cls => Ok(tape.gather_rows(hidden, &batch.cls_rows())?),
        PoolMode::Mean => {
            let segments: Vec<(usize, usize)> = batch
                .lengths()
                .iter()
                .enumerate()
                .map(|(b, &len)| (batch.row(b, 0), len))
                .collect();
            Ok(tape.segment_mean(hidden, &segments)?)
        }
    }
}

/// First `d` columns of a pooled embedding matrix.
pub fn slice_embedding(tape: &mut Tape<'_>, v: Var, d: usize) -> Result<Var> {
    let width = tape.value(v).cols();
    if d == 0 || d > width {
        return Err(Error::Usage(format!(
            "embedding dim {d} outside [1, {width}]"
        )));
    }
    if d == width {
        return Ok(v);
    }
    Ok(tape.narrow_cols(v, d)?)
}

/// Pools a single `[len, d]` matrix under an arbitrary padding mask.
pub fn pool_rows(rows: &Tensor, mask: &[bool], mode: PoolMode) -> Result<Tensor> {
    if mask.len() != rows.rows() {
        return Err(Error::Usage(format!(
            "mask of length {} for {} rows",
            mask.len(),
            rows.rows()
        )));
    }
    let real: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if real.is_empty() {
        return Err(Error::Input("all positions are padding".into()));
    }
    let d = rows.cols();
    match mode {
        PoolMode::Cls => Ok(Tensor::vector(rows.row(0).to_vec())),
        PoolMode::Mean => {
            let mut acc = vec![0.0; d];
            for &i in &real {
                for (a, v) in acc.iter_mut().zip(rows.row(i)) {
                    *a += v;
                }
            }
            Ok(Tensor::vector(
                acc.into_iter().map(|v| v / real.len() as f64).collect(),
            ))
        }
    }
}
