//! The ladder of nested sub-networks, standalone thin-model materialization
//! and hybrid score fusion.

use serde::{Deserialize, Serialize};
use starbucks_tensor::{kernels, Rng, Tape, Tensor, Var};

use crate::encoder::{
    self, EncoderConfig, EncoderParams, EncoderVars, PoolMode, TokenBatch, WidthSpec,
};
use crate::error::{Error, Result};

pub const ENTRY_NAMES: [&str; 6] = ["Demi", "Short", "Tall", "Grande", "Venti", "Trenta"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Depth,
    Width,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderEntry {
    pub name: String,
    pub depth: usize,
    pub width: WidthSpec,
    pub embed_dim: usize,
}

impl LadderEntry {
    pub fn full(config: &EncoderConfig) -> Self {
        Self {
            name: "Trenta".into(),
            depth: config.num_layers,
            width: config.full_width(),
            embed_dim: config.hidden_dim,
        }
    }

    pub fn is_full(&self, config: &EncoderConfig) -> bool {
        self.depth == config.num_layers
            && self.width.is_full(config)
            && self.embed_dim == config.hidden_dim
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.depth == 0 || self.depth > config.num_layers {
            return Err(Error::Config(format!(
                "entry {}: depth {} outside [1, {}]",
                self.name, self.depth, config.num_layers
            )));
        }
        self.width.validate(config)?;
        if self.embed_dim == 0 || self.embed_dim > config.hidden_dim {
            return Err(Error::Config(format!(
                "entry {}: embed_dim {} outside [1, {}]",
                self.name, self.embed_dim, config.hidden_dim
            )));
        }
        Ok(())
    }

    /// Width to pass to the encoder: `None` for the full width.
    pub fn width_arg(&self, config: &EncoderConfig) -> Option<&WidthSpec> {
        (!self.width.is_full(config)).then_some(&self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ladder {
    pub axis: Axis,
    pub entries: Vec<LadderEntry>,
}

impl Ladder {
    /// Checks nesting: entries strictly grow along the active axis and the
    /// last entry is the full model.
    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        let Some(last) = self.entries.last() else {
            return Err(Error::Config("ladder has no entries".into()));
        };
        for e in &self.entries {
            e.validate(config)?;
            match self.axis {
                Axis::Depth if !e.width.is_full(config) => {
                    return Err(Error::Config(format!(
                        "depth ladder entry {} must use the full width",
                        e.name
                    )))
                }
                Axis::Width if e.depth != config.num_layers => {
                    return Err(Error::Config(format!(
                        "width ladder entry {} must use all {} layers",
                        e.name, config.num_layers
                    )))
                }
                _ => {}
            }
        }
        for pair in self.entries.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let grows = match self.axis {
                Axis::Depth => b.depth > a.depth,
                Axis::Width => {
                    b.width.ffn_active > a.width.ffn_active
                        && b.width.attn_active > a.width.attn_active
                }
            };
            if !grows || b.embed_dim <= a.embed_dim {
                return Err(Error::Config(format!(
                    "ladder entries {} and {} are not strictly increasing",
                    a.name, b.name
                )));
            }
        }
        if !last.is_full(config) {
            return Err(Error::Config(format!(
                "last ladder entry {} is not the full model",
                last.name
            )));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&LadderEntry> {
        self.entries.iter().find(|e| e.name.eq_ignore_ascii_case(name))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn nearest_multiple(value: usize, numer: usize, denom: usize, step: usize) -> usize {
    // round(value * numer / denom / step) * step, ties up, in integers
    let scaled = value * numer;
    let unit = denom * step;
    ((2 * scaled + unit) / (2 * unit)) * step
}

/// Geometric ladder of `len` entries along `axis`.
///
/// Depth entry `i` uses `N·i/len` layers; width entry `i` uses `ffn·i/len`
/// FFN units and the multiple of `H` nearest to `A·i/len` attention dims.
/// Embedding dims halve from the largest power of two `P < D`: entry `i < len`
/// uses `P / 2^(len−1−i)` and the last entry uses `D` (so 32..512, 768 for
/// `D = 768`, and `D / 2^(len−i)` whenever `D` is a power of two).
pub fn default_ladder(config: &EncoderConfig, axis: Axis, len: usize) -> Result<Ladder> {
    config.validate()?;
    if len == 0 || len > ENTRY_NAMES.len() {
        return Err(Error::Config(format!(
            "ladder length {len} outside [1, {}]",
            ENTRY_NAMES.len()
        )));
    }
    if config.hidden_dim < 1 << (len - 1) {
        return Err(Error::Config(format!(
            "hidden_dim {} is too small for {len} nested embedding dims",
            config.hidden_dim
        )));
    }
    match axis {
        Axis::Depth if !config.num_layers.is_multiple_of(len) => {
            return Err(Error::Config(format!(
                "num_layers {} is not divisible by {len}; give an explicit ladder",
                config.num_layers
            )))
        }
        Axis::Width if !config.ffn_dim.is_multiple_of(len) => {
            return Err(Error::Config(format!(
                "ffn_dim {} is not divisible by {len}; give an explicit ladder",
                config.ffn_dim
            )))
        }
        _ => {}
    }
    let names = &ENTRY_NAMES[ENTRY_NAMES.len() - len..];
    // largest power of two strictly below D
    let below = 1usize << (config.hidden_dim - 1).max(1).ilog2();
    let entries = (1..=len)
        .map(|i| {
            let embed_dim = if i == len {
                config.hidden_dim
            } else {
                below >> (len - 1 - i)
            };
            let (depth, width) = match axis {
                Axis::Depth => (config.num_layers * i / len, config.full_width()),
                Axis::Width => (
                    config.num_layers,
                    WidthSpec {
                        ffn_active: config.ffn_dim * i / len,
                        attn_active: if i == len {
                            config.attention_dim
                        } else {
                            nearest_multiple(config.attention_dim, i, len, config.num_heads)
                        },
                    },
                ),
            };
            LadderEntry {
                name: names[i - 1].to_string(),
                depth,
                width,
                embed_dim,
            }
        })
        .collect();
    let ladder = Ladder { axis, entries };
    ladder
        .validate(config)
        .map_err(|e| Error::Config(format!("{e}; give an explicit ladder")))?;
    Ok(ladder)
}

/// Pooled, truncated `[batch, d]` embeddings of one entry, built on a tape.
pub fn embed_subnet(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    entry: &LadderEntry,
    batch: &TokenBatch,
    pool_mode: PoolMode,
) -> Result<Var> {
    entry.validate(config)?;
    let trace = encoder::forward(
        tape,
        vars,
        config,
        batch,
        entry.width_arg(config),
        entry.depth,
        None,
    )?;
    let pooled = encoder::pool(tape, trace.hidden_states[entry.depth], batch, pool_mode)?;
    encoder::slice_embedding(tape, pooled, entry.embed_dim)
}

/// Hidden states `[rows, D]` for every entry at its depth and width. One
/// forward runs per distinct width, up to the deepest entry using it, and its
/// per-layer outputs are shared by all entries of that width.
pub fn entry_hidden_states(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    tokens: &TokenBatch,
    entries: &[LadderEntry],
    mut dropout: Option<&mut Rng>,
) -> Result<Vec<Var>> {
    let mut traces: Vec<(Option<WidthSpec>, Vec<Var>)> = Vec::new();
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        entry.validate(config)?;
        let width = entry.width_arg(config).copied();
        let idx = match traces.iter().position(|(w, _)| *w == width) {
            Some(i) => i,
            None => {
                let depth = entries
                    .iter()
                    .filter(|e| e.width_arg(config).copied() == width)
                    .map(|e| e.depth)
                    .max()
                    .unwrap_or(entry.depth);
                let trace = encoder::forward(
                    tape,
                    vars,
                    config,
                    tokens,
                    width.as_ref(),
                    depth,
                    dropout.as_deref_mut(),
                )?;
                traces.push((width, trace.hidden_states));
                traces.len() - 1
            }
        };
        out.push(traces[idx].1[entry.depth]);
    }
    Ok(out)
}

/// Inference-mode embeddings for many sequences, processed in chunks.
pub fn encode(
    params: &EncoderParams,
    config: &EncoderConfig,
    entry: &LadderEntry,
    sequences: &[Vec<u32>],
    pool_mode: PoolMode,
    chunk: usize,
) -> Result<Tensor> {
    if sequences.is_empty() {
        return Err(Error::Input("no sequences to encode".into()));
    }
    let mut data = Vec::with_capacity(sequences.len() * entry.embed_dim);
    for part in sequences.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let batch = TokenBatch::new(part, config)?;
        let v = embed_subnet(&mut tape, &vars, config, entry, &batch, pool_mode)?;
        data.extend_from_slice(tape.value(v).data());
    }
    Ok(Tensor::matrix(sequences.len(), entry.embed_dim, data)?)
}

/// A standalone encoder equal to `entry`'s view of the full model.
pub fn materialize_thin(
    params: &EncoderParams,
    config: &EncoderConfig,
    entry: &LadderEntry,
) -> Result<(EncoderParams, EncoderConfig)> {
    entry.validate(config)?;
    let mut thin_config = config.clone();
    thin_config.num_layers = entry.depth;
    thin_config.ffn_dim = entry.width.ffn_active;
    thin_config.attention_dim = entry.width.attn_active;
    thin_config.validate()?;
    let layers = params.layers[..entry.depth]
        .iter()
        .map(|layer| {
            if entry.width.is_full(config) {
                Ok(layer.clone())
            } else {
                layer.slice(config, &entry.width)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let thin = EncoderParams {
        token_embeddings: params.token_embeddings.clone(),
        position_embeddings: params.position_embeddings.clone(),
        embed_ln_gain: params.embed_ln_gain.clone(),
        embed_ln_bias: params.embed_ln_bias.clone(),
        layers,
        mlm_bias: params.mlm_bias.clone(),
    };
    Ok((thin, thin_config))
}

pub fn similarity(a: &[f64], b: &[f64], metric: Similarity) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!(
            "similarity of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot = kernels::dot(a, b);
    match metric {
        Similarity::Dot => Ok(dot),
        Similarity::Cosine => {
            let na = kernels::dot(a, a).sqrt();
            let nb = kernels::dot(b, b).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Tensor(starbucks_tensor::TensorError::Numeric {
                    op: "cosine",
                    index: if na == 0.0 { 0 } else { 1 },
                    value: 0.0,
                }));
            }
            Ok(dot / (na * nb))
        }
    }
}

/// Mean of the depth-branch and width-branch similarity scores.
pub fn hybrid_score(
    q_depth: &[f64],
    p_depth: &[f64],
    q_width: &[f64],
    p_width: &[f64],
    metric: Similarity,
) -> Result<f64> {
    if q_depth.len() != q_width.len() {
        return Err(Error::Usage(format!(
            "hybrid branches have dims {} and {}",
            q_depth.len(),
            q_width.len()
        )));
    }
    let s_depth = similarity(q_depth, p_depth, metric)?;
    let s_width = similarity(q_width, p_width, metric)?;
    Ok(0.5 * (s_depth + s_width))
}

/// Parameters an entry's sub-network actually uses: embeddings, the active
/// layers with their sliced interiors, and all layernorms.
pub fn param_count(config: &EncoderConfig, entry: &LadderEntry) -> usize {
    let d = config.hidden_dim;
    let a = entry.width.attn_active;
    let f = entry.width.ffn_active;
    let embeddings = config.vocab_size * d + config.max_seq_len * d + 2 * d;
    let per_layer = 4 * d * a + 3 * a + 2 * d * f + f + 6 * d;
    embeddings + entry.depth * per_layer
}

/// Weight-matrix parameters only (no biases, no layernorm vectors).
pub fn weight_count(config: &EncoderConfig, entry: &LadderEntry) -> usize {
    let d = config.hidden_dim;
    let per_layer = 4 * d * entry.width.attn_active + 2 * d * entry.width.ffn_active;
    config.vocab_size * d + config.max_seq_len * d + entry.depth * per_layer
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 30,
            max_seq_len: 12,
            num_layers: 6,
            hidden_dim: 64,
            num_heads: 4,
            attention_dim: 64,
            ffn_dim: 128,
            dropout_p: 0.0,
        }
    }

    #[test]
    fn bert_base_depth_ladder() {
        let l = default_ladder(&EncoderConfig::bert_base(), Axis::Depth, 6).unwrap();
        let got: Vec<(usize, usize)> = l.entries.iter().map(|e| (e.depth, e.embed_dim)).collect();
        assert_eq!(got, vec![(2, 32), (4, 64), (6, 128), (8, 256), (10, 512), (12, 768)]);
        let names: Vec<&str> = l.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ENTRY_NAMES);
    }

    #[test]
    fn bert_base_width_ladder() {
        let l = default_ladder(&EncoderConfig::bert_base(), Axis::Width, 6).unwrap();
        let ffn: Vec<usize> = l.entries.iter().map(|e| e.width.ffn_active).collect();
        let attn: Vec<usize> = l.entries.iter().map(|e| e.width.attn_active).collect();
        assert_eq!(ffn, vec![512, 1024, 1536, 2048, 2560, 3072]);
        assert_eq!(attn, vec![132, 252, 384, 516, 636, 768]);
        assert!(l.entries.iter().all(|e| e.depth == 12));
    }

    #[test]
    fn toy_depth_ladder() {
        let l = default_ladder(&toy(), Axis::Depth, 6).unwrap();
        let got: Vec<(usize, usize)> = l.entries.iter().map(|e| (e.depth, e.embed_dim)).collect();
        assert_eq!(got, vec![(1, 2), (2, 4), (3, 8), (4, 16), (5, 32), (6, 64)]);
    }

    #[test]
    fn short_ladders_keep_trenta_last() {
        let l = default_ladder(&toy(), Axis::Depth, 3).unwrap();
        let names: Vec<&str> = l.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["Grande", "Venti", "Trenta"]);
    }

    #[test]
    fn indivisible_configs_are_rejected() {
        let mut c = toy();
        c.num_layers = 4;
        assert!(matches!(default_ladder(&c, Axis::Depth, 6), Err(Error::Config(_))));
        let mut c = toy();
        c.hidden_dim = 16;
        c.attention_dim = 16;
        assert!(matches!(default_ladder(&c, Axis::Width, 6), Err(Error::Config(_))));
        let mut c = toy();
        c.ffn_dim = 100;
        assert!(matches!(default_ladder(&c, Axis::Width, 6), Err(Error::Config(_))));
    }

    #[test]
    fn ladder_validation_catches_non_nested_entries() {
        let c = toy();
        let mut l = default_ladder(&c, Axis::Depth, 6).unwrap();
        l.entries.swap(1, 2);
        assert!(l.validate(&c).is_err());
        let mut l = default_ladder(&c, Axis::Depth, 6).unwrap();
        l.entries.pop();
        assert!(l.validate(&c).is_err());
    }

    #[test]
    fn hybrid_examples() {
        let q = [1.0, 0.0];
        let h = hybrid_score(&q, &[0.2, 0.0], &q, &[0.4, 0.0], Similarity::Dot).unwrap();
        assert!((h - 0.3).abs() < 1e-15);
        let s = similarity(&q, &[0.7, 0.1], Similarity::Dot).unwrap();
        assert_eq!(hybrid_score(&q, &[0.7, 0.1], &q, &[0.7, 0.1], Similarity::Dot).unwrap(), s);
        assert!(matches!(
            hybrid_score(&q, &q, &[1.0], &[1.0], Similarity::Dot),
            Err(Error::Usage(_))
        ));
    }
}
