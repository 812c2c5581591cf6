#![allow(dead_code)]

pub mod oracles;

use starbucks_core::encoder::{EncoderConfig, EncoderParams, WidthSpec};
use starbucks_tensor::{Rng, Tensor};

pub fn config(num_layers: usize, hidden: usize, heads: usize, ffn: usize, vocab: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab,
        max_seq_len: 12,
        num_layers,
        hidden_dim: hidden,
        num_heads: heads,
        attention_dim: hidden,
        ffn_dim: ffn,
        dropout_p: 0.0,
    }
}

/// Parameters with every tensor redrawn at unit-ish scale so that layers
/// actually mix information (the 0.02 default makes most outputs nearly equal).
pub fn lively_params(config: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut rng = Rng::new(seed);
    let mut p = EncoderParams::init(config, &mut rng).unwrap();
    for t in p.fields_mut() {
        let scale = if t.shape().len() == 2 { 0.4 } else { 0.1 };
        let base = if t.shape().len() == 1 && t.data().iter().all(|&v| v == 1.0) { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = base + scale * rng.normal();
        }
    }
    p
}

pub fn random_sequences(rng: &mut Rng, count: usize, vocab: usize, max_len: usize) -> Vec<Vec<u32>> {
    (0..count)
        .map(|_| {
            let len = 1 + rng.below(max_len - 1);
            let mut s = vec![1u32];
            s.extend((0..len).map(|_| 4 + rng.below(vocab - 4) as u32));
            s
        })
        .collect()
}

fn row(t: &Tensor, r: usize) -> &[f64] {
    t.row(r)
}

fn layer_norm(x: &mut [f64], g: &[f64], b: &[f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-12).sqrt();
    for (i, v) in x.iter_mut().enumerate() {
        *v = (*v - mean) * inv * g[i] + b[i];
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// `y[j] = Σ_i x[i] · w[i, cols[j]] + b[cols[j]]`
fn project(x: &[f64], w: &Tensor, b: &Tensor, cols: &[usize]) -> Vec<f64> {
    cols.iter()
        .map(|&c| b.data()[c] + x.iter().enumerate().map(|(i, xi)| xi * row(w, i)[c]).sum::<f64>())
        .collect()
}

/// Straight-line single-sequence forward used as an oracle: returns the
/// hidden states after `depth` layers, one row per token.
pub fn reference_forward(
    p: &EncoderParams,
    config: &EncoderConfig,
    seq: &[u32],
    depth: usize,
    width: Option<WidthSpec>,
) -> Vec<Vec<f64>> {
    let d = config.hidden_dim;
    let full_hd = config.attention_dim / config.num_heads;
    let (ffn_active, hd) = match width {
        Some(w) => (w.ffn_active, w.attn_active / config.num_heads),
        None => (config.ffn_dim, full_hd),
    };
    let heads = config.num_heads;
    let cols: Vec<usize> = (0..heads).flat_map(|h| (0..hd).map(move |j| h * full_hd + j)).collect();
    let ffn_cols: Vec<usize> = (0..ffn_active).collect();

    let mut x: Vec<Vec<f64>> = seq
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut v: Vec<f64> = row(&p.token_embeddings, t as usize)
                .iter()
                .zip(row(&p.position_embeddings, i))
                .map(|(a, b)| a + b)
                .collect();
            layer_norm(&mut v, p.embed_ln_gain.data(), p.embed_ln_bias.data());
            v
        })
        .collect();
    for layer in &p.layers[..depth] {
        let q: Vec<Vec<f64>> = x.iter().map(|r| project(r, &layer.wq, &layer.bq, &cols)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| project(r, &layer.wk, &layer.bk, &cols)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| project(r, &layer.wv, &layer.bv, &cols)).collect();
        let n = x.len();
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut ctx = vec![0.0; cols.len()];
            for h in 0..heads {
                let range = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        q[i][range.clone()].iter().zip(&k[j][range.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for c in range.clone() {
                        ctx[c] += e[j] / z * v[j][c];
                    }
                }
            }
            let mut h1: Vec<f64> = (0..d)
                .map(|o| {
                    x[i][o]
                        + layer.bo.data()[o]
                        + cols.iter().enumerate().map(|(ci, &c)| ctx[ci] * row(&layer.wo, c)[o]).sum::<f64>()
                })
                .collect();
            layer_norm(&mut h1, layer.ln1_gain.data(), layer.ln1_bias.data());
            let inner: Vec<f64> = project(&h1, &layer.ffn_in, &layer.ffn_in_bias, &ffn_cols)
                .into_iter()
                .map(gelu)
                .collect();
            let mut h2: Vec<f64> = (0..d)
                .map(|o| {
                    h1[o]
                        + layer.ffn_out_bias.data()[o]
                        + inner.iter().enumerate().map(|(u, a)| a * row(&layer.ffn_out, u)[o]).sum::<f64>()
                })
                .collect();
            layer_norm(&mut h2, layer.ln2_gain.data(), layer.ln2_bias.data());
            next.push(h2);
        }
        x = next;
    }
    x
}
