mod common;

use common::{config, lively_params, random_sequences, reference_forward};
use proptest::prelude::*;
use starbucks_core::encoder::{
    self, EncoderConfig, EncoderParams, PoolMode, TokenBatch, WidthSpec,
};
use starbucks_tensor::{Rng, Tape, Tensor};

fn hidden(params: &EncoderParams, config: &EncoderConfig, seqs: &[Vec<u32>], depth: usize, width: Option<&WidthSpec>) -> (Tensor, TokenBatch) {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let batch = TokenBatch::new(seqs, config).unwrap();
    let trace = encoder::forward(&mut tape, &vars, config, &batch, width, depth, None).unwrap();
    (tape.value(trace.hidden_states[depth]).clone(), batch)
}

#[test]
fn batched_forward_matches_reference_loops() {
    let cfg = config(2, 8, 2, 12, 30);
    let params = lively_params(&cfg, 4);
    let seqs = random_sequences(&mut Rng::new(9), 5, 30, 10);
    for width in [None, Some(WidthSpec { ffn_active: 6, attn_active: 4 })] {
        let (h, batch) = hidden(&params, &cfg, &seqs, 2, width.as_ref());
        for (b, s) in seqs.iter().enumerate() {
            let expect = reference_forward(&params, &cfg, s, 2, width);
            for (pos, row) in expect.iter().enumerate() {
                let got = h.row(batch.row(b, pos));
                for (g, e) in got.iter().zip(row) {
                    assert!((g - e).abs() < 1e-10, "b={b} pos={pos}: {g} vs {e}");
                }
            }
        }
    }
}

#[test]
fn prefix_layers_equal_a_standalone_shallow_encoder() {
    let cfg = config(2, 8, 2, 16, 20);
    let params = lively_params(&cfg, 1);
    let mut shallow_cfg = cfg.clone();
    shallow_cfg.num_layers = 1;
    let mut shallow = params.clone();
    shallow.layers.truncate(1);
    let seqs = random_sequences(&mut Rng::new(2), 4, 20, 8);
    let (deep, _) = hidden(&params, &cfg, &seqs, 1, None);
    let (alone, _) = hidden(&shallow, &shallow_cfg, &seqs, 1, None);
    assert_eq!(deep.data(), alone.data());
}

#[test]
fn explicit_full_width_is_bitwise_the_default_path() {
    let cfg = config(3, 8, 2, 16, 20);
    let params = lively_params(&cfg, 3);
    let seqs = random_sequences(&mut Rng::new(3), 4, 20, 8);
    let (a, _) = hidden(&params, &cfg, &seqs, 3, None);
    let (b, _) = hidden(&params, &cfg, &seqs, 3, Some(&cfg.full_width()));
    assert_eq!(a.data(), b.data());
}

#[test]
fn zero_weight_layers_reduce_to_normalized_embeddings() {
    let cfg = config(2, 8, 2, 16, 20);
    let mut params = lively_params(&cfg, 5);
    for layer in &mut params.layers {
        for t in layer.fields_mut() {
            let is_gain = t.data().iter().all(|&v| v == 1.0);
            if !is_gain {
                t.data_mut().fill(0.0);
            }
        }
        layer.ln1_gain.data_mut().fill(1.0);
        layer.ln2_gain.data_mut().fill(1.0);
    }
    params.embed_ln_gain.data_mut().fill(1.0);
    params.embed_ln_bias.data_mut().fill(0.0);
    let seqs = random_sequences(&mut Rng::new(6), 3, 20, 8);
    let (h0, _) = hidden(&params, &cfg, &seqs, 0, None);
    let (h2, _) = hidden(&params, &cfg, &seqs, 2, None);
    assert!(h0.max_abs_diff(&h2) < 1e-9);
}

#[test]
fn untrained_full_model_is_not_degenerate() {
    // default init: outputs finite and rows distinguishable
    let cfg = config(2, 16, 2, 32, 40);
    let params = EncoderParams::init(&cfg, &mut Rng::new(0)).unwrap();
    let seqs = random_sequences(&mut Rng::new(1), 6, 40, 10);
    let (h, batch) = hidden(&params, &cfg, &seqs, 2, None);
    assert!(h.is_finite());
    assert_ne!(h.row(batch.row(0, 0)), h.row(batch.row(1, 0)));
}

fn pooled(params: &EncoderParams, cfg: &EncoderConfig, seqs: &[Vec<u32>], mode: PoolMode, d: Option<usize>) -> Tensor {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let batch = TokenBatch::new(seqs, cfg).unwrap();
    let trace = encoder::forward(&mut tape, &vars, cfg, &batch, None, cfg.num_layers, None).unwrap();
    let mut h = *trace.hidden_states.last().unwrap();
    if let Some(d) = d {
        h = tape.narrow_cols(h, d).unwrap();
    }
    let p = encoder::pool(&mut tape, h, &batch, mode).unwrap();
    tape.value(p).clone()
}

#[test]
fn mean_pool_matches_pool_rows_oracle() {
    let cfg = config(1, 8, 2, 16, 20);
    let params = lively_params(&cfg, 8);
    let seqs = random_sequences(&mut Rng::new(8), 4, 20, 8);
    let p = pooled(&params, &cfg, &seqs, PoolMode::Mean, None);
    let (h, batch) = hidden(&params, &cfg, &seqs, 1, None);
    for (b, s) in seqs.iter().enumerate() {
        let rows = h.select_rows(&(0..batch.seq_len()).map(|i| batch.row(b, i)).collect::<Vec<_>>()).unwrap();
        let mask: Vec<bool> = (0..batch.seq_len()).map(|i| i < s.len()).collect();
        let oracle = encoder::pool_rows(&rows, &mask, PoolMode::Mean).unwrap();
        for (x, y) in p.row(b).iter().zip(oracle.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pooling_commutes_with_truncation(seed in 0u64..1000, d in 1usize..=8, mean in any::<bool>()) {
        let cfg = config(1, 8, 2, 16, 20);
        let params = lively_params(&cfg, seed);
        let seqs = random_sequences(&mut Rng::new(seed + 1), 3, 20, 8);
        let mode = if mean { PoolMode::Mean } else { PoolMode::Cls };
        let full = pooled(&params, &cfg, &seqs, mode, None);
        let sliced_first = pooled(&params, &cfg, &seqs, mode, Some(d));
        let mut tape = Tape::new();
        let v = tape.constant(full);
        let truncated = encoder::slice_embedding(&mut tape, v, d).unwrap();
        prop_assert_eq!(tape.value(truncated).data(), sliced_first.data());
    }

    #[test]
    fn padding_does_not_leak(seed in 0u64..1000) {
        let cfg = config(2, 8, 2, 16, 20);
        let params = lively_params(&cfg, seed);
        let seqs = random_sequences(&mut Rng::new(seed), 4, 20, 10);
        for mode in [PoolMode::Cls, PoolMode::Mean] {
            let batched = pooled(&params, &cfg, &seqs, mode, None);
            for (b, s) in seqs.iter().enumerate() {
                let alone = pooled(&params, &cfg, std::slice::from_ref(s), mode, None);
                for (x, y) in batched.row(b).iter().zip(alone.data()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn config_errors_are_reported() {
    let mut cfg = config(2, 8, 3, 16, 20);
    assert!(cfg.validate().is_err());
    cfg.num_heads = 2;
    cfg.dropout_p = 1.0;
    assert!(cfg.validate().is_err());
    let cfg = config(2, 8, 2, 16, 20);
    let params = EncoderParams::init(&cfg, &mut Rng::new(0)).unwrap();
    let mut other = cfg.clone();
    other.hidden_dim = 16;
    other.attention_dim = 16;
    assert!(params.check(&other).is_err());
    assert!(TokenBatch::new(&[vec![1; 20]], &cfg).is_err());
    assert!(TokenBatch::new(&[vec![1, 99]], &cfg).is_err());
}
