mod common;

use common::{lively_params, reference_forward};
use proptest::prelude::*;
use starbucks_core::data::{gen_synthetic, SyntheticTaskSpec, MASK_ID};
use starbucks_core::encoder::{EncoderConfig, EncoderParams, TokenBatch};
use starbucks_core::smae::{
    encode_and_project, mask, masked_targets, mlm_logits, smae_losses, tokenize_corpus, MaskedSample, SmaeConfig,
    SmaeParams, SmaeTrainer,
};
use starbucks_core::subnetworks::{default_ladder, entry_hidden_states, Axis, Ladder};
use starbucks_tensor::{grad_check, Rng, Tape, Tensor, TensorError};

fn tiny() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 20,
        max_seq_len: 8,
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        attention_dim: 8,
        ffn_dim: 12,
        dropout_p: 0.0,
    }
}

const SEQS: [&[u32]; 3] = [&[1, 5, 6, 7, 8], &[1, 9, 10], &[1, 11, 12, 13, 14, 15, 16]];

fn samples(rng: &mut Rng, p: f64) -> Vec<MaskedSample> {
    SEQS.iter().map(|x| mask(x, p, rng).unwrap()).collect()
}

fn lively_smae(config: &EncoderConfig, seed: u64) -> SmaeParams<Tensor> {
    let enc = lively_params(config, seed);
    let mut p = SmaeParams::init(enc, config, &mut Rng::new(seed + 100));
    for (t, s) in p.decoder.fields_mut().into_iter().zip(lively_params(config, seed + 1).layers[0].fields()) {
        *t = s.clone();
    }
    p
}

fn losses_of(params: &SmaeParams<Tensor>, cfg: &EncoderConfig, ladder: &Ladder, enc: &[MaskedSample], dec: &[MaskedSample]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let l = smae_losses(&mut tape, &vars, cfg, &ladder.entries, enc, dec, None).unwrap();
    let val = |v| tape.value(v).item().unwrap();
    (val(l.total), l.enc.iter().map(|&v| val(v)).collect(), l.dec.iter().map(|&v| val(v)).collect())
}

#[test]
fn smae_gradient_matches_finite_differences() {
    let config = tiny();
    for axis in [Axis::Depth, Axis::Width] {
        let ladder = default_ladder(&config, axis, 2).unwrap();
        let params = lively_smae(&config, 3);
        let mut rng = Rng::new(11);
        let enc = samples(&mut rng, 0.3);
        let dec = samples(&mut rng, 0.5);
        let flat: Vec<_> = params.fields().into_iter().cloned().collect();
        let report = grad_check(
            |tape, vars| {
                let v = SmaeParams::from_fields(vars.iter().copied(), config.num_layers).unwrap();
                let l = smae_losses(tape, &v, &config, &ladder.entries, &enc, &dec, None)
                    .map_err(|e| TensorError::Usage(e.to_string()))?;
                Ok(l.total)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{axis:?}: {report:?}");
    }
}

#[test]
fn zero_weights_give_uniform_predictions() {
    let cfg = tiny();
    let mut params = SmaeParams::init(EncoderParams::init(&cfg, &mut Rng::new(0)).unwrap(), &cfg, &mut Rng::new(1));
    for t in params.fields_mut() {
        t.data_mut().fill(0.0);
    }
    let ladder = default_ladder(&cfg, Axis::Depth, 2).unwrap();
    let mut rng = Rng::new(2);
    let (enc, dec) = (samples(&mut rng, 0.3), samples(&mut rng, 0.5));
    let (total, e, d) = losses_of(&params, &cfg, &ladder, &enc, &dec);
    let ln_v = (cfg.vocab_size as f64).ln();
    for v in e.iter().chain(&d) {
        assert!((v - ln_v).abs() < 1e-12);
    }
    assert!((total - 2.0 * ln_v).abs() < 1e-12);
}

#[test]
fn total_is_the_mean_of_single_entry_recomputations() {
    let cfg = tiny();
    let params = lively_smae(&cfg, 7);
    for axis in [Axis::Depth, Axis::Width] {
        let ladder = default_ladder(&cfg, axis, 2).unwrap();
        let mut rng = Rng::new(5);
        let (enc, dec) = (samples(&mut rng, 0.3), samples(&mut rng, 0.5));
        let (total, _, _) = losses_of(&params, &cfg, &ladder, &enc, &dec);
        let mut sum = 0.0;
        for entry in &ladder.entries {
            let single = Ladder { axis, entries: vec![entry.clone()] };
            let (t, e, d) = losses_of(&params, &cfg, &single, &enc, &dec);
            assert!((t - (e[0] + d[0])).abs() < 1e-12);
            sum += t;
        }
        assert!((total - sum / ladder.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn encoder_loss_matches_a_direct_softmax_oracle() {
    let cfg = tiny();
    let params = lively_smae(&cfg, 9);
    let ladder = default_ladder(&cfg, Axis::Depth, 2).unwrap();
    let mut rng = Rng::new(8);
    let (enc, dec) = (samples(&mut rng, 0.3), samples(&mut rng, 0.5));
    let (_, e, _) = losses_of(&params, &cfg, &ladder, &enc, &dec);
    let w = &params.projection;
    for (entry, got) in ladder.entries.iter().zip(e) {
        let d = entry.embed_dim;
        let mut nll = 0.0;
        let mut count = 0;
        for s in &enc {
            let hidden = reference_forward(&params.encoder, &cfg, &s.input_ids, entry.depth, None);
            for &i in &s.mask_set {
                // project the first d dims through the first d rows of W
                let proj: Vec<f64> = (0..cfg.hidden_dim)
                    .map(|c| (0..d).map(|r| hidden[i][r] * w.row(r)[c]).sum())
                    .collect();
                let logits: Vec<f64> = (0..cfg.vocab_size)
                    .map(|v| {
                        params.encoder.mlm_bias.data()[v]
                            + proj.iter().zip(params.encoder.token_embeddings.row(v)).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                nll += lse - logits[s.labels[i].unwrap() as usize];
                count += 1;
            }
        }
        assert!((got - nll / count as f64).abs() < 1e-10, "{got} vs {}", nll / count as f64);
    }
}

#[test]
fn identity_projection_passes_the_cls_state_through() {
    let cfg = tiny();
    let params = lively_smae(&cfg, 1);
    let seqs: Vec<Vec<u32>> = SEQS.iter().map(|s| s.to_vec()).collect();
    let tokens = TokenBatch::new(&seqs, &cfg).unwrap();
    let full = default_ladder(&cfg, Axis::Depth, 1).unwrap().entries;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let h = entry_hidden_states(&mut tape, &vars.encoder, &cfg, &tokens, &full, None).unwrap()[0];
    let cls_rows = tokens.cls_rows();
    let (cls, _) = encode_and_project(&mut tape, h, vars.projection, cfg.hidden_dim, &cls_rows, &[1]).unwrap();
    let raw = tape.value(h).select_rows(&cls_rows).unwrap();
    assert!(tape.value(cls).max_abs_diff(&raw) < 1e-15);

    // d = 1: a rank-one outer product of the scalar column with W's first row
    let (cls1, _) = encode_and_project(&mut tape, h, vars.projection, 1, &cls_rows, &[1]).unwrap();
    for (b, &r) in cls_rows.iter().enumerate() {
        let x = tape.value(h).row(r)[0];
        for c in 0..cfg.hidden_dim {
            let expect = x * params.projection.row(0)[c];
            assert!((tape.value(cls1).row(b)[c] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn projection_receives_gradient_from_both_losses() {
    let cfg = tiny();
    let mut params = lively_smae(&cfg, 4);
    // a non-identity W so both paths are generic
    params.projection = Tensor::randn(&[8, 8], 0.5, &mut Rng::new(3));
    let ladder = default_ladder(&cfg, Axis::Depth, 2).unwrap();
    let mut rng = Rng::new(6);
    let (enc, dec) = (samples(&mut rng, 0.3), samples(&mut rng, 0.5));
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let l = smae_losses(&mut tape, &vars, &cfg, &ladder.entries, &enc, &dec, None).unwrap();
    for root in [l.enc[0], l.dec[0]] {
        let g = tape.backward(root).unwrap();
        let gw = g.get_or_zeros(&tape, vars.projection);
        assert!(gw.data().iter().any(|&v| v.abs() > 1e-8));
    }

    // finite-difference confirmation on the decoder path alone
    let dec_loss = |w: &Tensor| {
        let mut p = params.clone();
        p.projection = w.clone();
        losses_of(&p, &cfg, &ladder, &enc, &dec).2[0]
    };
    let h = 1e-5;
    let mut changed = false;
    for k in 0..2 {
        let (mut plus, mut minus) = (params.projection.clone(), params.projection.clone());
        plus.data_mut()[k] += h;
        minus.data_mut()[k] -= h;
        changed |= ((dec_loss(&plus) - dec_loss(&minus)) / (2.0 * h)).abs() > 1e-8;
    }
    assert!(changed);
}

#[test]
fn mlm_head_is_tied_to_token_embeddings() {
    let cfg = tiny();
    let params = lively_smae(&cfg, 2);
    let h = Tensor::randn(&[3, 8], 1.0, &mut Rng::new(0));
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let hv = tape.constant(h.clone());
    let logits = mlm_logits(&mut tape, &vars.encoder, hv).unwrap();
    for r in 0..3 {
        for v in 0..cfg.vocab_size {
            let expect: f64 = params.encoder.mlm_bias.data()[v]
                + h.row(r).iter().zip(params.encoder.token_embeddings.row(v)).map(|(a, b)| a * b).sum::<f64>();
            assert!((tape.value(logits).row(r)[v] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn monte_carlo_mask_rate() {
    let x: Vec<u32> = std::iter::once(1).chain((0..99).map(|i| 4 + i % 16)).collect();
    let mut rng = Rng::new(42);
    let mut masked = 0usize;
    let draws = 100_000;
    for _ in 0..draws {
        masked += mask(&x, 0.3, &mut rng).unwrap().mask_set.len();
    }
    let rate = masked as f64 / (draws * 99) as f64;
    assert!((0.29..=0.31).contains(&rate), "{rate}");
}

proptest! {
    #[test]
    fn masks_touch_only_real_tokens(len in 2usize..30, p in 0.01f64..0.99, seed in any::<u64>()) {
        let x: Vec<u32> = std::iter::once(1).chain((1..len).map(|i| 4 + (i % 7) as u32)).collect();
        let s = mask(&x, p, &mut Rng::new(seed)).unwrap();
        prop_assert!(!s.mask_set.is_empty());
        prop_assert_eq!(s.input_ids[0], 1);
        for i in 0..len {
            let masked = s.mask_set.contains(&i);
            prop_assert_eq!(s.labels[i].is_some(), masked);
            prop_assert_eq!(s.input_ids[i] == MASK_ID, masked);
            if masked {
                prop_assert_eq!(s.labels[i], Some(x[i]));
            }
        }
    }

    #[test]
    fn masked_targets_follow_batch_rows(seed in any::<u64>()) {
        let cfg = tiny();
        let ss = samples(&mut Rng::new(seed), 0.4);
        let ids: Vec<Vec<u32>> = ss.iter().map(|s| s.input_ids.clone()).collect();
        let tokens = TokenBatch::new(&ids, &cfg).unwrap();
        let (rows, labels) = masked_targets(&ss, &tokens);
        for (r, l) in rows.iter().zip(labels) {
            let (b, pos) = (r / tokens.seq_len(), r % tokens.seq_len());
            prop_assert_eq!(ss[b].labels[pos], Some(l as u32));
        }
    }
}

#[test]
fn decoder_masking_must_exceed_encoder_masking() {
    let cfg = tiny();
    let mut c = SmaeConfig::new(default_ladder(&cfg, Axis::Depth, 2).unwrap());
    c.p_dec = 0.3;
    assert!(c.validate(&cfg).is_err());
}

fn synthetic_trainer_losses(seed: u64, lr: f64) -> (Vec<f64>, EncoderParams, EncoderParams) {
    let data = gen_synthetic(&SyntheticTaskSpec { seed, ..Default::default() }).unwrap();
    let cfg = EncoderConfig {
        vocab_size: data.vocab.len(),
        max_seq_len: 12,
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        attention_dim: 16,
        ffn_dim: 32,
        dropout_p: 0.0,
    };
    let corpus = tokenize_corpus(&data.corpus, &data.vocab, cfg.max_seq_len);
    assert!(corpus.len() >= 1000);
    let mut smae = SmaeConfig::new(default_ladder(&cfg, Axis::Depth, 2).unwrap());
    smae.optim.batch_size = 20;
    smae.optim.epochs = 4;
    smae.optim.lr = lr;
    smae.seed = seed;
    let init = EncoderParams::init(&cfg, &mut Rng::new(seed)).unwrap();
    let mut t = SmaeTrainer::new(cfg, smae, init.clone(), &corpus[..1000]).unwrap();
    let losses: Vec<f64> = t.run(|_| {}).unwrap().iter().map(|r| r.total).collect();
    (losses, init, t.finish().0)
}

#[test]
fn pretraining_loss_decreases_over_200_steps() {
    let mut deltas: Vec<f64> = (0..3)
        .map(|seed| {
            let (losses, _, _) = synthetic_trainer_losses(seed, 2e-3);
            assert_eq!(losses.len(), 200);
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            mean(&losses[190..]) - mean(&losses[..10])
        })
        .collect();
    deltas.sort_by(f64::total_cmp);
    assert!(deltas[1] < 0.0, "{deltas:?}");
}

#[test]
fn zero_learning_rate_keeps_the_encoder() {
    let (_, init, after) = synthetic_trainer_losses(0, 0.0);
    assert_eq!(init, after);
}
