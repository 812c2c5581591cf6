mod common;

use common::{lively_params, oracles};
use proptest::prelude::*;
use starbucks_core::data::{self, ContrastiveBatch, RetrievalRecord, Vocab};
use starbucks_core::encoder::{Encoder, EncoderConfig, EncoderParams, PoolMode};
use starbucks_core::srl::{
    kl_divergence, srl_losses, KlDirection, LossKind, SrlConfig, SrlLossConfig, SrlTrainer, MASKED_LOGIT,
};
use starbucks_core::subnetworks::{default_ladder, Axis};
use starbucks_core::optim::ScheduleKind;
use starbucks_tensor::rng::streams;
use starbucks_tensor::{grad_check, Rng, Tape, Tensor, TensorError};

const WORDS: [&str; 16] = [
    "red", "blue", "green", "cat", "dog", "bird", "sun", "moon", "star", "tree", "leaf", "root", "sea", "sand", "rock", "wave",
];

fn vocab() -> Vocab {
    Vocab::from_words(WORDS)
}

fn toy() -> EncoderConfig {
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

fn loss_config(kind: LossKind) -> SrlLossConfig {
    SrlLossConfig {
        loss_kind: kind,
        scale: None,
        kl_temperature: 0.7,
        kl_direction: KlDirection::TeacherStudent,
        pool_mode: PoolMode::Mean,
    }
}

fn batch(in_batch: bool) -> ContrastiveBatch {
    ContrastiveBatch {
        anchors: vec![vec![1, 4, 5], vec![1, 6, 7, 8], vec![1, 9]],
        positives: vec![vec![1, 4, 5, 10], vec![1, 6, 8], vec![1, 9, 11, 12, 13]],
        hard_negatives: vec![vec![vec![1, 14, 15]], vec![vec![1, 16]], vec![vec![1, 17, 18, 19]]],
        in_batch_negatives: in_batch,
    }
}

fn to_err(e: starbucks_core::Error) -> TensorError {
    TensorError::Usage(e.to_string())
}

#[test]
fn srl_gradient_matches_finite_differences_for_both_loss_kinds() {
    let cfg = toy();
    let params = lively_params(&cfg, 21);
    let flat: Vec<Tensor> = params.fields().into_iter().cloned().collect();
    for (kind, axis, in_batch) in [
        (LossKind::InfonceDot, Axis::Depth, true),
        (LossKind::MnrlCosine, Axis::Width, true),
        (LossKind::MnrlCosine, Axis::Depth, false),
    ] {
        let ladder = default_ladder(&cfg, axis, 2).unwrap();
        let loss = loss_config(kind);
        let b = batch(in_batch);
        // teacher frozen at the starting point so the objective is a fixed function
        let teacher = {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false);
            let l = srl_losses(&mut tape, &vars, &cfg, &loss, &ladder.entries, &b, None, None).unwrap();
            tape.value(*l.entry_logits.last().unwrap()).clone()
        };
        let report = grad_check(
            |tape, vars| {
                let enc = Encoder::from_fields(vars.iter().copied(), cfg.num_layers).unwrap();
                let l = srl_losses(tape, &enc, &cfg, &loss, &ladder.entries, &b, Some(&teacher), None).map_err(to_err)?;
                Ok(l.total)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{kind:?}/{axis:?}: {report:?}");
    }
}

#[test]
fn task_loss_is_the_mean_of_recomputed_entry_losses() {
    let cfg = toy();
    let params = lively_params(&cfg, 5);
    for kind in [LossKind::InfonceDot, LossKind::MnrlCosine] {
        for in_batch in [true, false] {
            let ladder = default_ladder(&cfg, Axis::Depth, 2).unwrap();
            let b = batch(in_batch);
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false);
            let l = srl_losses(&mut tape, &vars, &cfg, &loss_config(kind), &ladder.entries, &b, None, None).unwrap();
            let oracle: f64 = ladder
                .entries
                .iter()
                .map(|e| oracles::entry_loss(&params, &cfg, e, kind, PoolMode::Mean, &b))
                .sum::<f64>()
                / ladder.len() as f64;
            let got = tape.value(l.task).item().unwrap();
            assert!((got - oracle).abs() < 1e-12, "{kind:?} in_batch={in_batch}: {got} vs {oracle}");
            let sum = tape.value(l.task).item().unwrap() + tape.value(l.kl).item().unwrap();
            assert!((tape.value(l.total).item().unwrap() - sum).abs() < 1e-15);
        }
    }
}

#[test]
fn full_entry_contributes_no_kl() {
    let t = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![MASKED_LOGIT, 0.5, 0.1]]).unwrap();
    for dir in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
        assert_eq!(kl_divergence(&t, &t, 0.3, dir).unwrap(), 0.0);
    }
}

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..4, 2usize..6).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-8.0f64..8.0, c), r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_nonnegative_and_matches_the_textbook_sum(
        (t, s) in matrix().prop_flat_map(|m| {
            let (r, c) = (m.len(), m[0].len());
            (Just(m), prop::collection::vec(prop::collection::vec(-8.0f64..8.0, c), r))
        }),
        tau in 0.05f64..3.0,
    ) {
        let tt = Tensor::from_rows(&t).unwrap();
        let st = Tensor::from_rows(&s).unwrap();
        let fwd = kl_divergence(&tt, &st, tau, KlDirection::TeacherStudent).unwrap();
        let rev = kl_divergence(&tt, &st, tau, KlDirection::StudentTeacher).unwrap();
        prop_assert!(fwd >= -1e-15 && rev >= -1e-15);
        prop_assert!((fwd - oracles::kl(&t, &s, tau)).abs() < 1e-10 * (1.0 + fwd));
        prop_assert!((rev - oracles::kl(&s, &t, tau)).abs() < 1e-10 * (1.0 + rev));
    }
}

fn records() -> Vec<RetrievalRecord> {
    let mut rng = Rng::new(3);
    let sentence = |rng: &mut Rng| -> String {
        let n = 2 + rng.below(4);
        (0..n).map(|_| WORDS[rng.below(WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    (0..12)
        .map(|_| RetrievalRecord {
            query: sentence(&mut rng),
            positive: sentence(&mut rng),
            negatives: (0..3).map(|_| sentence(&mut rng)).collect(),
        })
        .collect()
}

fn srl_config(cfg: &EncoderConfig) -> SrlConfig {
    let mut c = SrlConfig::retrieval(default_ladder(cfg, Axis::Depth, 2).unwrap());
    c.optim.batch_size = 4;
    c.optim.epochs = 2;
    c.optim.lr = 1e-3;
    c.hard_negatives = 1;
    c.seed = 9;
    c
}

#[test]
fn training_is_deterministic() {
    let cfg = toy();
    let (records, vocab) = (records(), vocab());
    let run = || {
        let params = EncoderParams::init(&cfg, &mut Rng::with_stream(1, streams::INIT)).unwrap();
        let mut t = SrlTrainer::new(cfg.clone(), srl_config(&cfg), params, &records, &vocab).unwrap();
        let recs = t.run(|_| {}).unwrap();
        (recs, t.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let cfg = toy();
    let (records, vocab) = (records(), vocab());
    let params = lively_params(&cfg, 2);
    let mut srl = srl_config(&cfg);
    srl.optim.lr = 0.0;
    srl.optim.weight_decay = 0.1;
    let mut t = SrlTrainer::new(cfg.clone(), srl, params.clone(), &records, &vocab).unwrap();
    t.run(|_| {}).unwrap();
    assert_eq!(t.params, params);
}

#[test]
fn one_step_equals_a_hand_computed_adamw_update() {
    let cfg = toy();
    let (records, vocab) = (records(), vocab());
    let params = lively_params(&cfg, 4);
    let mut srl = srl_config(&cfg);
    srl.optim.warmup_ratio = 0.0;
    srl.optim.schedule = ScheduleKind::Constant;
    srl.optim.weight_decay = 0.01;
    let lr = srl.optim.lr;

    // rebuild the trainer's first batch from the documented streams
    let order = data::epoch_batches(records.len(), 4, true, &mut Rng::with_stream(srl.seed, streams::DATA << 32)).unwrap();
    let b = data::assemble_batch(&records, &order[0], &vocab, cfg.max_seq_len, 1, true, &mut Rng::with_stream(srl.seed, streams::SAMPLING)).unwrap();
    let grads: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let l = srl_losses(&mut tape, &vars, &cfg, &srl.loss, &srl.ladder.entries, &b, None, None).unwrap();
        let g = tape.backward(l.total).unwrap();
        vars.fields().iter().map(|&&v| g.get_or_zeros(&tape, v)).collect()
    };

    let mut t = SrlTrainer::new(cfg.clone(), srl.clone(), params.clone(), &records, &vocab).unwrap();
    t.train_step().unwrap();
    let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.01);
    for ((before, after), g) in params.fields().into_iter().zip(t.params.fields()).zip(&grads) {
        let decay = if before.shape().len() >= 2 { 1.0 - lr * wd } else { 1.0 };
        for ((&p0, &p1), &gv) in before.data().iter().zip(after.data()).zip(g.data()) {
            let m_hat = (1.0 - b1) * gv / (1.0 - b1);
            let v_hat = (1.0 - b2) * gv * gv / (1.0 - b2);
            let expect = p0 * decay - lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p1 - expect).abs() < 1e-10, "{p1} vs {expect}");
        }
    }
}

#[test]
fn trainer_rejects_mismatched_inputs() {
    let cfg = toy();
    let records = records();
    let small = Vocab::from_words(["a"]);
    let params = EncoderParams::init(&cfg, &mut Rng::new(0)).unwrap();
    assert!(SrlTrainer::new(cfg.clone(), srl_config(&cfg), params.clone(), &records, &small).is_err());
    let mut bad = srl_config(&cfg);
    bad.hard_negatives = 8;
    assert!(SrlTrainer::new(cfg.clone(), bad, params.clone(), &records, &vocab()).is_err());
    let mut bad = srl_config(&cfg);
    bad.optim.batch_size = 1;
    assert!(SrlTrainer::new(cfg, bad, params, &records, &vocab()).is_err());
}
