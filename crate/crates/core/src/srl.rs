//! Contrastive fine-tuning over every ladder entry with KL alignment of each
//! entry's score distribution to the full model's.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use starbucks_tensor::rng::streams;
use starbucks_tensor::{Rng, Tape, Tensor, Var};

use crate::data::{self, ContrastiveBatch, RetrievalRecord, Vocab};
use crate::encoder::{self, EncoderConfig, EncoderParams, EncoderVars, PoolMode, TokenBatch};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, AdamW, OptimConfig, ScheduleKind};
use crate::persistence::Checkpoint;
use crate::subnetworks::{entry_hidden_states, Ladder, LadderEntry, Similarity};

/// Additive logit mask for candidates an anchor may not see.
pub const MASKED_LOGIT: f64 = -1e9;
pub const MNRL_SCALE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cosine scores times a fixed scale.
    MnrlCosine,
    /// Raw dot-product scores.
    InfonceDot,
}

impl LossKind {
    pub fn similarity(self) -> Similarity {
        match self {
            LossKind::MnrlCosine => Similarity::Cosine,
            LossKind::InfonceDot => Similarity::Dot,
        }
    }

    pub fn default_scale(self) -> f64 {
        match self {
            LossKind::MnrlCosine => MNRL_SCALE,
            LossKind::InfonceDot => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(full ∥ entry): the full model is the target distribution.
    TeacherStudent,
    /// KL(entry ∥ full).
    StudentTeacher,
}

/// The loss-defining subset of the SRL configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrlLossConfig {
    pub loss_kind: LossKind,
    /// Logit scale; `None` uses the loss kind's default.
    #[serde(default)]
    pub scale: Option<f64>,
    pub kl_temperature: f64,
    #[serde(default = "default_direction")]
    pub kl_direction: KlDirection,
    pub pool_mode: PoolMode,
}

fn default_direction() -> KlDirection {
    KlDirection::TeacherStudent
}

impl SrlLossConfig {
    pub fn scale(&self) -> f64 {
        self.scale.unwrap_or_else(|| self.loss_kind.default_scale())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl_temperature > 0.0 && self.kl_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "kl_temperature {} must be > 0",
                self.kl_temperature
            )));
        }
        if !(self.scale() > 0.0 && self.scale().is_finite()) {
            return Err(Error::Config(format!("scale {} must be > 0", self.scale())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrlConfig {
    pub ladder: Ladder,
    pub loss: SrlLossConfig,
    pub optim: OptimConfig,
    pub hard_negatives: usize,
    pub in_batch_negatives: bool,
    pub seed: u64,
}

impl SrlConfig {
    /// Passage-retrieval defaults: InfoNCE on dot products, 7 hard negatives.
    pub fn retrieval(ladder: Ladder) -> Self {
        Self {
            ladder,
            loss: SrlLossConfig {
                loss_kind: LossKind::InfonceDot,
                scale: None,
                kl_temperature: 1.0,
                kl_direction: KlDirection::TeacherStudent,
                pool_mode: PoolMode::Cls,
            },
            optim: OptimConfig {
                lr: 1e-4,
                weight_decay: 0.0,
                warmup_ratio: 0.1,
                schedule: ScheduleKind::Linear,
                epochs: 3,
                batch_size: 128,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                max_grad_norm: None,
            },
            hard_negatives: 7,
            in_batch_negatives: true,
            seed: 0,
        }
    }

    /// Sentence-similarity defaults: scaled cosine, no hard negatives.
    pub fn sts(ladder: Ladder) -> Self {
        let mut c = Self::retrieval(ladder);
        c.loss.loss_kind = LossKind::MnrlCosine;
        c.loss.kl_temperature = 0.3;
        c.loss.pool_mode = PoolMode::Mean;
        c.optim.lr = 5e-5;
        c.optim.epochs = 1;
        c.hard_negatives = 0;
        c
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        self.ladder.validate(config)?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.hard_negatives > data::MAX_HARD_NEGATIVES {
            return Err(Error::Config(format!(
                "hard_negatives {} exceeds {}",
                self.hard_negatives,
                data::MAX_HARD_NEGATIVES
            )));
        }
        if self.in_batch_negatives && self.optim.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 with in-batch negatives".into(),
            ));
        }
        Ok(())
    }
}

/// Pairwise `[B, C]` scores between anchor and candidate rows.
pub fn score_matrix(tape: &mut Tape<'_>, anchors: Var, candidates: Var, metric: Similarity) -> Result<Var> {
    let (a, c) = match metric {
        Similarity::Dot => (anchors, candidates),
        Similarity::Cosine => (
            tape.l2_normalize_rows(anchors)?,
            tape.l2_normalize_rows(candidates)?,
        ),
    };
    Ok(tape.matmul_nt(a, c)?)
}

/// Scaled (and optionally masked) logits.
pub fn contrastive_logits(tape: &mut Tape<'_>, scores: Var, scale: f64, mask: Option<&Tensor>) -> Result<Var> {
    let logits = tape.scale(scores, scale);
    match mask {
        Some(m) => {
            let m = tape.constant(m.clone());
            Ok(tape.add(logits, m)?)
        }
        None => Ok(logits),
    }
}

/// Mean over rows of `−log softmax(scale · scores)[target]`.
pub fn contrastive_loss(tape: &mut Tape<'_>, scores: Var, targets: &[usize], scale: f64) -> Result<Var> {
    let logits = tape.scale(scores, scale);
    Ok(tape.cross_entropy(logits, targets)?)
}

/// Row-averaged KL divergence between `softmax(teacher/τ)` (a constant) and
/// `softmax(student/τ)`, in the requested direction.
pub fn kl_to_teacher(
    tape: &mut Tape<'_>,
    teacher: &Tensor,
    student: Var,
    temperature: f64,
    direction: KlDirection,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("kl_temperature {temperature} must be > 0")));
    }
    if teacher.shape() != tape.value(student).shape() {
        return Err(Error::Usage(format!(
            "teacher shape {:?} differs from student {:?}",
            teacher.shape(),
            tape.value(student).shape()
        )));
    }
    let rows = teacher.rows() as f64;
    let t = tape.constant(teacher.clone());
    let log_t = tape.log_softmax(t, temperature)?;
    let log_s = tape.log_softmax(student, temperature)?;
    let (log_p, log_q) = match direction {
        KlDirection::TeacherStudent => (log_t, log_s),
        KlDirection::StudentTeacher => (log_s, log_t),
    };
    let p = tape.exp(log_p)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / rows))
}

/// KL between two plain score matrices (no tape).
pub fn kl_divergence(teacher: &Tensor, student: &Tensor, temperature: f64, direction: KlDirection) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let kl = kl_to_teacher(&mut tape, teacher, s, temperature, direction)?;
    Ok(tape.value(kl).item()?)
}

/// Additive mask that hides other anchors' positives and hard negatives.
pub fn own_candidates_mask(batch_size: usize, negatives_per_anchor: usize) -> Tensor {
    let c = batch_size * (1 + negatives_per_anchor);
    let mut data = vec![MASKED_LOGIT; batch_size * c];
    for i in 0..batch_size {
        data[i * c + i] = 0.0;
        for j in 0..negatives_per_anchor {
            data[i * c + batch_size + i * negatives_per_anchor + j] = 0.0;
        }
    }
    Tensor::matrix(batch_size, c, data).expect("consistent dims")
}

/// Per-step SRL loss graph.
#[derive(Clone, Debug)]
pub struct SrlLosses {
    pub task: Var,
    pub kl: Var,
    pub total: Var,
    pub entry_losses: Vec<Var>,
    /// Scaled, masked logits `[B, C]` per entry.
    pub entry_logits: Vec<Var>,
}

/// Embeds every sequence of `batch` for each entry, sharing one forward pass
/// per distinct width; returns `(anchor, candidate)` embeddings per entry.
pub fn entry_embeddings(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    entries: &[LadderEntry],
    batch: &ContrastiveBatch,
    pool_mode: PoolMode,
    dropout: Option<&mut Rng>,
) -> Result<Vec<(Var, Var)>> {
    batch.validate()?;
    let b = batch.len();
    let mut sequences: Vec<Vec<u32>> = Vec::new();
    sequences.extend(batch.anchors.iter().cloned());
    sequences.extend(batch.positives.iter().cloned());
    for negs in &batch.hard_negatives {
        sequences.extend(negs.iter().cloned());
    }
    let tokens = TokenBatch::new(&sequences, config)?;
    let anchor_rows: Vec<usize> = (0..b).collect();
    let candidate_rows: Vec<usize> = (b..sequences.len()).collect();

    let hidden = entry_hidden_states(tape, vars, config, &tokens, entries, dropout)?;
    let mut pooled: HashMap<usize, Var> = HashMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for (entry, h) in entries.iter().zip(hidden) {
        let pooled_all = match pooled.get(&h.index()) {
            Some(&v) => v,
            None => {
                let v = encoder::pool(tape, h, &tokens, pool_mode)?;
                pooled.insert(h.index(), v);
                v
            }
        };
        let sliced = encoder::slice_embedding(tape, pooled_all, entry.embed_dim)?;
        let anchors = tape.gather_rows(sliced, &anchor_rows)?;
        let candidates = tape.gather_rows(sliced, &candidate_rows)?;
        out.push((anchors, candidates));
    }
    Ok(out)
}

/// `L_S`, `L_KL` and their sum for one batch.
///
/// The teacher is the last entry (the full model). When `teacher` is `None`
/// its logits are taken from this graph and detached; passing fixed logits
/// freezes the teacher entirely, which finite-difference checks require.
pub fn srl_losses(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    loss: &SrlLossConfig,
    entries: &[LadderEntry],
    batch: &ContrastiveBatch,
    teacher: Option<&Tensor>,
    dropout: Option<&mut Rng>,
) -> Result<SrlLosses> {
    loss.validate()?;
    if entries.is_empty() {
        return Err(Error::Config("ladder has no entries".into()));
    }
    let embeddings = entry_embeddings(tape, vars, config, entries, batch, loss.pool_mode, dropout)?;
    let b = batch.len();
    let targets: Vec<usize> = (0..b).collect();
    let mask = (!batch.in_batch_negatives)
        .then(|| own_candidates_mask(b, batch.negatives_per_anchor()));
    let metric = loss.loss_kind.similarity();

    let mut entry_losses = Vec::with_capacity(entries.len());
    let mut entry_logits = Vec::with_capacity(entries.len());
    for (anchors, candidates) in embeddings {
        let scores = score_matrix(tape, anchors, candidates, metric)?;
        let logits = contrastive_logits(tape, scores, loss.scale(), mask.as_ref())?;
        entry_losses.push(tape.cross_entropy(logits, &targets)?);
        entry_logits.push(logits);
    }
    let n = entries.len() as f64;
    let loss_sum = sum_vars(tape, &entry_losses)?;
    let task = tape.scale(loss_sum, 1.0 / n);

    let teacher = match teacher {
        Some(t) => t.clone(),
        None => tape.value(*entry_logits.last().expect("nonempty")).clone(),
    };
    let mut kls = Vec::with_capacity(entries.len());
    for &logits in &entry_logits {
        kls.push(kl_to_teacher(tape, &teacher, logits, loss.kl_temperature, loss.kl_direction)?);
    }
    let kl_sum = sum_vars(tape, &kls)?;
    let kl = tape.scale(kl_sum, 1.0 / n);
    let total = tape.add(task, kl)?;
    Ok(SrlLosses {
        task,
        kl,
        total,
        entry_losses,
        entry_logits,
    })
}

pub(crate) fn sum_vars(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// One line of the loss trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub task: f64,
    pub kl: f64,
    pub total: f64,
    pub lr: f64,
}

impl std::fmt::Display for LossRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}\t{:e}\t{:e}\t{:e}\t{:e}",
            self.step, self.task, self.kl, self.total, self.lr
        )
    }
}

/// Random streams a trainer owns, in checkpoint order.
pub const TRAINER_STREAMS: [&str; 2] = ["sampling", "dropout"];

/// Resumable SRL fine-tuning loop.
pub struct SrlTrainer<'d> {
    pub config: EncoderConfig,
    pub srl: SrlConfig,
    pub params: EncoderParams,
    pub optimizer: AdamW,
    records: &'d [RetrievalRecord],
    vocab: &'d Vocab,
    step: usize,
    batches_per_epoch: usize,
    sampling: Rng,
    dropout: Rng,
    epoch_cache: Option<(usize, Vec<Vec<usize>>)>,
}

impl<'d> SrlTrainer<'d> {
    pub fn new(
        config: EncoderConfig,
        srl: SrlConfig,
        params: EncoderParams,
        records: &'d [RetrievalRecord],
        vocab: &'d Vocab,
    ) -> Result<Self> {
        config.validate()?;
        srl.validate(&config)?;
        params.check(&config)?;
        if records.is_empty() {
            return Err(Error::Input("no training records".into()));
        }
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let optimizer = AdamW::new(&srl.optim, &params.fields());
        let batches_per_epoch = records.len().div_ceil(srl.optim.batch_size);
        let sampling = Rng::with_stream(srl.seed, streams::SAMPLING);
        let dropout = Rng::with_stream(srl.seed, streams::DROPOUT);
        Ok(Self {
            config,
            srl,
            params,
            optimizer,
            records,
            vocab,
            step: 0,
            batches_per_epoch,
            sampling,
            dropout,
            epoch_cache: None,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.batches_per_epoch * self.srl.optim.epochs
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn rng_states(&self) -> Vec<(String, starbucks_tensor::RngState)> {
        vec![
            (TRAINER_STREAMS[0].to_string(), self.sampling.state()),
            (TRAINER_STREAMS[1].to_string(), self.dropout.state()),
        ]
    }

    /// Restores optimizer moments, step count and random streams.
    pub fn restore(
        &mut self,
        optimizer: crate::optim::AdamState,
        rng_states: &[(String, starbucks_tensor::RngState)],
    ) -> Result<()> {
        if optimizer.m.len() != self.optimizer.state.m.len() {
            return Err(Error::Validation(format!(
                "optimizer state tracks {} tensors, model has {}",
                optimizer.m.len(),
                self.optimizer.state.m.len()
            )));
        }
        for (name, rng) in [
            (TRAINER_STREAMS[0], &mut self.sampling),
            (TRAINER_STREAMS[1], &mut self.dropout),
        ] {
            let state = rng_states
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Validation(format!("missing random stream {name}")))?;
            *rng = Rng::from_state(state.1);
        }
        self.step = optimizer.step as usize;
        self.optimizer.state = optimizer;
        self.epoch_cache = None;
        Ok(())
    }

    /// Snapshot of everything needed to resume: weights, moments, streams.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            projection: None,
            optimizer: Some(self.optimizer.state.clone()),
            rng_states: self.rng_states(),
            ladder: Some(self.srl.ladder.clone()),
        }
    }

    /// Rebuilds a trainer from [`SrlTrainer::checkpoint`] output.
    pub fn resume(
        checkpoint: Checkpoint,
        srl: SrlConfig,
        records: &'d [RetrievalRecord],
        vocab: &'d Vocab,
    ) -> Result<Self> {
        if vocab.tokens() != checkpoint.vocab.tokens() {
            return Err(Error::Validation("checkpoint vocabulary differs from the training vocabulary".into()));
        }
        let optimizer = checkpoint
            .optimizer
            .ok_or_else(|| Error::Validation("checkpoint has no optimizer state".into()))?;
        let mut trainer = Self::new(checkpoint.config, srl, checkpoint.params, records, vocab)?;
        trainer.restore(optimizer, &checkpoint.rng_states)?;
        Ok(trainer)
    }

    fn epoch_order(&mut self, epoch: usize) -> Result<&[Vec<usize>]> {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = Rng::with_stream(self.srl.seed, (streams::DATA << 32) | epoch as u64);
            let batches = data::epoch_batches(
                self.records.len(),
                self.srl.optim.batch_size,
                self.srl.in_batch_negatives,
                &mut rng,
            )?;
            self.epoch_cache = Some((epoch, batches));
        }
        Ok(&self.epoch_cache.as_ref().expect("just filled").1)
    }

    /// Runs one optimizer step and returns its loss record.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        if self.is_done() {
            return Err(Error::Usage("training already finished".into()));
        }
        let step = self.step;
        let (epoch, within) = (step / self.batches_per_epoch, step % self.batches_per_epoch);
        let indices = self.epoch_order(epoch)?[within].clone();
        let batch = data::assemble_batch(
            self.records,
            &indices,
            self.vocab,
            self.config.max_seq_len,
            self.srl.hard_negatives,
            self.srl.in_batch_negatives,
            &mut self.sampling,
        )?;
        let lr = self.srl.optim.lr_at(step, self.total_steps());

        let (record, mut grads) = {
            let mut tape = Tape::new();
            let vars = self.params.register(&mut tape, true);
            let losses = srl_losses(
                &mut tape,
                &vars,
                &self.config,
                &self.srl.loss,
                &self.srl.ladder.entries,
                &batch,
                None,
                (self.config.dropout_p > 0.0).then_some(&mut self.dropout),
            )
            .map_err(|e| Error::Training {
                step,
                message: e.to_string(),
            })?;
            let record = LossRecord {
                step,
                task: tape.value(losses.task).item()?,
                kl: tape.value(losses.kl).item()?,
                total: tape.value(losses.total).item()?,
                lr,
            };
            if !record.total.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("non-finite loss {}", record.total),
                });
            }
            let g = tape.backward(losses.total)?;
            let grads: Vec<Tensor> = vars.fields().iter().map(|&&v| g.get_or_zeros(&tape, v)).collect();
            (record, grads)
        };
        if let Some(max) = self.srl.optim.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let mut fields = self.params.fields_mut();
        self.optimizer.step(&mut fields, &grads, lr)?;
        self.step += 1;
        Ok(record)
    }

    /// Trains to completion, passing every record to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut out = Vec::with_capacity(self.total_steps() - self.step);
        while !self.is_done() {
            let r = self.train_step()?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(rows: &[Vec<f64>]) -> (Tape<'static>, Var) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(rows).unwrap());
        (tape, v)
    }

    #[test]
    fn score_matrix_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let c = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap());
        let s = score_matrix(&mut tape, a, c, Similarity::Dot).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 0.0]);
        let e = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let s = score_matrix(&mut tape, e, e, Similarity::Cosine).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);
        let z = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert!(score_matrix(&mut tape, z, e, Similarity::Cosine).is_err());
    }

    #[test]
    fn contrastive_loss_examples() {
        let (mut tape, s) = scores(&[vec![10.0, -10.0]]);
        let l = contrastive_loss(&mut tape, s, &[0], 1.0).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-8);
        let (mut tape, s) = scores(&[vec![0.5; 4], vec![0.5; 4]]);
        let l = contrastive_loss(&mut tape, s, &[1, 3], 1.0).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let s = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(kl_divergence(&t, &t, 1.0, KlDirection::TeacherStudent).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let (p1, p2) = (e / (1.0 + e), 1.0 / (1.0 + e));
        let expected = p1 * (p1 / p2).ln() + p2 * (p2 / p1).ln();
        let got = kl_divergence(&t, &s, 1.0, KlDirection::TeacherStudent).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(matches!(
            kl_divergence(&t, &s, 0.0, KlDirection::TeacherStudent),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_keeps_own_candidates() {
        let m = own_candidates_mask(2, 1);
        assert_eq!(m.shape(), &[2, 4]);
        assert_eq!(m.row(0), &[0.0, MASKED_LOGIT, 0.0, MASKED_LOGIT]);
        assert_eq!(m.row(1), &[MASKED_LOGIT, 0.0, MASKED_LOGIT, 0.0]);
    }

    #[test]
    fn loss_record_is_tab_separated() {
        let r = LossRecord { step: 3, task: 1.5, kl: 0.25, total: 1.75, lr: 1e-4 };
        assert_eq!(r.to_string().split('\t').count(), 5);
    }
}
