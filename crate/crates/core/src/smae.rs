//! Masked-autoencoder pre-training over the ladder: a lightly masked input is
//! encoded by each sub-network, its CLS vector is projected back to full width
//! and seeds a one-layer decoder that reconstructs a heavily masked copy.

use serde::{Deserialize, Serialize};
use starbucks_tensor::rng::streams;
use starbucks_tensor::{Rng, Tape, Tensor, Var};

use crate::data::{self, Vocab, CLS_ID, MASK_ID, PAD_ID};
use crate::encoder::{self, EncoderConfig, EncoderParams, EncoderVars, Layer, TokenBatch};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, AdamW, OptimConfig, ScheduleKind};
use crate::srl::{sum_vars, LossRecord};
use crate::subnetworks::{entry_hidden_states, Ladder, LadderEntry};

/// Draws tried before a single position is forced into an empty mask.
pub const MAX_MASK_DRAWS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSample {
    pub input_ids: Vec<u32>,
    /// Original ids at masked positions, `None` elsewhere.
    pub labels: Vec<Option<u32>>,
    pub mask_set: Vec<usize>,
}

/// Masks each non-CLS, non-PAD position independently with probability `p`,
/// replacing it with MASK. An empty draw is redrawn; after
/// [`MAX_MASK_DRAWS`] empty draws one eligible position is forced.
pub fn mask(x: &[u32], p: f64, rng: &mut Rng) -> Result<MaskedSample> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("mask probability {p} outside (0, 1)")));
    }
    let eligible: Vec<usize> = (1..x.len()).filter(|&i| x[i] != PAD_ID).collect();
    if x.len() < 2 || eligible.is_empty() {
        return Err(Error::Input(format!(
            "cannot mask a sequence with {} tokens",
            x.len()
        )));
    }
    let mut mask_set = Vec::new();
    for _ in 0..MAX_MASK_DRAWS {
        mask_set = eligible.iter().copied().filter(|_| rng.bernoulli(p)).collect();
        if !mask_set.is_empty() {
            break;
        }
    }
    if mask_set.is_empty() {
        mask_set.push(eligible[rng.below(eligible.len())]);
    }
    let mut input_ids = x.to_vec();
    let mut labels = vec![None; x.len()];
    for &i in &mask_set {
        labels[i] = Some(x[i]);
        input_ids[i] = MASK_ID;
    }
    Ok(MaskedSample {
        input_ids,
        labels,
        mask_set,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmaeConfig {
    pub ladder: Ladder,
    pub p_enc: f64,
    pub p_dec: f64,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl SmaeConfig {
    pub fn new(ladder: Ladder) -> Self {
        Self {
            ladder,
            p_enc: 0.3,
            p_dec: 0.5,
            optim: OptimConfig {
                lr: 1e-4,
                weight_decay: 0.05,
                warmup_ratio: 0.05,
                schedule: ScheduleKind::Cosine,
                epochs: 1,
                batch_size: 512,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                max_grad_norm: None,
            },
            seed: 0,
        }
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        self.ladder.validate(config)?;
        self.optim.validate()?;
        if !(0.0 < self.p_enc && self.p_enc < self.p_dec && self.p_dec < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < p_enc < p_dec < 1, got p_enc={} p_dec={}",
                self.p_enc, self.p_dec
            )));
        }
        Ok(())
    }
}

/// Encoder, projection `W [D, D]` and the one-layer decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SmaeParams<T> {
    pub encoder: encoder::Encoder<T>,
    pub projection: T,
    pub decoder: Layer<T>,
}

impl<T> SmaeParams<T> {
    pub fn fields(&self) -> Vec<&T> {
        let mut out = self.encoder.fields();
        out.push(&self.projection);
        out.extend(self.decoder.fields());
        out
    }

    pub fn fields_mut(&mut self) -> Vec<&mut T> {
        let mut out = self.encoder.fields_mut();
        out.push(&mut self.projection);
        out.extend(self.decoder.fields_mut());
        out
    }

    /// Inverse of [`SmaeParams::fields`].
    pub fn from_fields(mut it: impl Iterator<Item = T>, num_layers: usize) -> Option<Self> {
        let encoder = encoder::Encoder::take_fields(&mut it, num_layers)?;
        let projection = it.next()?;
        let decoder = Layer::from_fields(&mut it)?;
        it.next().is_none().then_some(Self {
            encoder,
            projection,
            decoder,
        })
    }
}

impl SmaeParams<Tensor> {
    /// Wraps an encoder with an identity projection and a fresh decoder layer.
    pub fn init(encoder: EncoderParams, config: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = config.hidden_dim;
        let mut projection = Tensor::zeros(&[d, d]);
        for i in 0..d {
            projection.data_mut()[i * d + i] = 1.0;
        }
        let decoder = Layer::init(d, config.attention_dim, config.ffn_dim, rng);
        Self {
            encoder,
            projection,
            decoder,
        }
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> SmaeParams<Var> {
        SmaeParams {
            encoder: self.encoder.register(tape, trainable),
            projection: if trainable {
                tape.leaf_ref(&self.projection)
            } else {
                tape.constant_ref(&self.projection)
            },
            decoder: self.decoder.register(tape, trainable),
        }
    }
}

/// Rows of `[W]_{1:d}`-projected hidden states: the CLS rows (the decoder's
/// seed vectors) and the rows at `rows`.
pub fn encode_and_project(
    tape: &mut Tape<'_>,
    hidden: Var,
    projection: Var,
    embed_dim: usize,
    cls_rows: &[usize],
    rows: &[usize],
) -> Result<(Var, Var)> {
    let mut all = cls_rows.to_vec();
    all.extend_from_slice(rows);
    let picked = tape.gather_rows(hidden, &all)?;
    let sliced = encoder::slice_embedding(tape, picked, embed_dim)?;
    let w = if embed_dim == tape.value(projection).rows() {
        projection
    } else {
        tape.narrow_rows(projection, embed_dim)?
    };
    let projected = tape.matmul(sliced, w)?;
    let cls = tape.narrow_rows(projected, cls_rows.len())?;
    let rest: Vec<usize> = (cls_rows.len()..all.len()).collect();
    let at_rows = tape.gather_rows(projected, &rest)?;
    Ok((cls, at_rows))
}

/// Tied output head: `h · Eᵀ + b`.
pub fn mlm_logits(tape: &mut Tape<'_>, vars: &EncoderVars, h: Var) -> Result<Var> {
    let logits = tape.matmul_nt(h, vars.token_embeddings)?;
    Ok(tape.add(logits, vars.mlm_bias)?)
}

/// Flat row indices and labels of every masked position in a batch.
pub fn masked_targets(samples: &[MaskedSample], tokens: &TokenBatch) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        for &i in &s.mask_set {
            rows.push(tokens.row(b, i));
            labels.push(s.labels[i].expect("label on every masked position") as usize);
        }
    }
    (rows, labels)
}

/// Decoder MLM loss given per-sequence seed vectors `cls [B, D]`.
pub fn decoder_mlm_loss(
    tape: &mut Tape<'_>,
    vars: &SmaeParams<Var>,
    config: &EncoderConfig,
    dec_tokens: &TokenBatch,
    dec_samples: &[MaskedSample],
    cls: Var,
) -> Result<Var> {
    let emb = encoder::embed(tape, &vars.encoder, config, dec_tokens, None)?;
    let rows = dec_tokens.batch() * dec_tokens.seq_len();
    let cls_rows = dec_tokens.cls_rows();
    let d = config.hidden_dim;
    let mut keep = Tensor::ones(&[rows, d]);
    for &r in &cls_rows {
        keep.data_mut()[r * d..(r + 1) * d].fill(0.0);
    }
    let keep = tape.constant(keep);
    let body = tape.mul(emb, keep)?;
    let seeded = tape.scatter_rows(cls, &cls_rows, rows)?;
    let input = tape.add(body, seeded)?;
    let out = encoder::layer_forward(tape, &vars.decoder, input, config, None, dec_tokens, None)?;
    let (mrows, labels) = masked_targets(dec_samples, dec_tokens);
    let h = tape.gather_rows(out, &mrows)?;
    let logits = mlm_logits(tape, &vars.encoder, h)?;
    Ok(tape.cross_entropy(logits, &labels)?)
}

#[derive(Clone, Debug)]
pub struct SmaeLosses {
    pub total: Var,
    pub enc: Vec<Var>,
    pub dec: Vec<Var>,
}

/// `(1/|S|) Σ (L_enc + L_dec)` with one encoder and one decoder masking per
/// sequence shared across all entries.
pub fn smae_losses(
    tape: &mut Tape<'_>,
    vars: &SmaeParams<Var>,
    config: &EncoderConfig,
    entries: &[LadderEntry],
    enc_samples: &[MaskedSample],
    dec_samples: &[MaskedSample],
    dropout: Option<&mut Rng>,
) -> Result<SmaeLosses> {
    if entries.is_empty() {
        return Err(Error::Config("ladder has no entries".into()));
    }
    if enc_samples.is_empty() || enc_samples.len() != dec_samples.len() {
        return Err(Error::Input(format!(
            "{} encoder samples and {} decoder samples",
            enc_samples.len(),
            dec_samples.len()
        )));
    }
    let enc_ids: Vec<Vec<u32>> = enc_samples.iter().map(|s| s.input_ids.clone()).collect();
    let dec_ids: Vec<Vec<u32>> = dec_samples.iter().map(|s| s.input_ids.clone()).collect();
    let enc_tokens = TokenBatch::new(&enc_ids, config)?;
    let dec_tokens = TokenBatch::new(&dec_ids, config)?;
    let (enc_rows, enc_labels) = masked_targets(enc_samples, &enc_tokens);
    let cls_rows = enc_tokens.cls_rows();

    let hidden = entry_hidden_states(tape, &vars.encoder, config, &enc_tokens, entries, dropout)?;
    let mut enc = Vec::with_capacity(entries.len());
    let mut dec = Vec::with_capacity(entries.len());
    let mut per_entry = Vec::with_capacity(entries.len());
    for (entry, h) in entries.iter().zip(hidden) {
        let (cls, masked) =
            encode_and_project(tape, h, vars.projection, entry.embed_dim, &cls_rows, &enc_rows)?;
        let logits = mlm_logits(tape, &vars.encoder, masked)?;
        let l_enc = tape.cross_entropy(logits, &enc_labels)?;
        let l_dec = decoder_mlm_loss(tape, vars, config, &dec_tokens, dec_samples, cls)?;
        per_entry.push(tape.add(l_enc, l_dec)?);
        enc.push(l_enc);
        dec.push(l_dec);
    }
    let sum = sum_vars(tape, &per_entry)?;
    let total = tape.scale(sum, 1.0 / entries.len() as f64);
    Ok(SmaeLosses { total, enc, dec })
}

/// Pre-training loop. Loss records carry the ladder-mean encoder loss in the
/// `task` column and the ladder-mean decoder loss in the `kl` column.
pub struct SmaeTrainer<'d> {
    pub config: EncoderConfig,
    pub smae: SmaeConfig,
    pub params: SmaeParams<Tensor>,
    pub optimizer: AdamW,
    corpus: &'d [Vec<u32>],
    step: usize,
    batches_per_epoch: usize,
    masking: Rng,
    dropout: Rng,
}

impl<'d> SmaeTrainer<'d> {
    pub fn new(
        config: EncoderConfig,
        smae: SmaeConfig,
        encoder: EncoderParams,
        corpus: &'d [Vec<u32>],
    ) -> Result<Self> {
        config.validate()?;
        smae.validate(&config)?;
        encoder.check(&config)?;
        if corpus.is_empty() {
            return Err(Error::Input("empty pre-training corpus".into()));
        }
        let mut init = Rng::with_stream(smae.seed, streams::INIT);
        let params = SmaeParams::init(encoder, &config, &mut init);
        let optimizer = AdamW::new(&smae.optim, &params.fields());
        let batches_per_epoch = corpus.len().div_ceil(smae.optim.batch_size);
        Ok(Self {
            masking: Rng::with_stream(smae.seed, streams::MASKING),
            dropout: Rng::with_stream(smae.seed, streams::DROPOUT),
            config,
            smae,
            params,
            optimizer,
            corpus,
            step: 0,
            batches_per_epoch,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.batches_per_epoch * self.smae.optim.epochs
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn train_step(&mut self) -> Result<LossRecord> {
        if self.is_done() {
            return Err(Error::Usage("training already finished".into()));
        }
        let step = self.step;
        let epoch = step / self.batches_per_epoch;
        let mut order_rng = Rng::with_stream(self.smae.seed, (streams::DATA << 32) | epoch as u64);
        let batches =
            data::epoch_batches(self.corpus.len(), self.smae.optim.batch_size, false, &mut order_rng)?;
        let indices = &batches[step % self.batches_per_epoch];
        let mut enc_samples = Vec::with_capacity(indices.len());
        let mut dec_samples = Vec::with_capacity(indices.len());
        for &i in indices {
            enc_samples.push(mask(&self.corpus[i], self.smae.p_enc, &mut self.masking)?);
            dec_samples.push(mask(&self.corpus[i], self.smae.p_dec, &mut self.masking)?);
        }
        let lr = self.smae.optim.lr_at(step, self.total_steps());
        let (record, mut grads) = {
            let mut tape = Tape::new();
            let vars = self.params.register(&mut tape, true);
            let losses = smae_losses(
                &mut tape,
                &vars,
                &self.config,
                &self.smae.ladder.entries,
                &enc_samples,
                &dec_samples,
                (self.config.dropout_p > 0.0).then_some(&mut self.dropout),
            )
            .map_err(|e| Error::Training {
                step,
                message: e.to_string(),
            })?;
            let n = losses.enc.len() as f64;
            let mean = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).data()[0]).sum::<f64>() / n;
            let record = LossRecord {
                step,
                task: mean(&losses.enc),
                kl: mean(&losses.dec),
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
        if let Some(max) = self.smae.optim.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let mut fields = self.params.fields_mut();
        self.optimizer.step(&mut fields, &grads, lr)?;
        self.step += 1;
        Ok(record)
    }

    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut out = Vec::with_capacity(self.total_steps() - self.step);
        while !self.is_done() {
            let r = self.train_step()?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }

    /// Encoder and projection; the decoder and optimizer state are dropped.
    pub fn finish(self) -> (EncoderParams, Tensor) {
        (self.params.encoder, self.params.projection)
    }
}

/// Tokenizes a corpus for pre-training, skipping lines too short to mask.
pub fn tokenize_corpus(corpus: &[String], vocab: &Vocab, max_seq_len: usize) -> Vec<Vec<u32>> {
    corpus
        .iter()
        .filter_map(|line| data::tokenize(line, vocab, max_seq_len, false).ok())
        .filter(|ids| ids.len() >= 2 && ids[0] == CLS_ID)
        .collect()
}
