//! The run configuration document and its loader.
//!
//! A config file is merged over [`RunConfig::default`], so it only needs the
//! keys it changes. Unknown keys and invalid values are collected and
//! reported together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use starbucks_core::data::SyntheticTaskSpec;
use starbucks_core::encoder::{EncoderConfig, PoolMode, WidthSpec};
use starbucks_core::optim::OptimConfig;
use starbucks_core::smae::SmaeConfig;
use starbucks_core::srl::{SrlConfig, SrlLossConfig};
use starbucks_core::subnetworks::{default_ladder, Axis, Ladder, LadderEntry, Similarity};

use crate::error::CliError;

/// Encoder shape; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub attention_dim: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
}

impl ModelSection {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_seq_len: self.max_seq_len,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            attention_dim: self.attention_dim,
            ffn_dim: self.ffn_dim,
            dropout_p: self.dropout_p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSection {
    pub axis: Axis,
    /// Entries of the generated geometric ladder; ignored when `entries` is set.
    pub len: usize,
    /// Explicit entry list, smallest first, ending at the full model.
    pub entries: Option<Vec<LadderEntry>>,
}

impl LadderSection {
    pub fn build(&self, config: &EncoderConfig) -> starbucks_core::Result<Ladder> {
        match &self.entries {
            Some(entries) => {
                let ladder = Ladder {
                    axis: self.axis,
                    entries: entries.clone(),
                };
                ladder.validate(config)?;
                Ok(ladder)
            }
            None => default_ladder(config, self.axis, self.len),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmaeSection {
    pub p_enc: f64,
    pub p_dec: f64,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrlSection {
    pub loss: SrlLossConfig,
    pub optim: OptimConfig,
    pub hard_negatives: usize,
    pub in_batch_negatives: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub similarity: Similarity,
    pub sts_similarity: Similarity,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticTaskSpec,
    pub model: ModelSection,
    pub ladder: LadderSection,
    pub smae: SmaeSection,
    pub srl: SrlSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bert = EncoderConfig::bert_base();
        let ladder = default_ladder(&bert, Axis::Depth, 6).expect("published ladder");
        let smae = SmaeConfig::new(ladder.clone());
        let srl = SrlConfig::retrieval(ladder);
        Self {
            seed: 0,
            data: SyntheticTaskSpec::default(),
            model: ModelSection {
                max_seq_len: bert.max_seq_len,
                num_layers: bert.num_layers,
                hidden_dim: bert.hidden_dim,
                num_heads: bert.num_heads,
                attention_dim: bert.attention_dim,
                ffn_dim: bert.ffn_dim,
                dropout_p: bert.dropout_p,
            },
            ladder: LadderSection {
                axis: Axis::Depth,
                len: 6,
                entries: None,
            },
            smae: SmaeSection {
                p_enc: smae.p_enc,
                p_dec: smae.p_dec,
                optim: smae.optim,
            },
            srl: SrlSection {
                loss: srl.loss,
                optim: srl.optim,
                hard_negatives: srl.hard_negatives,
                in_batch_negatives: srl.in_batch_negatives,
            },
            eval: EvalSection {
                k: starbucks_core::eval::DEFAULT_K,
                similarity: Similarity::Dot,
                sts_similarity: Similarity::Cosine,
                chunk: 64,
            },
            bench: BenchSection { reps: 5 },
            paths: PathsSection {
                data_dir: PathBuf::from("data"),
                run_dir: PathBuf::from("run"),
            },
        }
    }
}

/// Every configuration key with a one-line description, in document order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "seed for initialization, masking, sampling and batch order (--seed overrides)"),
    ("data.vocab_size", "synthetic vocabulary size including the 4 reserved tokens"),
    ("data.num_topics", "number of topics in the synthetic task"),
    ("data.docs_per_topic", "documents generated per topic"),
    ("data.common_words", "topic-agnostic filler words"),
    ("data.common_rate", "probability that a sentence position holds a filler word"),
    ("data.sentence_len", "[min, max] words per sentence"),
    ("data.noise_rate", "per-word drop/substitute/swap rate when paraphrasing queries"),
    ("data.query_alias_rate", "probability a query topic word is replaced by its alias"),
    ("data.corpus_alias_rate", "same replacement for the extra pre-training sentences"),
    ("data.train_queries_per_doc", "training queries per document"),
    ("data.eval_queries_per_doc", "held-out evaluation queries per document"),
    ("data.extra_corpus_sentences", "unlabeled sentences added to the pre-training corpus"),
    ("data.sts_pairs", "graded sentence pairs for the STS evaluation"),
    ("data.seed", "data generation seed (independent of the training seed)"),
    ("model.max_seq_len", "maximum tokens per sequence including [CLS]"),
    ("model.num_layers", "transformer layers N"),
    ("model.hidden_dim", "hidden size D"),
    ("model.num_heads", "attention heads H"),
    ("model.attention_dim", "total attention width A (multiple of H)"),
    ("model.ffn_dim", "feed-forward intermediate size"),
    ("model.dropout_p", "dropout probability during training"),
    ("ladder.axis", "depth | width"),
    ("ladder.len", "entries of the generated ladder (1..=6)"),
    ("ladder.entries", "explicit entry list replacing the generated ladder, or null"),
    ("ladder.entries[].name", "entry name used by embed --entry"),
    ("ladder.entries[].depth", "layers used by the entry"),
    ("ladder.entries[].width.ffn_active", "active feed-forward units per layer"),
    ("ladder.entries[].width.attn_active", "active attention width (multiple of H)"),
    ("ladder.entries[].embed_dim", "leading embedding dims kept"),
    ("smae.p_enc", "encoder-side mask rate"),
    ("smae.p_dec", "decoder-side mask rate (must exceed p_enc)"),
    ("smae.optim", "SMAE optimizer block (keys as in srl.optim)"),
    ("smae.optim.lr", "peak learning rate"),
    ("smae.optim.weight_decay", "decoupled weight decay on matrices"),
    ("smae.optim.warmup_ratio", "fraction of steps spent in linear warmup"),
    ("smae.optim.schedule", "linear | cosine decay after warmup"),
    ("smae.optim.epochs", "passes over the corpus"),
    ("smae.optim.batch_size", "sentences per step"),
    ("smae.optim.beta1", "AdamW first-moment decay"),
    ("smae.optim.beta2", "AdamW second-moment decay"),
    ("smae.optim.eps", "AdamW denominator epsilon"),
    ("smae.optim.max_grad_norm", "global gradient-norm clip, or null"),
    ("srl.loss.loss_kind", "infonce_dot | mnrl_cosine"),
    ("srl.loss.scale", "logit scale, or null for the loss kind's default"),
    ("srl.loss.kl_temperature", "temperature of the alignment KL term"),
    ("srl.loss.kl_direction", "teacher_student | student_teacher"),
    ("srl.loss.pool_mode", "cls | mean pooling (also used by embed, eval, bench)"),
    ("srl.optim", "SRL optimizer block"),
    ("srl.optim.lr", "peak learning rate"),
    ("srl.optim.weight_decay", "decoupled weight decay on matrices"),
    ("srl.optim.warmup_ratio", "fraction of steps spent in linear warmup"),
    ("srl.optim.schedule", "linear | cosine decay after warmup"),
    ("srl.optim.epochs", "passes over the training records"),
    ("srl.optim.batch_size", "queries per step"),
    ("srl.optim.beta1", "AdamW first-moment decay"),
    ("srl.optim.beta2", "AdamW second-moment decay"),
    ("srl.optim.eps", "AdamW denominator epsilon"),
    ("srl.optim.max_grad_norm", "global gradient-norm clip, or null"),
    ("srl.hard_negatives", "hard negatives sampled per query (0..=7)"),
    ("srl.in_batch_negatives", "score against other queries' candidates too"),
    ("eval.k", "rank cutoff for MRR and nDCG"),
    ("eval.similarity", "dot | cosine for retrieval ranking"),
    ("eval.sts_similarity", "dot | cosine for STS correlation"),
    ("eval.chunk", "sequences per encoder forward during evaluation"),
    ("bench.reps", "timed repetitions per entry (at least 5 are run)"),
    ("paths.data_dir", "directory written by gen-data and read by later steps"),
    ("paths.run_dir", "directory for checkpoints, loss logs and reports"),
];

/// `--help` appendix listing every key.
pub fn key_help() -> String {
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (JSON, merged over the defaults shown by print-config):\n");
    for (key, doc) in KEY_DOCS {
        out.push_str(&format!("  {key:<width$}  {doc}\n"));
    }
    out
}

/// Default document with one example ladder entry so nested keys are known.
fn schema() -> Value {
    let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let example = LadderEntry {
        name: String::new(),
        depth: 0,
        width: WidthSpec {
            ffn_active: 0,
            attn_active: 0,
        },
        embed_dim: 0,
    };
    value["ladder"]["entries"] = Value::Array(vec![serde_json::to_value(example).expect("entry serializes")]);
    value
}

fn unknown_keys(input: &Value, schema: &Value, path: &str, out: &mut Vec<String>) {
    let join = |key: &str| if path.is_empty() { key.to_string() } else { format!("{path}.{key}") };
    match (input, schema) {
        (Value::Object(given), Value::Object(known)) => {
            for (key, value) in given {
                match known.get(key) {
                    Some(inner) => unknown_keys(value, inner, &join(key), out),
                    None => out.push(join(key)),
                }
            }
        }
        (Value::Array(items), Value::Array(example)) if !example.is_empty() => {
            for (i, item) in items.iter().enumerate() {
                unknown_keys(item, &example[0], &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Leaf key paths of the schema, arrays written as `[]`.
#[cfg(test)]
pub fn schema_keys() -> Vec<String> {
    fn walk(v: &Value, path: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, inner) in map {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(inner, &p, out);
                }
            }
            Value::Array(items) if items.first().is_some_and(Value::is_object) => {
                walk(&items[0], &format!("{path}[]"), out)
            }
            _ => out.push(path.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(&schema(), "", &mut out);
    out
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, patch) => *slot = patch,
    }
}

fn section<T: for<'de> Deserialize<'de>>(map: &Map<String, Value>, key: &str, problems: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value(map.get(key).cloned().unwrap_or(Value::Null)) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("{key}: {e}"));
            None
        }
    }
}

impl RunConfig {
    /// Parses a config document, reporting every unknown key, type error and
    /// invalid value at once.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let input: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        if !input.is_object() {
            return Err(CliError::Config("config must be a JSON object".into()));
        }
        let mut unknown = Vec::new();
        unknown_keys(&input, &schema(), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut merged, input);
        let map = merged.as_object().expect("object");
        let mut problems = Vec::new();
        let config = Self {
            seed: section(map, "seed", &mut problems).unwrap_or_default(),
            data: section(map, "data", &mut problems).unwrap_or_default(),
            model: section(map, "model", &mut problems).unwrap_or_else(|| Self::default().model),
            ladder: section(map, "ladder", &mut problems).unwrap_or_else(|| Self::default().ladder),
            smae: section(map, "smae", &mut problems).unwrap_or_else(|| Self::default().smae),
            srl: section(map, "srl", &mut problems).unwrap_or_else(|| Self::default().srl),
            eval: section(map, "eval", &mut problems).unwrap_or_else(|| Self::default().eval),
            bench: section(map, "bench", &mut problems).unwrap_or_else(|| Self::default().bench),
            paths: section(map, "paths", &mut problems).unwrap_or_else(|| Self::default().paths),
        };
        if !problems.is_empty() {
            return Err(CliError::Config(problems.join("; ")));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Nominal encoder config; commands substitute the real vocabulary size.
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        self.model.encoder(vocab_size)
    }

    pub fn ladder(&self, config: &EncoderConfig) -> Result<Ladder, CliError> {
        self.ladder.build(config).map_err(|e| CliError::Config(format!("ladder: {e}")))
    }

    pub fn smae_config(&self, ladder: Ladder) -> SmaeConfig {
        SmaeConfig {
            ladder,
            p_enc: self.smae.p_enc,
            p_dec: self.smae.p_dec,
            optim: self.smae.optim.clone(),
            seed: self.seed,
        }
    }

    pub fn srl_config(&self, ladder: Ladder) -> SrlConfig {
        SrlConfig {
            ladder,
            loss: self.srl.loss.clone(),
            optim: self.srl.optim.clone(),
            hard_negatives: self.srl.hard_negatives,
            in_batch_negatives: self.srl.in_batch_negatives,
            seed: self.seed,
        }
    }

    pub fn pool_mode(&self) -> PoolMode {
        self.srl.loss.pool_mode
    }

    /// Checks every section against the nominal vocabulary size and lists
    /// all problems found.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let mut note = |key: &str, r: starbucks_core::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{key}: {e}"));
            }
        };
        note("data", self.data.validate());
        let encoder = self.encoder(self.data.vocab_size);
        note("model", encoder.validate());
        if let Ok(ladder) = self.ladder.build(&encoder) {
            note("smae", self.smae_config(ladder.clone()).validate(&encoder));
            note("srl", self.srl_config(ladder).validate(&encoder));
        } else if encoder.validate().is_ok() {
            note("ladder", self.ladder.build(&encoder).map(|_| ()));
        }
        if self.eval.k == 0 {
            problems.push("eval.k: must be >= 1".into());
        }
        if self.eval.chunk == 0 {
            problems.push("eval.chunk: must be >= 1".into());
        }
        if self.bench.reps == 0 {
            problems.push("bench.reps: must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("; ")))
        }
    }
}
