use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use starbucks_core::data::{self, files, gen_synthetic, ContrastiveBatch, Vocab, CLS_ID, RESERVED_TOKENS};
use starbucks_core::encoder::{Encoder, EncoderConfig, EncoderParams, WidthSpec};
use starbucks_core::eval::{bench_latency, eval_sweep, EvalInputs, SweepModel, SweepOptions};
use starbucks_core::persistence::Checkpoint;
use starbucks_core::smae::{mask, smae_losses, tokenize_corpus, SmaeParams, SmaeTrainer};
use starbucks_core::srl::{srl_losses, LossKind, LossRecord, SrlTrainer};
use starbucks_core::subnetworks::{encode, Ladder, LadderEntry};
use starbucks_tensor::{grad_check, grad_check_sampled, Rng, Tape, Tensor, TensorError, Var};

use crate::config::RunConfig;
use crate::error::CliError;

const LOSS_HEADER: &str = "step\ttask\tkl\ttotal\tlr\n";
const LOG_EVERY: usize = 10;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_losses(path: &Path, records: &[LossRecord]) -> Result<(), CliError> {
    let mut out = String::from(LOSS_HEADER);
    for r in records {
        out.push_str(&format!("{r}\n"));
    }
    write_file(path, out.as_bytes())
}

fn log_step(phase: &str, total: usize, r: &LossRecord) {
    if r.step.is_multiple_of(LOG_EVERY) || r.step + 1 == total {
        eprintln!(
            "{phase} step {}/{total} task {:.5} kl {:.5} total {:.5} lr {:.3e}",
            r.step + 1,
            r.task,
            r.kl,
            r.total,
            r.lr
        );
    }
}

/// The model section must agree with a checkpoint's stored shape.
fn check_model(cfg: &RunConfig, stored: &EncoderConfig) -> Result<(), CliError> {
    let expected = cfg.encoder(stored.vocab_size);
    if &expected != stored {
        return Err(CliError::Config(format!(
            "model section {expected:?} does not match the checkpoint's {stored:?}"
        )));
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let data = gen_synthetic(&cfg.data)?;
    data.write(&dir)?;
    println!(
        "wrote {}: vocab {} corpus {} train {} docs {} queries {} sts {}",
        dir.display(),
        data.vocab.len(),
        data.corpus.len(),
        data.train.len(),
        data.eval.docs.len(),
        data.eval.queries.len(),
        data.sts.len()
    );
    Ok(())
}

pub fn pretrain_smae(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = &cfg.paths.data_dir;
    let vocab = Vocab::load(&dir.join(files::VOCAB))?;
    let corpus = data::load_corpus(&dir.join(files::CORPUS))?;
    let config = cfg.encoder(vocab.len());
    let ladder = cfg.ladder(&config)?;
    let smae = cfg.smae_config(ladder.clone());
    let sequences = tokenize_corpus(&corpus, &vocab, config.max_seq_len);
    let params = EncoderParams::init(&config, &mut Rng::new(cfg.seed))?;
    let mut trainer = SmaeTrainer::new(config.clone(), smae, params, &sequences)?;
    let total = trainer.total_steps();
    let records = trainer.run(|r| log_step("smae", total, r))?;
    let (params, projection) = trainer.finish();
    let run = &cfg.paths.run_dir;
    write_losses(&run.join("smae_losses.tsv"), &records)?;
    let checkpoint = Checkpoint {
        config,
        vocab,
        params,
        projection: Some(projection),
        optimizer: None,
        rng_states: Vec::new(),
        ladder: Some(ladder),
    };
    write_file(&run.join("smae.ckpt"), &checkpoint.to_bytes())?;
    println!("wrote {}", run.join("smae.ckpt").display());
    Ok(())
}

pub fn train_srl(cfg: &RunConfig, init: Option<&Path>, resume: Option<&Path>) -> Result<(), CliError> {
    let dir = &cfg.paths.data_dir;
    let vocab = Vocab::load(&dir.join(files::VOCAB))?;
    let records = data::load_retrieval(&dir.join(files::TRAIN))?;
    let mut trainer = match (init, resume) {
        (Some(_), Some(_)) => return Err(CliError::Config("--init and --resume are exclusive".into())),
        (_, Some(path)) => {
            let checkpoint = Checkpoint::load(path)?;
            check_model(cfg, &checkpoint.config)?;
            let ladder = cfg.ladder(&checkpoint.config)?;
            SrlTrainer::resume(checkpoint, cfg.srl_config(ladder), &records, &vocab)?
        }
        (Some(path), None) => {
            let checkpoint = Checkpoint::load(path)?;
            if checkpoint.vocab.tokens() != vocab.tokens() {
                return Err(CliError::Data(format!("{}: vocabulary differs from the data directory's", path.display())));
            }
            check_model(cfg, &checkpoint.config)?;
            let ladder = cfg.ladder(&checkpoint.config)?;
            SrlTrainer::new(checkpoint.config, cfg.srl_config(ladder), checkpoint.params, &records, &vocab)?
        }
        (None, None) => {
            let config = cfg.encoder(vocab.len());
            let ladder = cfg.ladder(&config)?;
            let params = EncoderParams::init(&config, &mut Rng::new(cfg.seed))?;
            SrlTrainer::new(config, cfg.srl_config(ladder), params, &records, &vocab)?
        }
    };
    let total = trainer.total_steps();
    let run = &cfg.paths.run_dir;
    let losses_path = run.join("srl_losses.tsv");
    let mut previous = Vec::new();
    if resume.is_some() {
        // keep the rows logged before the checkpoint was taken
        if let Ok(text) = fs::read_to_string(&losses_path) {
            previous = text
                .lines()
                .skip(1)
                .filter(|l| l.split('\t').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < trainer.step()))
                .map(str::to_string)
                .collect();
        }
    }
    let records = trainer.run(|r| log_step("srl", total, r))?;
    let mut out = String::from(LOSS_HEADER);
    for line in previous {
        out.push_str(&line);
        out.push('\n');
    }
    for r in &records {
        out.push_str(&format!("{r}\n"));
    }
    write_file(&losses_path, out.as_bytes())?;
    write_file(&run.join("srl.ckpt"), &trainer.checkpoint().to_bytes())?;
    println!("wrote {}", run.join("srl.ckpt").display());
    Ok(())
}

fn checkpoint_ladder(cfg: &RunConfig, checkpoint: &Checkpoint) -> Result<Ladder, CliError> {
    match &checkpoint.ladder {
        Some(ladder) => Ok(ladder.clone()),
        None => cfg.ladder(&checkpoint.config),
    }
}

/// Sub-network selection for `embed`.
#[derive(Clone, Debug, Default)]
pub struct EmbedTarget {
    pub entry: Option<String>,
    pub layers: Option<usize>,
    pub dim: Option<usize>,
    /// `ffn_active,attn_active`
    pub width: Option<String>,
}

fn resolve_entry(cfg: &RunConfig, checkpoint: &Checkpoint, target: &EmbedTarget) -> Result<LadderEntry, CliError> {
    let config = &checkpoint.config;
    let explicit = target.layers.is_some() || target.dim.is_some() || target.width.is_some();
    if let Some(name) = &target.entry {
        if explicit {
            return Err(CliError::Config("--entry excludes --layers, --dim and --width".into()));
        }
        let ladder = checkpoint_ladder(cfg, checkpoint)?;
        return ladder.get(name).cloned().ok_or_else(|| {
            let names: Vec<&str> = ladder.entries.iter().map(|e| e.name.as_str()).collect();
            CliError::Config(format!("unknown entry {name:?}; known: {}", names.join(", ")))
        });
    }
    let width = match &target.width {
        None => config.full_width(),
        Some(spec) => {
            let parts: Vec<Option<usize>> = spec.split(',').map(|p| p.trim().parse().ok()).collect();
            match parts.as_slice() {
                [Some(ffn), Some(attn)] => WidthSpec {
                    ffn_active: *ffn,
                    attn_active: *attn,
                },
                _ => return Err(CliError::Config(format!("--width {spec:?}: expected FFN,ATTN"))),
            }
        }
    };
    let entry = LadderEntry {
        name: "custom".into(),
        depth: target.layers.unwrap_or(config.num_layers),
        width,
        embed_dim: target.dim.unwrap_or(config.hidden_dim),
    };
    entry.validate(config)?;
    Ok(entry)
}

pub fn embed(
    cfg: &RunConfig,
    checkpoint: &Path,
    target: &EmbedTarget,
    input: Option<&Path>,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(checkpoint)?;
    let entry = resolve_entry(cfg, &checkpoint, target)?;
    let text = match input {
        Some(path) => fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        None => {
            let mut s = String::new();
            io::stdin()
                .lock()
                .read_to_string(&mut s)
                .map_err(|e| CliError::Data(format!("stdin: {e}")))?;
            s
        }
    };
    let lines: Vec<&str> = text.lines().collect();
    if lines.is_empty() {
        return Err(CliError::Data("no input lines to embed".into()));
    }
    let max_len = checkpoint.config.max_seq_len;
    let sequences = lines
        .iter()
        .map(|l| data::tokenize(l, &checkpoint.vocab, max_len, true))
        .collect::<Result<Vec<_>, _>>()?;
    let vectors = encode(
        &checkpoint.params,
        &checkpoint.config,
        &entry,
        &sequences,
        cfg.pool_mode(),
        cfg.eval.chunk,
    )?;
    let mut out = String::new();
    for row in vectors.data().chunks(entry.embed_dim) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    match output {
        Some(path) => write_file(path, out.as_bytes()),
        None => io::stdout()
            .lock()
            .write_all(out.as_bytes())
            .map_err(|e| CliError::Data(format!("stdout: {e}"))),
    }
}

fn sweep_options(cfg: &RunConfig) -> SweepOptions {
    SweepOptions {
        pool_mode: cfg.pool_mode(),
        similarity: cfg.eval.similarity,
        sts_similarity: cfg.eval.sts_similarity,
        k: cfg.eval.k,
        chunk: cfg.eval.chunk,
    }
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, secondary: Option<&Path>) -> Result<(), CliError> {
    let dir = &cfg.paths.data_dir;
    let primary = Checkpoint::load(checkpoint)?;
    let other = secondary.map(Checkpoint::load).transpose()?;
    let eval_set = data::load_eval_set(&dir.join(files::DOCS), &dir.join(files::QUERIES), &dir.join(files::QRELS))?;
    let sts = data::load_sts(&dir.join(files::STS))?;
    let ladder = checkpoint_ladder(cfg, &primary)?;
    let other_ladder = other.as_ref().map(|c| checkpoint_ladder(cfg, c)).transpose()?;
    if let Some(o) = &other {
        if o.vocab.tokens() != primary.vocab.tokens() {
            return Err(CliError::Data("secondary checkpoint has a different vocabulary".into()));
        }
    }
    let model = SweepModel {
        params: &primary.params,
        config: &primary.config,
        ladder: &ladder,
    };
    let second = other.as_ref().zip(other_ladder.as_ref()).map(|(c, l)| SweepModel {
        params: &c.params,
        config: &c.config,
        ladder: l,
    });
    let inputs = EvalInputs {
        vocab: &primary.vocab,
        retrieval: Some(&eval_set),
        sts: Some(&sts),
    };
    let report = eval_sweep(model, second, &inputs, &sweep_options(cfg))?;
    let run = &cfg.paths.run_dir;
    let tsv = report.to_tsv();
    write_file(&run.join("report.tsv"), tsv.as_bytes())?;
    write_file(&run.join("report.jsonl"), report.to_jsonl().as_bytes())?;
    if report.missing_queries > 0 {
        eprintln!("warning: {} queries have no judged documents", report.missing_queries);
    }
    print!("{tsv}");
    Ok(())
}

pub fn bench(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let dir = &cfg.paths.data_dir;
    let checkpoint = Checkpoint::load(checkpoint)?;
    let eval_set = data::load_eval_set(&dir.join(files::DOCS), &dir.join(files::QUERIES), &dir.join(files::QRELS))?;
    let ladder = checkpoint_ladder(cfg, &checkpoint)?;
    let max_len = checkpoint.config.max_seq_len;
    let tokenize = |rows: &[(String, String)]| {
        rows.iter()
            .map(|(_, t)| data::tokenize(t, &checkpoint.vocab, max_len, true))
            .collect::<Result<Vec<_>, _>>()
    };
    let queries = tokenize(&eval_set.queries)?;
    let docs = tokenize(&eval_set.docs)?;
    let table = bench_latency(
        &checkpoint.params,
        &checkpoint.config,
        &ladder,
        &queries,
        &docs,
        cfg.bench.reps,
        cfg.pool_mode(),
    )?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    let tsv = table.to_tsv();
    write_file(&cfg.paths.run_dir.join("latency.tsv"), tsv.as_bytes())?;
    print!("{tsv}");
    Ok(())
}

/// Perturbs every tensor so that no gradient is trivially zero.
fn lively(params: &mut [&mut Tensor], rng: &mut Rng) {
    for t in params.iter_mut() {
        let scale = if t.shape().len() == 2 { 0.2 } else { 0.05 };
        for v in t.data_mut() {
            *v += scale * rng.normal();
        }
    }
}

fn random_sequences(rng: &mut Rng, count: usize, config: &EncoderConfig) -> Vec<Vec<u32>> {
    let first = RESERVED_TOKENS.len();
    (0..count)
        .map(|_| {
            let len = 1 + rng.below(config.max_seq_len - 1);
            let mut s = vec![CLS_ID];
            s.extend((0..len).map(|_| (first + rng.below(config.vocab_size - first)) as u32));
            s
        })
        .collect()
}

type Objective<'a> = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var, TensorError> + 'a;

fn tensor_err(e: starbucks_core::Error) -> TensorError {
    TensorError::Usage(e.to_string())
}

/// Finite-difference check of the full SRL and SMAE objectives on the
/// configured model; returns the worst relative error.
pub fn gradcheck(cfg: &RunConfig, coords: Option<usize>) -> Result<f64, CliError> {
    let config = cfg.encoder(cfg.data.vocab_size);
    config.validate()?;
    let ladder = cfg.ladder(&config)?;
    let mut rng = Rng::new(cfg.seed);
    let mut probe = Rng::new(cfg.seed.wrapping_add(1));
    let h = 1e-5;
    let mut check = |f: &Objective<'_>, flat: &[Tensor]| -> Result<(f64, usize), CliError> {
        let report = match coords {
            Some(n) => grad_check_sampled(f, flat, h, n, &mut probe),
            None => grad_check(f, flat, h),
        }
        .map_err(|e| CliError::Numeric(e.to_string()))?;
        Ok((report.max_rel_error, report.coordinates))
    };
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for kind in [LossKind::InfonceDot, LossKind::MnrlCosine] {
        let mut params = EncoderParams::init(&config, &mut rng)?;
        lively(&mut params.fields_mut(), &mut rng);
        let flat: Vec<Tensor> = params.fields().into_iter().cloned().collect();
        let mut loss = cfg.srl.loss.clone();
        loss.loss_kind = kind;
        loss.scale = None;
        let batch = ContrastiveBatch {
            anchors: random_sequences(&mut rng, 3, &config),
            positives: random_sequences(&mut rng, 3, &config),
            hard_negatives: (0..3).map(|_| random_sequences(&mut rng, 1, &config)).collect(),
            in_batch_negatives: true,
        };
        let teacher = {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false);
            let l = srl_losses(&mut tape, &vars, &config, &loss, &ladder.entries, &batch, None, None)?;
            tape.value(*l.entry_logits.last().expect("non-empty ladder")).clone()
        };
        let (err, n) = check(
            &|tape, vars| {
                let enc = Encoder::from_fields(vars.iter().copied(), config.num_layers)
                    .ok_or_else(|| TensorError::Usage("field count".into()))?;
                let l = srl_losses(tape, &enc, &config, &loss, &ladder.entries, &batch, Some(&teacher), None)
                    .map_err(tensor_err)?;
                Ok(l.total)
            },
            &flat,
        )?;
        worst = worst.max(err);
        lines.push(format!("srl {kind:?} {:?}\t{err:.3e}\t{n}", ladder.axis));
    }
    let smae = cfg.smae_config(ladder.clone());
    let mut params = SmaeParams::init(EncoderParams::init(&config, &mut rng)?, &config, &mut rng);
    lively(&mut params.fields_mut(), &mut rng);
    let flat: Vec<Tensor> = params.fields().into_iter().cloned().collect();
    let masked = |p: f64, rng: &mut Rng| {
        random_sequences(rng, 3, &config)
            .iter()
            .map(|s| mask(s, p, rng))
            .collect::<Result<Vec<_>, _>>()
    };
    let enc = masked(smae.p_enc, &mut rng)?;
    let dec = masked(smae.p_dec, &mut rng)?;
    let (err, n) = check(
        &|tape, vars| {
            let v = SmaeParams::from_fields(vars.iter().copied(), config.num_layers)
                .ok_or_else(|| TensorError::Usage("field count".into()))?;
            let l = smae_losses(tape, &v, &config, &ladder.entries, &enc, &dec, None).map_err(tensor_err)?;
            Ok(l.total)
        },
        &flat,
    )?;
    worst = worst.max(err);
    lines.push(format!("smae {:?}\t{err:.3e}\t{n}", ladder.axis));
    println!("objective\tmax_rel_error\tcoordinates");
    for l in lines {
        println!("{l}");
    }
    Ok(worst)
}
