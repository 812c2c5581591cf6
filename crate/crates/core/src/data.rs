//! Vocabulary, tokenization, synthetic task generation, dataset file formats
//! and contrastive batch assembly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use starbucks_tensor::Rng;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];
pub const MAX_HARD_NEGATIVES: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list whose first entries are
    /// the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r)
        {
            return Err(Error::Validation(format!(
                "vocabulary must start with {RESERVED_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by `words` in the given order, duplicates dropped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !w.is_empty() && seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens).expect("reserved prefix and unique tokens")
    }

    /// Sorted vocabulary over every whitespace word in `texts`.
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
            .collect();
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Lowercases and collapses whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// `[CLS] w1 w2 ...`, truncated to `max_seq_len`. Empty text is accepted only
/// when `allow_empty` (evaluation), yielding `[CLS]`.
pub fn tokenize(text: &str, vocab: &Vocab, max_seq_len: usize, allow_empty: bool) -> Result<Vec<u32>> {
    let mut ids = vec![CLS_ID];
    ids.extend(
        text.split_whitespace()
            .take(max_seq_len.saturating_sub(1))
            .map(|w| vocab.id(&w.to_lowercase())),
    );
    if ids.len() == 1 && !allow_empty {
        return Err(Error::Input("empty text".into()));
    }
    Ok(ids)
}

/// Inverse of [`tokenize`] for in-vocabulary text.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| id != CLS_ID && id != PAD_ID)
        .map(|&id| vocab.token(id).unwrap_or(RESERVED_TOKENS[UNK_ID as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsRecord {
    pub sentence_a: String,
    pub sentence_b: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalRecord {
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<String>,
}

/// Graded relevance: query id → doc id → grade.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalSet {
    pub docs: Vec<(String, String)>,
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: format!("invalid UTF-8: {e}"),
    })
}

/// Splits raw bytes into `(line_number, text)` pairs, skipping blank lines and
/// reporting invalid UTF-8 with its line number.
fn lines<'b>(bytes: &'b [u8], source: &str) -> Result<Vec<(usize, &'b str)>> {
    let mut out = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let text = std::str::from_utf8(raw).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message: format!("invalid UTF-8: {e}"),
        })?;
        if !text.trim().is_empty() {
            out.push((i + 1, text));
        }
    }
    Ok(out)
}

fn parse_error(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        message: message.into(),
    }
}

/// `score<TAB>sentence_a<TAB>sentence_b` per line; scores must lie in [0, 5].
pub fn parse_sts(bytes: &[u8], source: &str) -> Result<Vec<StsRecord>> {
    let mut out = Vec::new();
    for (line, text) in lines(bytes, source)? {
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_error(source, line, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let score: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_error(source, line, format!("invalid score {:?}", fields[0])))?;
        if !(0.0..=5.0).contains(&score) {
            return Err(Error::Validation(format!(
                "{source}:{line}: score {score} outside [0, 5]"
            )));
        }
        out.push(StsRecord {
            sentence_a: fields[1].to_string(),
            sentence_b: fields[2].to_string(),
            score,
        });
    }
    Ok(out)
}

/// One JSON object per line with `query`, `positive` and optional `negatives`.
pub fn parse_retrieval(bytes: &[u8], source: &str) -> Result<Vec<RetrievalRecord>> {
    let mut out = Vec::new();
    for (line, text) in lines(bytes, source)? {
        let record: RetrievalRecord = serde_json::from_str(text)
            .map_err(|e| parse_error(source, line, e.to_string()))?;
        if record.positive.trim().is_empty() || record.query.trim().is_empty() {
            return Err(Error::Validation(format!(
                "{source}:{line}: query and positive must be nonempty"
            )));
        }
        if record.negatives.len() > MAX_HARD_NEGATIVES {
            return Err(Error::Validation(format!(
                "{source}:{line}: {} negatives exceed the maximum of {MAX_HARD_NEGATIVES}",
                record.negatives.len()
            )));
        }
        out.push(record);
    }
    Ok(out)
}

/// One document per nonblank line.
pub fn parse_corpus(bytes: &[u8], source: &str) -> Result<Vec<String>> {
    Ok(lines(bytes, source)?
        .into_iter()
        .map(|(_, t)| t.to_string())
        .collect())
}

/// `id<TAB>text` per line (documents and queries).
pub fn parse_id_text(bytes: &[u8], source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, text) in lines(bytes, source)? {
        let Some((id, body)) = text.split_once('\t') else {
            return Err(parse_error(source, line, "expected id<TAB>text"));
        };
        let id = id.trim();
        if id.is_empty() {
            return Err(parse_error(source, line, "empty id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(parse_error(source, line, format!("duplicate id {id}")));
        }
        out.push((id.to_string(), body.to_string()));
    }
    Ok(out)
}

/// TREC qrels: `qid iter docid grade` per line.
pub fn parse_qrels(bytes: &[u8], source: &str) -> Result<Qrels> {
    let mut out = Qrels::new();
    for (line, text) in lines(bytes, source)? {
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_error(source, line, format!("expected 4 fields, found {}", fields.len())));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| parse_error(source, line, format!("invalid grade {:?}", fields[3])))?;
        out.entry(fields[0].to_string())
            .or_default()
            .insert(fields[2].to_string(), grade);
    }
    Ok(out)
}

pub fn load_sts(path: &Path) -> Result<Vec<StsRecord>> {
    parse_sts(&read_bytes(path)?, &path.display().to_string())
}

pub fn load_retrieval(path: &Path) -> Result<Vec<RetrievalRecord>> {
    parse_retrieval(&read_bytes(path)?, &path.display().to_string())
}

pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    parse_corpus(&read_bytes(path)?, &path.display().to_string())
}

pub fn load_eval_set(docs: &Path, queries: &Path, qrels: &Path) -> Result<EvalSet> {
    Ok(EvalSet {
        docs: parse_id_text(&read_bytes(docs)?, &docs.display().to_string())?,
        queries: parse_id_text(&read_bytes(queries)?, &queries.display().to_string())?,
        qrels: parse_qrels(&read_bytes(qrels)?, &qrels.display().to_string())?,
    })
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_sts(path: &Path, records: &[StsRecord]) -> Result<()> {
    write_lines(
        path,
        records
            .iter()
            .map(|r| format!("{}\t{}\t{}", r.score, r.sentence_a, r.sentence_b)),
    )
}

pub fn write_retrieval(path: &Path, records: &[RetrievalRecord]) -> Result<()> {
    write_lines(
        path,
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain strings serialize")),
    )
}

pub fn write_corpus(path: &Path, docs: &[String]) -> Result<()> {
    write_lines(path, docs.iter().cloned())
}

pub fn write_id_text(path: &Path, rows: &[(String, String)]) -> Result<()> {
    write_lines(path, rows.iter().map(|(id, t)| format!("{id}\t{t}")))
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    write_lines(
        path,
        qrels.iter().flat_map(|(q, docs)| {
            docs.iter().map(move |(d, g)| format!("{q} 0 {d} {g}"))
        }),
    )
}

/// Parameters of the topic-clustered synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Total vocabulary size including the four reserved tokens.
    pub vocab_size: usize,
    pub num_topics: usize,
    pub docs_per_topic: usize,
    /// Topic-agnostic filler words; the rest of the vocabulary is split across topics.
    pub common_words: usize,
    /// Probability that a sentence position holds a common word.
    pub common_rate: f64,
    pub sentence_len: (usize, usize),
    pub noise_rate: f64,
    /// Probability that a topic word in a query is swapped for its alias
    /// (`t3w5` becomes `t3a5`). Aliases get their own vocabulary slots
    /// whenever the rate is positive, so retrieval then needs learned rather
    /// than lexical matching.
    #[serde(default)]
    pub query_alias_rate: f64,
    /// Same substitution applied to the extra pre-training sentences.
    #[serde(default)]
    pub corpus_alias_rate: f64,
    /// Training queries generated per document.
    pub train_queries_per_doc: usize,
    /// Held-out evaluation queries per document.
    pub eval_queries_per_doc: usize,
    /// Extra unlabeled sentences added to the pre-training corpus.
    pub extra_corpus_sentences: usize,
    pub sts_pairs: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 244,
            num_topics: 10,
            docs_per_topic: 20,
            common_words: 40,
            common_rate: 0.25,
            sentence_len: (6, 9),
            noise_rate: 0.2,
            query_alias_rate: 0.0,
            corpus_alias_rate: 0.0,
            train_queries_per_doc: 4,
            eval_queries_per_doc: 1,
            extra_corpus_sentences: 800,
            sts_pairs: 200,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let reserved = RESERVED_TOKENS.len();
        if self.num_topics == 0 || self.docs_per_topic < 2 {
            problems.push("need num_topics >= 1 and docs_per_topic >= 2".to_string());
        }
        for (name, rate) in [("query", self.query_alias_rate), ("corpus", self.corpus_alias_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                problems.push(format!("{name}_alias_rate {rate} outside [0, 1]"));
            }
        }
        let forms = self.forms();
        if self.vocab_size < reserved + self.common_words + 2 * forms * self.num_topics.max(1) {
            problems.push(format!(
                "vocab_size {} leaves fewer than 2 words per topic",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            problems.push(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        if !(0.0..1.0).contains(&self.common_rate) || (self.common_rate > 0.0 && self.common_words == 0) {
            problems.push(format!("common_rate {} invalid", self.common_rate));
        }
        let (lo, hi) = self.sentence_len;
        if lo < 2 || hi < lo {
            problems.push(format!("sentence_len ({lo}, {hi}) must satisfy 2 <= min <= max"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn has_aliases(&self) -> bool {
        self.query_alias_rate > 0.0 || self.corpus_alias_rate > 0.0
    }

    fn forms(&self) -> usize {
        if self.has_aliases() {
            2
        } else {
            1
        }
    }

    pub fn words_per_topic(&self) -> usize {
        let forms = self.forms();
        (self.vocab_size - RESERVED_TOKENS.len() - self.common_words) / (self.num_topics * forms)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub vocab: Vocab,
    /// Unlabeled pre-training sentences (every document plus extras).
    pub corpus: Vec<String>,
    pub train: Vec<RetrievalRecord>,
    pub sts: Vec<StsRecord>,
    pub eval: EvalSet,
}

struct Generator<'s> {
    spec: &'s SyntheticTaskSpec,
    rng: Rng,
}

fn common_word(j: usize) -> String {
    format!("c{j}")
}

fn topic_word(t: usize, j: usize) -> String {
    format!("t{t}w{j}")
}

fn alias_word(t: usize, j: usize) -> String {
    format!("t{t}a{j}")
}

fn is_content_word(w: &str) -> bool {
    w.starts_with('t')
}

impl Generator<'_> {
    fn sentence(&mut self, topic: usize) -> Vec<String> {
        let (lo, hi) = self.spec.sentence_len;
        let len = lo + self.rng.below(hi - lo + 1);
        let wpt = self.spec.words_per_topic();
        (0..len)
            .map(|_| {
                if self.rng.bernoulli(self.spec.common_rate) {
                    common_word(self.rng.below(self.spec.common_words))
                } else {
                    topic_word(topic, self.rng.below(wpt))
                }
            })
            .collect()
    }

    fn alias(&mut self, words: Vec<String>, rate: f64) -> Vec<String> {
        if rate == 0.0 {
            return words;
        }
        words
            .into_iter()
            .map(|w| {
                if w.starts_with('t') && self.rng.bernoulli(rate) {
                    w.replacen('w', "a", 1)
                } else {
                    w
                }
            })
            .collect()
    }

    /// Word-level noise: each position is dropped, substituted with a
    /// same-topic word or swapped with its neighbour at `noise_rate`.
    fn paraphrase(&mut self, words: &[String], topic: usize) -> Vec<String> {
        let rate = self.spec.noise_rate;
        if rate == 0.0 {
            return words.to_vec();
        }
        let wpt = self.spec.words_per_topic();
        let mut out: Vec<String> = Vec::with_capacity(words.len());
        for w in words {
            if !self.rng.bernoulli(rate) {
                out.push(w.clone());
                continue;
            }
            match self.rng.below(3) {
                0 => {}
                1 => out.push(topic_word(topic, self.rng.below(wpt))),
                _ => {
                    out.push(w.clone());
                    let n = out.len();
                    if n >= 2 {
                        out.swap(n - 1, n - 2);
                    }
                }
            }
        }
        if out.is_empty() {
            out.push(words[self.rng.below(words.len())].clone());
        }
        out
    }
}

fn jaccard_content(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<&str> = a.split_whitespace().filter(|w| is_content_word(w)).collect();
    let sb: BTreeSet<&str> = b.split_whitespace().filter(|w| is_content_word(w)).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Deterministic topic-clustered task: documents, paraphrased queries with
/// same-topic hard negatives, graded STS pairs and held-out judgments.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut g = Generator {
        spec,
        rng: Rng::with_stream(spec.seed, starbucks_tensor::rng::streams::DATA),
    };
    let wpt = spec.words_per_topic();
    let vocab = Vocab::from_words(
        (0..spec.common_words)
            .map(common_word)
            .chain((0..spec.num_topics).flat_map(|t| (0..wpt).map(move |j| topic_word(t, j))))
            .chain(
                (0..spec.num_topics)
                    .filter(|_| spec.has_aliases())
                    .flat_map(|t| (0..wpt).map(move |j| alias_word(t, j))),
            ),
    );

    let n_docs = spec.num_topics * spec.docs_per_topic;
    let id_width = n_docs.to_string().len().max(4);
    let mut docs: Vec<(usize, Vec<String>)> = Vec::with_capacity(n_docs);
    for t in 0..spec.num_topics {
        for _ in 0..spec.docs_per_topic {
            docs.push((t, g.sentence(t)));
        }
    }
    let doc_text: Vec<String> = docs.iter().map(|(_, w)| w.join(" ")).collect();
    let doc_id = |i: usize| format!("d{i:0id_width$}");

    let mut train = Vec::with_capacity(n_docs * spec.train_queries_per_doc);
    for _ in 0..spec.train_queries_per_doc {
        for (i, (t, words)) in docs.iter().enumerate() {
            let query = g.paraphrase(words, *t);
            let query = g.alias(query, spec.query_alias_rate).join(" ");
            let same_topic: Vec<usize> = (t * spec.docs_per_topic..(t + 1) * spec.docs_per_topic)
                .filter(|&j| j != i)
                .collect();
            let mut pool = same_topic;
            g.rng.shuffle(&mut pool);
            pool.truncate(MAX_HARD_NEGATIVES);
            train.push(RetrievalRecord {
                query,
                positive: doc_text[i].clone(),
                negatives: pool.into_iter().map(|j| doc_text[j].clone()).collect(),
            });
        }
    }

    let mut queries = Vec::new();
    let mut qrels = Qrels::new();
    for k in 0..spec.eval_queries_per_doc {
        for (i, (t, words)) in docs.iter().enumerate() {
            let qid = format!("q{:0id_width$}", k * n_docs + i);
            let query = g.paraphrase(words, *t);
            queries.push((qid.clone(), g.alias(query, spec.query_alias_rate).join(" ")));
            qrels.entry(qid).or_default().insert(doc_id(i), 1);
        }
    }

    let mut sts = Vec::with_capacity(spec.sts_pairs);
    for _ in 0..spec.sts_pairs {
        let i = g.rng.below(n_docs);
        let (t, words) = &docs[i];
        let b = match g.rng.below(3) {
            0 => g.paraphrase(words, *t).join(" "),
            1 => {
                let j = t * spec.docs_per_topic + g.rng.below(spec.docs_per_topic);
                doc_text[j].clone()
            }
            _ => doc_text[g.rng.below(n_docs)].clone(),
        };
        let score = 5.0 * jaccard_content(&doc_text[i], &b);
        sts.push(StsRecord {
            sentence_a: doc_text[i].clone(),
            sentence_b: b,
            score,
        });
    }

    let mut corpus = doc_text.clone();
    for _ in 0..spec.extra_corpus_sentences {
        let t = g.rng.below(spec.num_topics);
        let sentence = g.sentence(t);
        corpus.push(g.alias(sentence, spec.corpus_alias_rate).join(" "));
    }

    Ok(SyntheticData {
        vocab,
        corpus,
        train,
        sts,
        eval: EvalSet {
            docs: doc_text
                .into_iter()
                .enumerate()
                .map(|(i, t)| (doc_id(i), t))
                .collect(),
            queries,
            qrels,
        },
    })
}

/// File names used by [`SyntheticData::write`] and [`SyntheticData::read`].
pub mod files {
    pub const VOCAB: &str = "vocab.txt";
    pub const CORPUS: &str = "corpus.txt";
    pub const TRAIN: &str = "train.jsonl";
    pub const STS: &str = "sts.tsv";
    pub const DOCS: &str = "docs.tsv";
    pub const QUERIES: &str = "queries.tsv";
    pub const QRELS: &str = "qrels.txt";
}

impl SyntheticData {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join(files::VOCAB))?;
        write_corpus(&dir.join(files::CORPUS), &self.corpus)?;
        write_retrieval(&dir.join(files::TRAIN), &self.train)?;
        write_sts(&dir.join(files::STS), &self.sts)?;
        write_id_text(&dir.join(files::DOCS), &self.eval.docs)?;
        write_id_text(&dir.join(files::QUERIES), &self.eval.queries)?;
        write_qrels(&dir.join(files::QRELS), &self.eval.qrels)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            vocab: Vocab::load(&dir.join(files::VOCAB))?,
            corpus: load_corpus(&dir.join(files::CORPUS))?,
            train: load_retrieval(&dir.join(files::TRAIN))?,
            sts: load_sts(&dir.join(files::STS))?,
            eval: load_eval_set(
                &dir.join(files::DOCS),
                &dir.join(files::QUERIES),
                &dir.join(files::QRELS),
            )?,
        })
    }
}

/// Tokenized anchors, positives and per-anchor hard negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Vec<u32>>,
    pub positives: Vec<Vec<u32>>,
    /// `hard_negatives[i]` belongs to anchor `i`; every anchor has the same count.
    pub hard_negatives: Vec<Vec<Vec<u32>>>,
    pub in_batch_negatives: bool,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn negatives_per_anchor(&self) -> usize {
        self.hard_negatives.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() || self.anchors.len() != self.positives.len() {
            return Err(Error::Input(format!(
                "batch has {} anchors and {} positives",
                self.anchors.len(),
                self.positives.len()
            )));
        }
        let k = self.negatives_per_anchor();
        if !self.hard_negatives.is_empty()
            && (self.hard_negatives.len() != self.anchors.len()
                || self.hard_negatives.iter().any(|n| n.len() != k))
        {
            return Err(Error::Input("hard negative counts are not uniform".into()));
        }
        Ok(())
    }
}

/// Record order for one epoch: the batch layout is a fresh shuffle split into
/// consecutive chunks, the last one possibly short.
pub fn epoch_batches(
    num_records: usize,
    batch_size: usize,
    in_batch_negatives: bool,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || (in_batch_negatives && batch_size < 2) {
        return Err(Error::Config(format!(
            "batch_size {batch_size} too small{}",
            if in_batch_negatives { " for in-batch negatives" } else { "" }
        )));
    }
    let mut order: Vec<usize> = (0..num_records).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Chooses `k` negatives from `pool`: a random subset when the pool is large
/// enough, otherwise the shuffled pool repeated cyclically.
pub fn sample_negatives<'p>(pool: &'p [String], k: usize, rng: &mut Rng) -> Result<Vec<&'p String>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::Input("record has no negatives to sample".into()));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut idx);
    Ok((0..k).map(|i| &pool[idx[i % idx.len()]]).collect())
}

/// Tokenizes the records at `indices` into one contrastive batch.
pub fn assemble_batch(
    records: &[RetrievalRecord],
    indices: &[usize],
    vocab: &Vocab,
    max_seq_len: usize,
    hard_negatives: usize,
    in_batch_negatives: bool,
    rng: &mut Rng,
) -> Result<ContrastiveBatch> {
    let tok = |t: &str| tokenize(t, vocab, max_seq_len, false);
    let mut batch = ContrastiveBatch {
        anchors: Vec::with_capacity(indices.len()),
        positives: Vec::with_capacity(indices.len()),
        hard_negatives: Vec::new(),
        in_batch_negatives,
    };
    for &i in indices {
        let r = &records[i];
        batch.anchors.push(tok(&r.query)?);
        batch.positives.push(tok(&r.positive)?);
        if hard_negatives > 0 {
            let negs = sample_negatives(&r.negatives, hard_negatives, rng)?;
            batch
                .hard_negatives
                .push(negs.into_iter().map(|n| tok(n)).collect::<Result<_>>()?);
        }
    }
    batch.validate()?;
    Ok(batch)
}

/// Shuffled contrastive batches covering every record once.
pub fn make_batches(
    records: &[RetrievalRecord],
    vocab: &Vocab,
    max_seq_len: usize,
    batch_size: usize,
    hard_negatives: usize,
    in_batch_negatives: bool,
    rng: &mut Rng,
) -> Result<Vec<ContrastiveBatch>> {
    epoch_batches(records.len(), batch_size, in_batch_negatives, rng)?
        .iter()
        .map(|idx| {
            assemble_batch(records, idx, vocab, max_seq_len, hard_negatives, in_batch_negatives, rng)
        })
        .collect()
}
