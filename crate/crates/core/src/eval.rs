//! Ranking and correlation metrics, significance tests, per-entry evaluation
//! sweeps and the encode/search latency benchmark.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;
use starbucks_tensor::{kernels, Tensor};

use crate::data::{self, EvalSet, Qrels, StsRecord, Vocab};
use crate::encoder::{EncoderConfig, EncoderParams, PoolMode};
use crate::error::{Error, Result};
use crate::subnetworks::{self, Ladder, LadderEntry, Similarity};

pub const DEFAULT_K: usize = 10;

/// Average (fractional) ranks, 1-based.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() || pred.len() < 2 {
        return Err(Error::Usage(format!(
            "spearman needs two equal-length lists of >= 2 values, got {} and {}",
            pred.len(),
            gold.len()
        )));
    }
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::Validation("spearman input is not finite".into()));
    }
    pearson(&average_ranks(pred), &average_ranks(gold))
        .map(|r| r.clamp(-1.0, 1.0))
        .ok_or_else(|| Error::Validation("correlation undefined for a constant input".into()))
}

/// Mean of a per-query ranking metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingMetric {
    pub mean: f64,
    pub per_query: Vec<(String, f64)>,
    /// Queries absent from the judgments (scored 0).
    pub missing: usize,
}

pub type Rankings = BTreeMap<String, Vec<String>>;

fn per_query(rankings: &Rankings, qrels: &Qrels, k: usize, score: impl Fn(&[String], &BTreeMap<String, u32>) -> f64) -> Result<RankingMetric> {
    if k == 0 {
        return Err(Error::Usage("k must be >= 1".into()));
    }
    let mut per_query = Vec::with_capacity(rankings.len());
    let mut missing = 0;
    for (qid, ranked) in rankings {
        let value = match qrels.get(qid) {
            Some(judged) => score(&ranked[..ranked.len().min(k)], judged),
            None => {
                missing += 1;
                0.0
            }
        };
        per_query.push((qid.clone(), value));
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
    };
    Ok(RankingMetric {
        mean,
        per_query,
        missing,
    })
}

/// Reciprocal rank of the first relevant (grade > 0) document in the top `k`.
pub fn mrr_at_k(rankings: &Rankings, qrels: &Qrels, k: usize) -> Result<RankingMetric> {
    per_query(rankings, qrels, k, |top, judged| {
        top.iter()
            .position(|d| judged.get(d).is_some_and(|&g| g > 0))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

/// nDCG with gain `2^rel − 1` and discount `log2(rank + 1)`.
pub fn ndcg_at_k(rankings: &Rankings, qrels: &Qrels, k: usize) -> Result<RankingMetric> {
    per_query(rankings, qrels, k, |top, judged| {
        let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
        let dcg: f64 = top
            .iter()
            .enumerate()
            .map(|(i, d)| gain(judged.get(d).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
            .sum();
        let mut ideal: Vec<u32> = judged.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
            .sum();
        if idcg > 0.0 {
            dcg / idcg
        } else {
            0.0
        }
    })
}

/// Two-tailed paired Student's t-test.
///
/// All-zero differences give `p = 1`; constant nonzero differences give an
/// unbounded statistic and `p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Usage(format!(
            "paired t-test needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(1.0);
    }
    if var == 0.0 {
        return Ok(0.0);
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::Validation(format!("t distribution: {e}")))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Fisher r-to-z comparison of two independent correlations (two-tailed).
pub fn fisher_z_test(r1: f64, r2: f64, n1: usize, n2: usize) -> Result<f64> {
    for r in [r1, r2] {
        if !(r.abs() < 1.0) {
            return Err(Error::Validation(format!("correlation {r} is on or outside the boundary")));
        }
    }
    if n1 < 4 || n2 < 4 {
        return Err(Error::Usage(format!("sample sizes {n1} and {n2} must be >= 4")));
    }
    let z = (r1.atanh() - r2.atanh()) / (1.0 / (n1 - 3) as f64 + 1.0 / (n2 - 3) as f64).sqrt();
    Ok(erfc(z.abs() / std::f64::consts::SQRT_2))
}

/// Indices of the `k` highest scores, ties broken by ascending `ids`.
pub fn top_k(scores: &[f64], ids: &[String], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b]))
    };
    let k = k.min(order.len());
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order.truncate(k);
    order
}

/// Query-by-document score matrix `[Q, N]`.
pub fn score_all(queries: &Tensor, docs: &Tensor, metric: Similarity) -> Result<Tensor> {
    let (q, n, d) = (queries.rows(), docs.rows(), queries.cols());
    if docs.cols() != d {
        return Err(Error::Usage(format!(
            "query dim {d} differs from document dim {}",
            docs.cols()
        )));
    }
    let normalize = |t: &Tensor| -> Result<Tensor> {
        let mut out = t.clone();
        for r in 0..t.rows() {
            let norm = kernels::dot(t.row(r), t.row(r)).sqrt();
            if norm == 0.0 {
                return Err(Error::Validation(format!("zero vector at row {r} under cosine")));
            }
            for v in &mut out.data_mut()[r * d..(r + 1) * d] {
                *v /= norm;
            }
        }
        Ok(out)
    };
    let (qs, ds) = match metric {
        Similarity::Dot => (queries.clone(), docs.clone()),
        Similarity::Cosine => (normalize(queries)?, normalize(docs)?),
    };
    let mut out = vec![0.0; q * n];
    kernels::matmul_nt_acc(qs.data(), ds.data(), &mut out, q, d, n);
    Ok(Tensor::matrix(q, n, out)?)
}

fn rankings_from_scores(scores: &Tensor, query_ids: &[String], doc_ids: &[String], k: usize) -> Rankings {
    query_ids
        .iter()
        .enumerate()
        .map(|(i, qid)| {
            let top = top_k(scores.row(i), doc_ids, k);
            (qid.clone(), top.into_iter().map(|j| doc_ids[j].clone()).collect())
        })
        .collect()
}

/// One trained model with the ladder it was trained on.
#[derive(Clone, Copy, Debug)]
pub struct SweepModel<'a> {
    pub params: &'a EncoderParams,
    pub config: &'a EncoderConfig,
    pub ladder: &'a Ladder,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    pub pool_mode: PoolMode,
    /// Similarity used for retrieval ranking.
    pub similarity: Similarity,
    /// Similarity used for STS correlation.
    pub sts_similarity: Similarity,
    pub k: usize,
    pub chunk: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            pool_mode: PoolMode::Cls,
            similarity: Similarity::Dot,
            sts_similarity: Similarity::Cosine,
            k: DEFAULT_K,
            chunk: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub entry: String,
    pub embed_dim: usize,
    pub mrr: Option<f64>,
    pub ndcg: Option<f64>,
    pub spearman: Option<f64>,
    pub hybrid_mrr: Option<f64>,
    pub hybrid_ndcg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub k: usize,
    pub rows: Vec<EvalRow>,
    pub missing_queries: usize,
    /// Wall-clock seconds; excluded from the written report files.
    #[serde(skip)]
    pub encode_seconds: f64,
    #[serde(skip)]
    pub search_seconds: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    fn metric_columns(&self) -> [String; 5] {
        let k = self.k;
        [
            format!("mrr@{k}"),
            format!("ndcg@{k}"),
            "spearman".to_string(),
            format!("hybrid_mrr@{k}"),
            format!("hybrid_ndcg@{k}"),
        ]
    }

    /// Tab-separated table with one row per ladder entry.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("entry\tdim\t{}\n", self.metric_columns().join("\t"));
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.entry,
                r.embed_dim,
                fmt_opt(r.mrr),
                fmt_opt(r.ndcg),
                fmt_opt(r.spearman),
                fmt_opt(r.hybrid_mrr),
                fmt_opt(r.hybrid_ndcg)
            ));
        }
        out
    }

    /// One `{"entry", "dim", "metric", "value"}` object per line.
    pub fn to_jsonl(&self) -> String {
        let names = self.metric_columns();
        let mut out = String::new();
        for r in &self.rows {
            let values = [r.mrr, r.ndcg, r.spearman, r.hybrid_mrr, r.hybrid_ndcg];
            for (name, v) in names.iter().zip(values) {
                if let Some(v) = v {
                    let line = serde_json::json!({
                        "entry": r.entry,
                        "dim": r.embed_dim,
                        "metric": name,
                        "value": v,
                    });
                    out.push_str(&line.to_string());
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Evaluation inputs: a retrieval set and/or STS pairs, plus the vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct EvalInputs<'a> {
    pub vocab: &'a Vocab,
    pub retrieval: Option<&'a EvalSet>,
    pub sts: Option<&'a [StsRecord]>,
}

fn tokenize_all<'t>(texts: impl Iterator<Item = &'t str>, vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<u32>>> {
    texts.map(|t| data::tokenize(t, vocab, max_len, true)).collect()
}

struct EncodedRetrieval {
    queries: Tensor,
    docs: Tensor,
}

/// Per-entry metrics over the ladder of `primary`; with `secondary` (the
/// other axis, same ladder length and dims) a hybrid column is added that
/// ranks by the mean of both branches' scores.
pub fn eval_sweep(
    primary: SweepModel<'_>,
    secondary: Option<SweepModel<'_>>,
    inputs: &EvalInputs<'_>,
    options: &SweepOptions,
) -> Result<EvalReport> {
    primary.ladder.validate(primary.config)?;
    if let Some(s) = secondary {
        s.ladder.validate(s.config)?;
        let dims = |l: &Ladder| l.entries.iter().map(|e| e.embed_dim).collect::<Vec<_>>();
        if dims(s.ladder) != dims(primary.ladder) {
            return Err(Error::Config(
                "hybrid evaluation needs ladders with matching embedding dims".into(),
            ));
        }
    }
    if inputs.retrieval.is_none() && inputs.sts.is_none() {
        return Err(Error::Usage("no evaluation data given".into()));
    }
    let max_len = primary.config.max_seq_len;
    let retrieval_tokens = match inputs.retrieval {
        Some(set) => Some((
            tokenize_all(set.queries.iter().map(|(_, t)| t.as_str()), inputs.vocab, max_len)?,
            tokenize_all(set.docs.iter().map(|(_, t)| t.as_str()), inputs.vocab, max_len)?,
        )),
        None => None,
    };
    let sts_tokens = match inputs.sts {
        Some(recs) => Some((
            tokenize_all(recs.iter().map(|r| r.sentence_a.as_str()), inputs.vocab, max_len)?,
            tokenize_all(recs.iter().map(|r| r.sentence_b.as_str()), inputs.vocab, max_len)?,
        )),
        None => None,
    };

    let mut encode_seconds = 0.0;
    let mut encode = |m: &SweepModel<'_>, e: &LadderEntry, seqs: &[Vec<u32>]| -> Result<Tensor> {
        let t0 = Instant::now();
        let out = subnetworks::encode(m.params, m.config, e, seqs, options.pool_mode, options.chunk);
        encode_seconds += t0.elapsed().as_secs_f64();
        out
    };

    let mut search_seconds = 0.0;
    let mut rows = Vec::with_capacity(primary.ladder.len());
    let mut missing_queries = 0;
    for (i, entry) in primary.ladder.entries.iter().enumerate() {
        let mut row = EvalRow {
            entry: entry.name.clone(),
            embed_dim: entry.embed_dim,
            mrr: None,
            ndcg: None,
            spearman: None,
            hybrid_mrr: None,
            hybrid_ndcg: None,
        };
        if let (Some(set), Some((q, d))) = (inputs.retrieval, &retrieval_tokens) {
            let enc = EncodedRetrieval {
                queries: encode(&primary, entry, q)?,
                docs: encode(&primary, entry, d)?,
            };
            let qids: Vec<String> = set.queries.iter().map(|(id, _)| id.clone()).collect();
            let dids: Vec<String> = set.docs.iter().map(|(id, _)| id.clone()).collect();
            let t0 = Instant::now();
            let scores = score_all(&enc.queries, &enc.docs, options.similarity)?;
            let rankings = rankings_from_scores(&scores, &qids, &dids, options.k);
            search_seconds += t0.elapsed().as_secs_f64();
            let mrr = mrr_at_k(&rankings, &set.qrels, options.k)?;
            missing_queries = missing_queries.max(mrr.missing);
            row.mrr = Some(mrr.mean);
            row.ndcg = Some(ndcg_at_k(&rankings, &set.qrels, options.k)?.mean);
            if let Some(s) = secondary {
                let other = &s.ladder.entries[i];
                let second = EncodedRetrieval {
                    queries: encode(&s, other, q)?,
                    docs: encode(&s, other, d)?,
                };
                let t0 = Instant::now();
                let s2 = score_all(&second.queries, &second.docs, options.similarity)?;
                let fused: Vec<f64> = scores
                    .data()
                    .iter()
                    .zip(s2.data())
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                let fused = Tensor::matrix(scores.rows(), scores.cols(), fused)?;
                let rankings = rankings_from_scores(&fused, &qids, &dids, options.k);
                search_seconds += t0.elapsed().as_secs_f64();
                row.hybrid_mrr = Some(mrr_at_k(&rankings, &set.qrels, options.k)?.mean);
                row.hybrid_ndcg = Some(ndcg_at_k(&rankings, &set.qrels, options.k)?.mean);
            }
        }
        if let (Some(recs), Some((a, b))) = (inputs.sts, &sts_tokens) {
            let ea = encode(&primary, entry, a)?;
            let eb = encode(&primary, entry, b)?;
            let pred = (0..recs.len())
                .map(|r| subnetworks::similarity(ea.row(r), eb.row(r), options.sts_similarity))
                .collect::<Result<Vec<f64>>>()?;
            let gold: Vec<f64> = recs.iter().map(|r| r.score).collect();
            row.spearman = Some(spearman(&pred, &gold)?);
        }
        rows.push(row);
    }
    Ok(EvalReport {
        k: options.k,
        rows,
        missing_queries,
        encode_seconds,
        search_seconds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRow {
    pub entry: String,
    pub embed_dim: usize,
    pub encode_ms: f64,
    pub search_ms: f64,
    pub total_ms: f64,
    pub percent_of_full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyTable {
    pub rows: Vec<LatencyRow>,
    pub warnings: Vec<String>,
}

impl LatencyTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("entry\tdim\tencode_ms\tsearch_ms\ttotal_ms\tpercent_of_full\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\n",
                r.entry, r.embed_dim, r.encode_ms, r.search_ms, r.total_ms, r.percent_of_full
            ));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times query encoding (one query per forward) plus flat top-10 dot-product
/// search over a precomputed corpus, per entry; reports medians over `reps`.
pub fn bench_latency(
    params: &EncoderParams,
    config: &EncoderConfig,
    ladder: &Ladder,
    queries: &[Vec<u32>],
    corpus: &[Vec<u32>],
    reps: usize,
    pool_mode: PoolMode,
) -> Result<LatencyTable> {
    ladder.validate(config)?;
    if queries.is_empty() || corpus.is_empty() {
        return Err(Error::Input("benchmark needs queries and a corpus".into()));
    }
    let reps = reps.max(5);
    let mut rows = Vec::with_capacity(ladder.len());
    let mut warnings = Vec::new();
    let doc_ids: Vec<String> = (0..corpus.len()).map(|i| format!("{i:08}")).collect();
    for entry in &ladder.entries {
        let docs = subnetworks::encode(params, config, entry, corpus, pool_mode, 64)?;
        let (mut enc_t, mut search_t, mut total_t) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..reps {
            let mut encoded = Vec::with_capacity(queries.len());
            let t0 = Instant::now();
            for q in queries {
                let e = subnetworks::encode(params, config, entry, std::slice::from_ref(q), pool_mode, 1)?;
                encoded.push(e);
            }
            let enc = t0.elapsed().as_secs_f64() * 1e3;
            let t1 = Instant::now();
            for e in &encoded {
                let s = score_all(e, &docs, Similarity::Dot)?;
                std::hint::black_box(top_k(s.data(), &doc_ids, DEFAULT_K));
            }
            let search = t1.elapsed().as_secs_f64() * 1e3;
            enc_t.push(enc);
            search_t.push(search);
            total_t.push(enc + search);
        }
        let total = median(&total_t);
        if total < 10.0 {
            warnings.push(format!(
                "{}: median run of {total:.3} ms is below 10 ms; timer resolution may dominate",
                entry.name
            ));
        }
        rows.push(LatencyRow {
            entry: entry.name.clone(),
            embed_dim: entry.embed_dim,
            encode_ms: median(&enc_t),
            search_ms: median(&search_t),
            total_ms: total,
            percent_of_full: 0.0,
        });
    }
    let full = rows.last().map_or(1.0, |r| r.total_ms);
    for r in &mut rows {
        r.percent_of_full = 100.0 * r.total_ms / full;
    }
    Ok(LatencyTable { rows, warnings })
}
