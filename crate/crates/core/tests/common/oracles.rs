//! Independent reference implementations used as test oracles.

use std::collections::BTreeMap;

use starbucks_core::data::{ContrastiveBatch, Qrels};
use starbucks_core::encoder::{EncoderConfig, EncoderParams, PoolMode};
use starbucks_core::eval::Rankings;
use starbucks_core::srl::{LossKind, MASKED_LOGIT};
use starbucks_core::subnetworks::{encode, LadderEntry};
use starbucks_tensor::Rng;

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Contrastive loss of one entry from separately encoded anchors and candidates.
pub fn entry_loss(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    entry: &LadderEntry,
    kind: LossKind,
    pool: PoolMode,
    b: &ContrastiveBatch,
) -> f64 {
    let anchors = encode(params, cfg, entry, &b.anchors, pool, 2).unwrap();
    let mut cands = b.positives.clone();
    cands.extend(b.hard_negatives.iter().flatten().cloned());
    let cands = encode(params, cfg, entry, &cands, pool, 3).unwrap();
    let n = b.len();
    let negs = b.negatives_per_anchor().max(1);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..cands.rows())
            .map(|j| {
                let (a, c) = (anchors.row(i), cands.row(j));
                let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
                let s = match kind {
                    LossKind::InfonceDot => dot,
                    LossKind::MnrlCosine => 20.0 * dot / (norm(a) * norm(c)),
                };
                let own = j == i || (j >= n && (j - n) / negs == i);
                if b.in_batch_negatives || own {
                    s
                } else {
                    s + MASKED_LOGIT
                }
            })
            .collect();
        total -= log_softmax(&logits)[i];
    }
    total / n as f64
}

/// Row-averaged KL(softmax(p/τ) ‖ softmax(q/τ)).
pub fn kl(p: &[Vec<f64>], q: &[Vec<f64>], tau: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(pr, qr)| {
            let lp = log_softmax(&pr.iter().map(|v| v / tau).collect::<Vec<_>>());
            let lq = log_softmax(&qr.iter().map(|v| v / tau).collect::<Vec<_>>());
            lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        / p.len() as f64
}

pub fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:03}")).collect()
}

/// Random rankings over a small pool with graded judgments on a random subset.
pub fn ranking_instance(rng: &mut Rng) -> (Rankings, Qrels, usize) {
    let pool = ids("d", 2 + rng.below(8));
    let mut rankings = Rankings::new();
    let mut qrels = Qrels::new();
    for q in ids("q", 1 + rng.below(4)) {
        let mut order = pool.clone();
        rng.shuffle(&mut order);
        order.truncate(1 + rng.below(pool.len()));
        let mut judged = BTreeMap::new();
        for d in &pool {
            if rng.bernoulli(0.4) {
                judged.insert(d.clone(), rng.below(4) as u32);
            }
        }
        if !judged.is_empty() || rng.bernoulli(0.5) {
            qrels.insert(q.clone(), judged);
        }
        rankings.insert(q, order);
    }
    (rankings, qrels, 1 + rng.below(10))
}

pub fn mrr(r: &Rankings, q: &Qrels, k: usize) -> f64 {
    let mut total = 0.0;
    for (qid, ranked) in r {
        let Some(judged) = q.get(qid) else { continue };
        for (i, d) in ranked.iter().enumerate().take(k) {
            if judged.get(d).copied().unwrap_or(0) > 0 {
                total += 1.0 / (i as f64 + 1.0);
                break;
            }
        }
    }
    total / r.len() as f64
}

fn dcg(grades: &[u32], k: usize) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| (2f64.powi(g as i32) - 1.0) / (i as f64 + 2.0).log2())
        .sum()
}

fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// nDCG with the ideal ordering found by exhaustive search.
pub fn ndcg(r: &Rankings, q: &Qrels, k: usize) -> f64 {
    let mut total = 0.0;
    for (qid, ranked) in r {
        let Some(judged) = q.get(qid) else { continue };
        let grades: Vec<u32> = ranked.iter().map(|d| judged.get(d).copied().unwrap_or(0)).collect();
        let all: Vec<u32> = judged.values().copied().collect();
        let ideal = permutations(&all).iter().map(|p| dcg(p, k)).fold(0.0, f64::max);
        if ideal > 0.0 {
            total += dcg(&grades, k) / ideal;
        }
    }
    total / r.len() as f64
}

/// Pearson correlation of counting ranks (strictly-below count plus half the tied block).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let below = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Two-tailed Student t p-value by quadrature of the unnormalized density,
/// with t = tan(θ) mapping the infinite tail onto a finite interval.
pub fn t_pvalue(t: f64, nu: f64) -> f64 {
    let f = |th: f64| {
        let x = th.tan();
        (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0) / th.cos().powi(2)
    };
    let end = std::f64::consts::FRAC_PI_2 - 1e-12;
    simpson(f, t.abs().atan(), end, 20_000) / simpson(f, 0.0, end, 20_000)
}

/// Paired t statistic and degrees of freedom.
pub fn paired_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let s = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (m / (s / n.sqrt()), n - 1.0)
}

/// Maclaurin series of erf; accurate to ~1e-9 for |x| <= 4.
pub fn erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

/// Two-tailed Fisher r-to-z p-value through the erf series.
pub fn fisher_pvalue(r1: f64, r2: f64, n1: usize, n2: usize) -> Option<f64> {
    let z = (r1.atanh() - r2.atanh()) / (1.0 / (n1 - 3) as f64 + 1.0 / (n2 - 3) as f64).sqrt();
    (z.abs() <= 5.0).then(|| 1.0 - erf(z.abs() / 2f64.sqrt()))
}
