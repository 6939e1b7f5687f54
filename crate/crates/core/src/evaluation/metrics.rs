use std::collections::HashSet;

use crate::corpus::NewsIdx;
use crate::error::{dim_err, Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(dim_err(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(())
}

/// Positions in descending-score order; ties keep input order.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` for single-class impressions.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l > 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    // Rank-sum form with average ranks for ties.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] > 0 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Mean over positives of `1/rank`. `None` without positives.
pub fn mrr(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l > 0).count();
    if pos == 0 {
        return Ok(None);
    }
    let total: f64 = ranked(scores)
        .iter()
        .enumerate()
        .filter(|&(_, &i)| labels[i] > 0)
        .map(|(r, _)| 1.0 / (r + 1) as f64)
        .sum();
    Ok(Some(total / pos as f64))
}

/// DCG@k over the descending-score order, normalized by the ideal DCG@k.
/// `None` when every label is zero.
pub fn ndcg_at_k(scores: &[f64], labels: &[u8], k: usize) -> Result<Option<f64>> {
    check(scores, labels)?;
    if k == 0 {
        return Err(Error::Config("nDCG cut-off must be at least 1".into()));
    }
    if labels.iter().all(|&l| l == 0) {
        return Ok(None);
    }
    let dcg = |order: &[usize]| -> f64 {
        order
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, &i)| labels[i] as f64 / ((r + 2) as f64).log2())
            .sum()
    };
    let mut ideal: Vec<usize> = (0..labels.len()).collect();
    ideal.sort_by(|&a, &b| labels[b].cmp(&labels[a]).then(a.cmp(&b)));
    Ok(Some(dcg(&ranked(scores)) / dcg(&ideal)))
}

/// `|retrieved ∩ clicked| / |clicked|`. `None` when nothing was clicked.
pub fn recall_at_k(retrieved: &[NewsIdx], clicked: &[NewsIdx]) -> Option<f64> {
    let clicked: HashSet<NewsIdx> = clicked.iter().copied().collect();
    if clicked.is_empty() {
        return None;
    }
    let hits = retrieved
        .iter()
        .collect::<HashSet<_>>()
        .into_iter()
        .filter(|i| clicked.contains(i))
        .count();
    Some(hits as f64 / clicked.len() as f64)
}

/// Exact top-`k` of a pool by inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ids: Vec<NewsIdx>,
    pub scores: Vec<f64>,
    /// Fewer than `k` items were eligible.
    pub truncated: bool,
}

/// Scores every pool row (`pool` is row-major `n×d`) against `query`, drops
/// `exclude`, and keeps the `k` best by descending score, ties to the lower
/// index.
pub fn brute_force_topk(
    query: &[f64],
    pool: &[f64],
    k: usize,
    exclude: &HashSet<NewsIdx>,
) -> Result<RetrievalResult> {
    let d = query.len();
    if d == 0 || !pool.len().is_multiple_of(d) {
        return Err(dim_err("pool is not a whole number of query-sized rows"));
    }
    let mut scored: Vec<(f64, NewsIdx)> = pool
        .chunks_exact(d)
        .enumerate()
        .filter(|(i, _)| !exclude.contains(i))
        .map(|(i, row)| (crate::numerics::kernels::dot(query, row), i))
        .collect();
    let cmp = |a: &(f64, NewsIdx), b: &(f64, NewsIdx)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let truncated = scored.len() < k;
    if !truncated && k < scored.len() {
        if k > 0 {
            scored.select_nth_unstable_by(k - 1, cmp);
        }
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(RetrievalResult {
        ids: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
        truncated,
    })
}

/// Running mean with a fixed accumulation order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAcc {
    pub n: usize,
    sum: f64,
}

impl MeanAcc {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
