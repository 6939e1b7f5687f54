use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{clicked_by_user, Corpus, ImpressionLog, NewsIdx};
use crate::encoders::{
    average_pool_user, recall_embedding, user_embedding, BasisMemory, ComposeMode, NewsEmbeddings,
    RankingModel, COLD_START,
};
use crate::error::{Error, Result};
use crate::numerics::{kernels, ParamStore};

use super::metrics::{auc, brute_force_topk, mrr, ndcg_at_k, recall_at_k, MeanAcc};
use super::report::MetricsReport;

/// Encodes the listed news; other rows of the returned table are zero.
pub fn encode_news_subset(
    model: &RankingModel,
    corpus: &Corpus,
    needed: impl IntoIterator<Item = NewsIdx>,
) -> Result<NewsEmbeddings> {
    let mut mark = vec![false; corpus.len()];
    for i in needed {
        if i >= corpus.len() {
            return Err(Error::Input(format!("news index {i} outside corpus")));
        }
        mark[i] = true;
    }
    let idx: Vec<NewsIdx> = (0..corpus.len()).filter(|&i| mark[i]).collect();
    let rows: Vec<Vec<f64>> = idx
        .par_iter()
        .map(|&i| model.encode_news(corpus.article(i)))
        .collect::<Result<_>>()?;
    let d = model.dim();
    let mut data = vec![0.0; corpus.len() * d];
    for (&i, r) in idx.iter().zip(rows) {
        data[i * d..(i + 1) * d].copy_from_slice(&r);
    }
    NewsEmbeddings::from_rows(d, data)
}

/// Every article of the corpus.
pub fn encode_all_news(model: &RankingModel, corpus: &Corpus) -> Result<NewsEmbeddings> {
    encode_news_subset(model, corpus, 0..corpus.len())
}

/// News referenced by the impressions, histories included.
pub fn referenced_news(impressions: &[ImpressionLog]) -> impl Iterator<Item = NewsIdx> + '_ {
    impressions.iter().flat_map(|imp| {
        imp.history
            .iter()
            .copied()
            .chain(imp.candidates.iter().map(|c| c.0))
    })
}

/// User embeddings for each distinct history, computed once each. Returns the
/// embedding table and, per history, its row in the table.
pub fn user_embeddings_for<'h>(
    user_params: &ParamStore,
    model: &RankingModel,
    news: &NewsEmbeddings,
    histories: impl IntoIterator<Item = &'h [NewsIdx]>,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut unique: Vec<&[NewsIdx]> = Vec::new();
    let mut seen: HashMap<&[NewsIdx], usize> = HashMap::new();
    let mut slots = Vec::new();
    for h in histories {
        let slot = *seen.entry(h).or_insert_with(|| {
            unique.push(h);
            unique.len() - 1
        });
        slots.push(slot);
    }
    let cfg = model.config();
    let table = unique
        .par_iter()
        .map(|h| user_embedding(user_params, cfg, &news.rows(h)))
        .collect::<Result<Vec<_>>>()?;
    Ok((table, slots))
}

/// Mean AUC, MRR, nDCG@5 and nDCG@10 over impressions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub impressions: usize,
}

/// Averages each metric over the impressions where it is defined.
pub fn ranking_metrics_from_scores(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<RankingMetrics> {
    if scores.is_empty() {
        return Err(Error::Config("no impressions to evaluate".into()));
    }
    let mut acc = [MeanAcc::default(); 4];
    for (s, l) in scores.iter().zip(labels) {
        let values = [auc(s, l)?, mrr(s, l)?, ndcg_at_k(s, l, 5)?, ndcg_at_k(s, l, 10)?];
        for (a, v) in acc.iter_mut().zip(values) {
            if let Some(v) = v {
                a.push(v);
            }
        }
    }
    let [a, m, n5, n10] = acc;
    Ok(RankingMetrics {
        auc: a.mean(),
        mrr: m.mean(),
        ndcg5: n5.mean(),
        ndcg10: n10.mean(),
        impressions: a.n,
    })
}

/// Click scores of every candidate of every impression.
pub fn score_impressions(
    model: &RankingModel,
    news: &NewsEmbeddings,
    impressions: &[ImpressionLog],
) -> Result<Vec<Vec<f64>>> {
    let (users, slots) = user_embeddings_for(
        model.params(),
        model,
        news,
        impressions.iter().map(|i| i.history.as_slice()),
    )?;
    Ok(impressions
        .iter()
        .zip(slots)
        .map(|(imp, s)| {
            imp.candidates
                .iter()
                .map(|&(c, _)| kernels::dot(&users[s], news.row(c)))
                .collect()
        })
        .collect())
}

pub fn ranking_metrics(
    model: &RankingModel,
    corpus: &Corpus,
    impressions: &[ImpressionLog],
) -> Result<RankingMetrics> {
    if impressions.is_empty() {
        return Err(Error::Config("no impressions to evaluate".into()));
    }
    let news = encode_news_subset(model, corpus, referenced_news(impressions))?;
    let scores = score_impressions(model, &news, impressions)?;
    let labels: Vec<Vec<u8>> = impressions
        .iter()
        .map(|imp| imp.candidates.iter().map(|c| c.1).collect())
        .collect();
    ranking_metrics_from_scores(&scores, &labels)
}

/// Ranking report with AUC, MRR, nDCG@5 and nDCG@10.
pub fn evaluate_ranking(
    model: &RankingModel,
    corpus: &Corpus,
    impressions: &[ImpressionLog],
) -> Result<MetricsReport> {
    let start = std::time::Instant::now();
    let m = ranking_metrics(model, corpus, impressions)?;
    let mut report = MetricsReport::new("UniRec", "rank");
    report.push("AUC", m.auc);
    report.push("MRR", m.mrr);
    report.push("nDCG@5", m.ndcg5);
    report.push("nDCG@10", m.ndcg10);
    report.count = m.impressions;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// A user's recall query: history, held-out clicks and the pool exclusions.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallUser {
    pub user_id: String,
    pub history: Vec<NewsIdx>,
    /// Clicks in the evaluated period that remain in the pool.
    pub targets: Vec<NewsIdx>,
    /// Everything clicked in the training period.
    pub exclude: HashSet<NewsIdx>,
}

/// Builds one query per user of `eval` with at least one eligible click.
/// The pool excludes the user's training-period clicks; the history used is
/// that of the user's first evaluated impression.
pub fn recall_users(train_period: &[ImpressionLog], eval: &[ImpressionLog]) -> Vec<RecallUser> {
    let clicked = clicked_by_user(train_period);
    let mut order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, RecallUser> = HashMap::new();
    for imp in eval {
        let u = by_user.entry(imp.user_id.as_str()).or_insert_with(|| {
            order.push(imp.user_id.as_str());
            RecallUser {
                user_id: imp.user_id.clone(),
                history: imp.history.clone(),
                targets: Vec::new(),
                exclude: clicked.get(imp.user_id.as_str()).cloned().unwrap_or_default(),
            }
        });
        u.exclude.extend(imp.history.iter().copied());
    }
    for imp in eval {
        let u = by_user.get_mut(imp.user_id.as_str()).expect("user registered");
        for c in imp.clicked() {
            if !u.exclude.contains(&c) && !u.targets.contains(&c) {
                u.targets.push(c);
            }
        }
    }
    order
        .into_iter()
        .filter_map(|id| by_user.remove(id))
        .filter(|u| !u.targets.is_empty())
        .collect()
}

/// How the recall query is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RecallMethod {
    UniRec(ComposeMode),
    /// Mean of the clicked-news embeddings.
    AveragePool,
    /// Uniform random query, seeded per user.
    Random { seed: u64 },
}

impl RecallMethod {
    pub fn label(&self) -> &'static str {
        match self {
            RecallMethod::UniRec(mode) => mode.label(),
            RecallMethod::AveragePool => "YoutubeNet",
            RecallMethod::Random { .. } => "Random",
        }
    }
}

/// Parameters a recall query may draw on.
#[derive(Debug, Clone, Copy)]
pub struct RecallModel<'a> {
    pub ranking: &'a RankingModel,
    /// User tower producing `u_ra` for the basis attention.
    pub user_params: &'a ParamStore,
    pub basis: Option<&'a BasisMemory>,
}

impl<'a> RecallModel<'a> {
    pub fn new(ranking: &'a RankingModel, basis: Option<&'a BasisMemory>) -> Self {
        RecallModel {
            ranking,
            user_params: ranking.params(),
            basis,
        }
    }

    /// Recall query of one user.
    pub fn query(&self, history: &[Vec<f64>], method: RecallMethod, salt: u64) -> Result<Vec<f64>> {
        let cfg = self.ranking.config();
        match method {
            RecallMethod::UniRec(mode) => {
                let basis = self.basis.ok_or_else(|| {
                    Error::Usage("recall with basis embeddings needs a stage-2 checkpoint".into())
                })?;
                let u_ra = user_embedding(self.user_params, cfg, history)?;
                recall_embedding(&u_ra, basis, mode)
            }
            RecallMethod::AveragePool => average_pool_user(
                history,
                self.ranking.params().get(COLD_START)?.data(),
            ),
            RecallMethod::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                Ok((0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            }
        }
    }
}

/// Mean Recall@K per cut-off over users, with the user count.
pub fn recall_metrics(
    model: &RecallModel,
    news: &NewsEmbeddings,
    users: &[RecallUser],
    ks: &[usize],
    method: RecallMethod,
) -> Result<(Vec<f64>, usize)> {
    if users.is_empty() {
        return Err(Error::Config("no users with held-out clicks to evaluate".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("recall cut-offs must be positive".into()));
    }
    let k_max = *ks.iter().max().expect("non-empty");
    let per_user: Vec<Vec<f64>> = users
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let q = model.query(&news.rows(&u.history), method, i as u64)?;
            let top = brute_force_topk(&q, news.as_slice(), k_max, &u.exclude)?;
            Ok(ks
                .iter()
                .map(|&k| {
                    let k = k.min(top.ids.len());
                    recall_at_k(&top.ids[..k], &u.targets).expect("targets non-empty")
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut means = vec![MeanAcc::default(); ks.len()];
    for row in &per_user {
        for (acc, &v) in means.iter_mut().zip(row) {
            acc.push(v);
        }
    }
    Ok((means.iter().map(MeanAcc::mean).collect(), users.len()))
}

/// Recall report with one `Recall@K` metric per cut-off.
pub fn evaluate_recall(
    model: &RecallModel,
    news: &NewsEmbeddings,
    users: &[RecallUser],
    ks: &[usize],
    method: RecallMethod,
) -> Result<MetricsReport> {
    let start = std::time::Instant::now();
    let (values, n) = recall_metrics(model, news, users, ks, method)?;
    let mut report = MetricsReport::new(method.label(), "recall");
    for (k, v) in ks.iter().zip(values) {
        report.push(format!("Recall@{k}"), v);
    }
    report.count = n;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
