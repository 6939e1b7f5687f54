use std::collections::HashMap;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{
    sample_ranking_batch, sample_recall_batch, Corpus, Dataset, NewsIdx, RankingSample,
    RecallSample,
};
use crate::encoders::{
    basis_attention_graph, compose_recall_all_graph, encode_user_graph, BasisMemory, ComposeMode,
    ModelConfig, NewsEmbeddings, RankingModel,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    encode_all_news, ranking_metrics, recall_metrics, recall_users, user_embeddings_for,
    RecallMethod, RecallModel,
};
use crate::numerics::{adam_step, AdamState, Gradients, Graph, ParamStore, Tensor, Var};

use super::checkpoint::{Checkpoint, ConfigSnapshot, EpochRecord};
use super::loss::contrastive_loss_graph;
use super::TrainConfig;

/// Runs `f` on a thread pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Loss of one ranking sample, built on `g`. The same news item appearing
/// twice is encoded once.
pub fn ranking_sample_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a RankingModel,
    corpus: &Corpus,
    sample: &RankingSample,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut cache: HashMap<NewsIdx, Var> = HashMap::new();
    let mut encode = |g: &mut Graph<'a>, idx: NewsIdx, rng: Option<&mut ChaCha8Rng>| -> Result<Var> {
        if let Some(&v) = cache.get(&idx) {
            return Ok(v);
        }
        let v = model.encode_news_graph(g, &corpus.article(idx).title_tokens, rng)?;
        cache.insert(idx, v);
        Ok(v)
    };
    let window = model.config().history_len;
    let recent = &sample.history[sample.history.len().saturating_sub(window)..];
    let mut hist = Vec::with_capacity(recent.len());
    for &h in recent {
        hist.push(encode(g, h, rng.as_deref_mut())?);
    }
    let user = model.encode_user_graph(g, &hist, rng.as_deref_mut())?;
    let mut cands = Vec::with_capacity(sample.negatives.len() + 1);
    for &c in std::iter::once(&sample.positive).chain(&sample.negatives) {
        cands.push(encode(g, c, rng.as_deref_mut())?);
    }
    let cands = g.concat_rows(&cands)?;
    contrastive_loss_graph(g, user, cands)
}

/// Averages per-sample gradients in sample order, independent of how the
/// per-sample work was scheduled.
fn reduce(results: Vec<(f64, Gradients)>) -> Result<(f64, Gradients)> {
    let scale = 1.0 / results.len() as f64;
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        total.accumulate(g, scale);
    }
    if !loss.is_finite() || !total.is_finite() {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok((loss, total))
}

fn early_stop(best: &mut Option<f64>, stale: &mut usize, value: Option<f64>) -> bool {
    match value {
        Some(v) if best.is_none_or(|b| v > b) => {
            *best = Some(v);
            *stale = 0;
            true
        }
        Some(_) => {
            *stale += 1;
            false
        }
        None => true,
    }
}

fn epoch_samples<T>(mut samples: Vec<T>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    samples.shuffle(rng);
    if cap > 0 {
        samples.truncate(cap);
    }
    samples
}

/// Stage 1: trains news and user towers on the ranking loss with Adam,
/// early-stopping on validation AUC. Returns the best-validation state.
pub fn train_stage1(data: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_stage1_named(data, model_cfg, cfg, "")
}

pub fn train_stage1_named(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &str,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.vocab_size = data.vocab.len();
    model_cfg.title_len = data.corpus.title_len();
    let mut model = RankingModel::new(model_cfg.clone())?;
    let config = ConfigSnapshot {
        model: model_cfg,
        train: cfg.clone(),
        dataset: dataset.to_string(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut history = Vec::new();
    let mut best_model = model.clone();
    let (mut best, mut stale) = (None, 0);
    let has_samples = data.train.iter().any(|i| i.clicked().count() > 0 && i.non_clicked().count() > 0);
    if cfg.max_epochs > 0 && !has_samples {
        return Err(Error::Config("no training impressions with both clicks and non-clicks".into()));
    }
    for epoch in 1..=cfg.max_epochs {
        let samples = sample_ranking_batch(&data.train, cfg.k, &mut rng)?;
        let samples = epoch_samples(samples, cfg.max_samples, &mut rng);
        let mut loss_sum = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let dropout = model.config().dropout > 0.0;
            let results = with_workers(cfg.workers, || {
                batch
                    .par_iter()
                    .zip(&seeds)
                    .map(|(s, &seed)| {
                        let mut srng = ChaCha8Rng::seed_from_u64(seed);
                        let mut g = Graph::new();
                        let loss = ranking_sample_loss(
                            &mut g,
                            &model,
                            &data.corpus,
                            s,
                            dropout.then_some(&mut srng),
                        )?;
                        Ok((g.value(loss).data()[0], g.backward(loss)?))
                    })
                    .collect::<Result<Vec<_>>>()
            })??;
            let (l, grads) = reduce(results)?;
            loss_sum += l;
            adam_step(model.params_mut(), &grads, &mut adam)?;
        }
        let value = if data.valid.is_empty() {
            None
        } else {
            Some(with_workers(cfg.workers, || ranking_metrics(&model, &data.corpus, &data.valid))??.auc)
        };
        let improved = early_stop(&mut best, &mut stale, value);
        if improved {
            best_model = model.clone();
        }
        let rec = EpochRecord {
            stage: 1,
            epoch,
            samples: samples.len(),
            train_loss: loss_sum / samples.len().max(1) as f64,
            metric: "AUC".into(),
            value,
            best: improved && value.is_some(),
        };
        info!("{rec}");
        history.push(rec);
        if stale >= cfg.patience.max(1) {
            break;
        }
    }
    Ok(Checkpoint {
        stage: 1,
        config,
        ranking: best_model,
        basis: None,
        recall_user: None,
        history,
    })
}

/// Loss of one recall sample given a `1×d` ranking user row.
pub fn recall_sample_loss<'a>(
    g: &mut Graph<'a>,
    memory: &'a BasisMemory,
    news: &NewsEmbeddings,
    u_ra: Var,
    sample: &RecallSample,
) -> Result<Var> {
    let (_, alpha) = basis_attention_graph(g, memory, u_ra)?;
    let u_re = compose_recall_all_graph(g, memory, alpha)?;
    let mut idx = Vec::with_capacity(sample.negatives.len() + 1);
    idx.push(sample.positive);
    idx.extend_from_slice(&sample.negatives);
    let cands = g.constant(news.gather(&idx));
    contrastive_loss_graph(g, u_re, cands)
}

/// Stage 2: freezes the ranking towers and trains the basis memory on the
/// recall loss over all `M` slots, early-stopping on validation Recall@K.
/// With `unfreeze_user` a separate copy of the user tower is trained too.
pub fn train_stage2(stage1: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let ranking = &stage1.ranking;
    let d = ranking.dim();
    let mut memory = match &stage1.basis {
        Some(b) if b.size() != cfg.m => {
            return Err(Error::Config(format!(
                "checkpoint basis memory has M = {}, config asks for {}",
                b.size(),
                cfg.m
            )))
        }
        Some(b) => b.clone(),
        None => BasisMemory::new(cfg.m, d, cfg.seed.wrapping_add(1))?,
    };
    let mut recall_user: Option<ParamStore> = cfg
        .unfreeze_user
        .then(|| stage1.recall_user.clone().unwrap_or_else(|| ranking.user_params()));
    if let Some(store) = &mut recall_user {
        store.set_requires_grad(true);
    }
    let model_cfg = ranking.config();
    let news = with_workers(cfg.workers, || encode_all_news(ranking, &data.corpus))??;

    // With the user tower frozen, u_ra depends only on the history.
    let mut frozen_users: HashMap<&[NewsIdx], Vec<f64>> = HashMap::new();
    if recall_user.is_none() {
        let (table, slots) = with_workers(cfg.workers, || {
            user_embeddings_for(
                ranking.params(),
                ranking,
                &news,
                data.train.iter().map(|i| i.history.as_slice()),
            )
        })??;
        for (imp, s) in data.train.iter().zip(slots) {
            frozen_users.entry(imp.history.as_slice()).or_insert_with(|| table[s].clone());
        }
    }

    let valid_users = recall_users(&data.train, &data.valid);
    let k = cfg.recall_k(data.corpus.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam_basis = AdamState::new(cfg.recall_learning_rate);
    let mut adam_user = AdamState::new(cfg.recall_learning_rate);
    let mut history = stage1.history.clone();
    let mut best_state = (memory.clone(), recall_user.clone());
    let (mut best, mut stale) = (None, 0);
    for epoch in 1..=cfg.max_epochs {
        let samples = sample_recall_batch(&data.train, data.corpus.len(), cfg.t, &mut rng)?;
        if samples.is_empty() {
            return Err(Error::Config("no clicked training candidates for recall".into()));
        }
        let samples = epoch_samples(samples, cfg.recall_max_samples, &mut rng);
        let mut loss_sum = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            let (mem, user_store) = (&memory, recall_user.as_ref());
            let results = with_workers(cfg.workers, || {
                batch
                    .par_iter()
                    .map(|s| {
                        let mut g = Graph::new();
                        let u_ra = match user_store {
                            None => g.constant(Tensor::row(frozen_users[s.history.as_slice()].clone())),
                            Some(store) => {
                                let window = &s.history[s.history.len().saturating_sub(model_cfg.history_len)..];
                                let rows: Vec<Var> = window
                                    .iter()
                                    .map(|&h| g.constant(Tensor::row(news.row(h).to_vec())))
                                    .collect();
                                encode_user_graph(&mut g, store, model_cfg, &rows, None)?
                            }
                        };
                        let loss = recall_sample_loss(&mut g, mem, &news, u_ra, s)?;
                        Ok((g.value(loss).data()[0], g.backward(loss)?))
                    })
                    .collect::<Result<Vec<_>>>()
            })??;
            let (l, grads) = reduce(results)?;
            loss_sum += l;
            adam_step(memory.params_mut(), &grads, &mut adam_basis)?;
            if let Some(store) = &mut recall_user {
                adam_step(store, &grads, &mut adam_user)?;
            }
        }
        let value = if valid_users.is_empty() {
            None
        } else {
            let model = RecallModel {
                ranking,
                user_params: recall_user.as_ref().unwrap_or(ranking.params()),
                basis: Some(&memory),
            };
            let method = RecallMethod::UniRec(ComposeMode::All);
            let (v, _) = with_workers(cfg.workers, || {
                recall_metrics(&model, &news, &valid_users, &[k], method)
            })??;
            Some(v[0])
        };
        let improved = early_stop(&mut best, &mut stale, value);
        if improved {
            best_state = (memory.clone(), recall_user.clone());
        }
        let rec = EpochRecord {
            stage: 2,
            epoch,
            samples: samples.len(),
            train_loss: loss_sum / samples.len() as f64,
            metric: format!("Recall@{k}"),
            value,
            best: improved && value.is_some(),
        };
        info!("{rec}");
        history.push(rec);
        if stale >= cfg.patience.max(1) {
            break;
        }
    }
    let (memory, recall_user) = best_state;
    Ok(Checkpoint {
        stage: 2,
        config: ConfigSnapshot {
            model: stage1.config.model.clone(),
            train: cfg.clone(),
            dataset: stage1.config.dataset.clone(),
        },
        ranking: ranking.clone(),
        basis: Some(memory),
        recall_user,
        history,
    })
}
