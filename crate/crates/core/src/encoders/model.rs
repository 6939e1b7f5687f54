use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, NewsArticle, PAD};
use crate::error::{Error, Result};
use crate::numerics::{
    attention_pool, multi_head_self_attention, AttentionParams, Graph, ParamStore, PoolingParams,
    Tensor, Var,
};

/// Architecture of the news and user towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of the additive attention pooling.
    pub pool_dim: usize,
    pub title_len: usize,
    /// Most recent clicks fed to the user encoder.
    pub history_len: usize,
    pub position_embeddings: bool,
    /// Add the user encoder's input back onto its self-attention output.
    pub user_residual: bool,
    pub layer_norm: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2,
            dim: 64,
            heads: 4,
            pool_dim: 64,
            title_len: crate::corpus::DEFAULT_TITLE_LEN,
            history_len: 50,
            position_embeddings: true,
            user_residual: false,
            layer_norm: false,
            dropout: 0.0,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size < 2 || self.pool_dim == 0 || self.title_len == 0 || self.history_len == 0 {
            return Err(Error::Config(
                "vocab_size ≥ 2 and pool_dim, title_len, history_len ≥ 1 required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn init_bound(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }
}

pub const WORD_EMB: &str = "news.word_emb";
pub const WORD_POS: &str = "news.pos_emb";
pub const USER_POS: &str = "user.pos_emb";
pub const COLD_START: &str = "user.cold_start";

fn news_attention() -> AttentionParams {
    AttentionParams::named("news.attn")
}
fn news_pool() -> PoolingParams {
    PoolingParams::named("news.pool")
}
fn user_attention() -> AttentionParams {
    AttentionParams::named("user.attn")
}
fn user_pool() -> PoolingParams {
    PoolingParams::named("user.pool")
}

/// Inverted dropout: zero entries with probability `p`, rescale the rest.
fn dropout<'a>(g: &mut Graph<'a>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).numel();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(p) { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

fn layer_norm<'a>(g: &mut Graph<'a>, store: &'a ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.ln_gain"))?;
    let beta = g.param(store, &format!("{prefix}.ln_bias"))?;
    g.layer_norm(x, gamma, beta, 1e-5)
}

/// Inserts user-tower parameters (self-attention, pooling, position table,
/// cold-start vector) into `store`.
pub(crate) fn init_user_params<R: Rng>(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<()> {
    let b = cfg.init_bound();
    user_attention().init(store, cfg.dim, b, rng)?;
    user_pool().init(store, cfg.dim, cfg.pool_dim, b, rng)?;
    store.insert(
        USER_POS,
        Tensor::uniform(&[cfg.history_len, cfg.dim], b, rng).with_grad(true),
    )?;
    store.insert(
        COLD_START,
        Tensor::uniform(&[1, cfg.dim], b, rng).with_grad(true),
    )?;
    if cfg.layer_norm {
        store.insert("user.ln_gain", Tensor::filled(&[1, cfg.dim], 1.0).with_grad(true))?;
        store.insert("user.ln_bias", Tensor::zeros(&[1, cfg.dim]).with_grad(true))?;
    }
    Ok(())
}

/// User encoder over already-encoded clicked news. `history` holds `1×d`
/// rows, oldest first; only the most recent `history_len` are used.
pub fn encode_user_graph<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    cfg: &ModelConfig,
    history: &[Var],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if history.is_empty() {
        return g.param(store, COLD_START);
    }
    let recent = &history[history.len().saturating_sub(cfg.history_len)..];
    let mut x = g.concat_rows(recent)?;
    if cfg.position_embeddings {
        let positions: Vec<usize> = (0..recent.len()).collect();
        let pos = g.gather(store, USER_POS, &positions)?;
        x = g.add(x, pos)?;
    }
    let mut h = multi_head_self_attention(g, store, x, &user_attention(), cfg.heads)?;
    if cfg.user_residual {
        h = g.add(h, x)?;
    }
    if cfg.layer_norm {
        h = layer_norm(g, store, h, "user")?;
    }
    h = dropout(g, h, cfg.dropout, rng)?;
    attention_pool(g, store, h, &user_pool())
}

/// News and user towers of the ranking model.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingModel {
    config: ModelConfig,
    params: ParamStore,
}

impl RankingModel {
    /// Fresh model with every parameter uniform in `±1/√d`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let b = config.init_bound();
        let d = config.dim;
        let mut params = ParamStore::new();
        params.insert(
            WORD_EMB,
            Tensor::uniform(&[config.vocab_size, d], b, &mut rng).with_grad(true),
        )?;
        params.insert(
            WORD_POS,
            Tensor::uniform(&[config.title_len, d], b, &mut rng).with_grad(true),
        )?;
        news_attention().init(&mut params, d, b, &mut rng)?;
        news_pool().init(&mut params, d, config.pool_dim, b, &mut rng)?;
        if config.layer_norm {
            params.insert("news.ln_gain", Tensor::filled(&[1, d], 1.0).with_grad(true))?;
            params.insert("news.ln_bias", Tensor::zeros(&[1, d]).with_grad(true))?;
        }
        init_user_params(&config, &mut params, &mut rng)?;
        Ok(RankingModel { config, params })
    }

    /// Wraps loaded parameters after checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = RankingModel::new(config.clone())?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Compatibility(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Compatibility("unexpected extra parameters".into()));
        }
        Ok(RankingModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Copy of the user-tower parameters only.
    pub fn user_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.params.iter() {
            if name.starts_with("user.") {
                out.insert(name, t.clone()).expect("unique names");
            }
        }
        out
    }

    /// News encoder: word + position embeddings, self-attention, attention
    /// pooling. Padding positions are left out; an all-padding title is
    /// encoded from a single padding token.
    pub fn encode_news_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let mut ids = Vec::with_capacity(tokens.len());
        let mut positions = Vec::with_capacity(tokens.len());
        for (p, &t) in tokens.iter().enumerate().take(cfg.title_len) {
            if t != PAD {
                ids.push(t as usize);
                positions.push(p);
            }
        }
        if ids.is_empty() {
            ids.push(PAD as usize);
            positions.push(0);
        }
        let mut x = g.gather(&self.params, WORD_EMB, &ids)?;
        if cfg.position_embeddings {
            let pos = g.gather(&self.params, WORD_POS, &positions)?;
            x = g.add(x, pos)?;
        }
        x = dropout(g, x, cfg.dropout, rng.as_deref_mut())?;
        let mut h = multi_head_self_attention(g, &self.params, x, &news_attention(), cfg.heads)?;
        if cfg.layer_norm {
            h = layer_norm(g, &self.params, h, "news")?;
        }
        h = dropout(g, h, cfg.dropout, rng)?;
        attention_pool(g, &self.params, h, &news_pool())
    }

    pub fn encode_user_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        history: &[Var],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        encode_user_graph(g, &self.params, &self.config, history, rng)
    }

    /// News embedding `r` of an article.
    pub fn encode_news(&self, article: &NewsArticle) -> Result<Vec<f64>> {
        self.encode_tokens(&article.title_tokens)
    }

    pub fn encode_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let r = self.encode_news_graph(&mut g, tokens, None)?;
        Ok(g.value(r).data().to_vec())
    }

    /// Ranking user embedding `u_ra` from clicked-news embeddings, oldest
    /// first. An empty history yields the learned cold-start vector.
    pub fn encode_user_rank(&self, history: &[Vec<f64>]) -> Result<Vec<f64>> {
        user_embedding(&self.params, &self.config, history)
    }

    /// Embeddings of every article in the corpus, in corpus order.
    pub fn encode_corpus(&self, corpus: &Corpus) -> Result<NewsEmbeddings> {
        let mut data = Vec::with_capacity(corpus.len() * self.dim());
        for a in corpus.articles() {
            data.extend(self.encode_news(a)?);
        }
        Ok(NewsEmbeddings {
            dim: self.dim(),
            data,
        })
    }
}

/// Forward pass of a user tower held in any store using the `user.` names.
pub fn user_embedding(store: &ParamStore, cfg: &ModelConfig, history: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut rows = Vec::with_capacity(history.len());
    for r in &history[history.len().saturating_sub(cfg.history_len)..] {
        if r.len() != cfg.dim {
            return Err(Error::Dimension(format!(
                "history embedding has {} values, model dim is {}",
                r.len(),
                cfg.dim
            )));
        }
        rows.push(g.constant(Tensor::row(r.clone())));
    }
    let u = encode_user_graph(&mut g, store, cfg, &rows, None)?;
    Ok(g.value(u).data().to_vec())
}

/// Row-major `n×d` table of news embeddings indexed like the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct NewsEmbeddings {
    dim: usize,
    data: Vec<f64>,
}

impl NewsEmbeddings {
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension("embedding table is not n×dim".into()));
        }
        Ok(NewsEmbeddings { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn rows(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| self.row(i).to_vec()).collect()
    }

    /// Gathers rows into an `idx.len()×d` tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), self.dim, data).expect("consistent shape")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}
