use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;

/// Parameter names of one multi-head self-attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: String,
    pub key: String,
    pub value: String,
    pub output: String,
}

impl AttentionParams {
    pub fn named(prefix: &str) -> Self {
        AttentionParams {
            query: format!("{prefix}.wq"),
            key: format!("{prefix}.wk"),
            value: format!("{prefix}.wv"),
            output: format!("{prefix}.wo"),
        }
    }

    /// Inserts four `dim×dim` projections drawn uniformly from `±bound`.
    pub fn init<R: Rng>(
        &self,
        store: &mut ParamStore,
        dim: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        for name in [&self.query, &self.key, &self.value, &self.output] {
            store.insert(
                name.clone(),
                Tensor::uniform(&[dim, dim], bound, rng).with_grad(true),
            )?;
        }
        Ok(())
    }
}

/// Parameter names of an additive attention pooling layer:
/// `a = softmax(tanh(H·W + b)·q)`, output `aᵀH`.
#[derive(Debug, Clone)]
pub struct PoolingParams {
    pub proj: String,
    pub bias: String,
    pub query: String,
}

impl PoolingParams {
    pub fn named(prefix: &str) -> Self {
        PoolingParams {
            proj: format!("{prefix}.proj"),
            bias: format!("{prefix}.bias"),
            query: format!("{prefix}.query"),
        }
    }

    pub fn init<R: Rng>(
        &self,
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        store.insert(
            self.proj.clone(),
            Tensor::uniform(&[dim, hidden], bound, rng).with_grad(true),
        )?;
        store.insert(
            self.bias.clone(),
            Tensor::uniform(&[1, hidden], bound, rng).with_grad(true),
        )?;
        store.insert(
            self.query.clone(),
            Tensor::uniform(&[1, hidden], bound, rng).with_grad(true),
        )?;
        Ok(())
    }
}

/// Multi-head scaled dot-product self-attention over the rows of `seq`
/// (`L×d`). Heads split the projected columns evenly; their outputs are
/// concatenated and passed through the output projection.
pub fn multi_head_self_attention<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    seq: Var,
    params: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let dim = g.value(seq).cols();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "dimension {dim} is not divisible by {heads} heads"
        )));
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let wq = g.param(store, &params.query)?;
    let wk = g.param(store, &params.key)?;
    let wv = g.param(store, &params.value)?;
    let wo = g.param(store, &params.output)?;
    let q = g.matmul(seq, wq)?;
    let k = g.matmul(seq, wk)?;
    let v = g.matmul(seq, wv)?;

    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * head_dim;
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, start, head_dim)?,
                g.slice_cols(k, start, head_dim)?,
                g.slice_cols(v, start, head_dim)?,
            )
        };
        let logits = g.matmul_bt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let weights = g.softmax_rows(logits)?;
        outputs.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    g.matmul(joined, wo)
}

/// Additive attention pooling of the rows of `seq` into one `1×d` row.
pub fn attention_pool<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    seq: Var,
    params: &PoolingParams,
) -> Result<Var> {
    let rows = g.value(seq).rows();
    let w = g.param(store, &params.proj)?;
    let b = g.param(store, &params.bias)?;
    let q = g.param(store, &params.query)?;
    let hidden = g.matmul(seq, w)?;
    let hidden = g.add_row(hidden, b)?;
    let hidden = g.tanh(hidden);
    let scores = g.matmul_bt(q, hidden)?; // 1×L
    debug_assert_eq!(g.value(scores).numel(), rows);
    let weights = g.softmax_rows(scores)?;
    g.matmul(weights, seq)
}
