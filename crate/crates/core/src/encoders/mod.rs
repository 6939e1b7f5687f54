//! News and user towers, the basis user embedding memory, and scoring.

mod basis;
mod model;

pub use basis::{
    basis_attention, basis_attention_graph, compose_recall_all, compose_recall_all_graph,
    compose_recall_top, compose_recall_top_graph, recall_embedding, select_top, AttentionWeights,
    BasisMemory, ComposeMode, TopWeighting, UserEmbeddings, BASIS_KEYS, BASIS_VALUES,
};
pub use model::{
    encode_user_graph, user_embedding, ModelConfig, NewsEmbeddings, RankingModel, COLD_START,
    USER_POS, WORD_EMB, WORD_POS,
};

use crate::error::{dim_err, Result};
use crate::numerics::kernels;

fn inner(u: &[f64], r: &[f64]) -> Result<f64> {
    if u.len() != r.len() {
        return Err(dim_err(format!(
            "user embedding has {} values, news embedding {}",
            u.len(),
            r.len()
        )));
    }
    Ok(kernels::dot(u, r))
}

/// Click score `u_ra·r_c`.
pub fn rank_score(u_ra: &[f64], r_c: &[f64]) -> Result<f64> {
    inner(u_ra, r_c)
}

/// Recall relevance `u_re·r_c`.
pub fn recall_score(u_re: &[f64], r_c: &[f64]) -> Result<f64> {
    inner(u_re, r_c)
}

/// Mean of the clicked-news embeddings; `cold_start` when there are none.
pub fn average_pool_user(history: &[Vec<f64>], cold_start: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = history.first() else {
        return Ok(cold_start.to_vec());
    };
    let mut out = vec![0.0; first.len()];
    for r in history {
        if r.len() != out.len() {
            return Err(dim_err("history embeddings differ in length"));
        }
        kernels::axpy(1.0, r, &mut out);
    }
    let n = history.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}
