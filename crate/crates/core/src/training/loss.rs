use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

fn contrastive(positive: f64, negatives: &[f64], what: &str) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Config(format!("{what} needs at least one negative score")));
    }
    let mut scores = Vec::with_capacity(negatives.len() + 1);
    scores.push(positive);
    scores.extend_from_slice(negatives);
    let mut g = Graph::new();
    let s = g.constant(Tensor::row(scores));
    let loss = g.contrastive_nll(s)?;
    Ok(g.value(loss).data()[0])
}

/// `−ln(e^{ŷ⁺} / (e^{ŷ⁺} + Σ e^{ŷ⁻}))` over `K` in-impression negatives.
pub fn ranking_loss(positive: f64, negatives: &[f64]) -> Result<f64> {
    contrastive(positive, negatives, "ranking loss")
}

/// The same contrastive form over `T` corpus-wide negatives.
pub fn recall_loss(positive: f64, negatives: &[f64]) -> Result<f64> {
    contrastive(positive, negatives, "recall loss")
}

/// Contrastive loss of a `1×d` user row against `(1+n)×d` candidates whose
/// first row is the positive.
pub fn contrastive_loss_graph(g: &mut Graph<'_>, user: Var, candidates: Var) -> Result<Var> {
    let scores = g.matmul_bt(user, candidates)?;
    g.contrastive_nll(scores)
}
