use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{kernels, Graph, ParamStore, Tensor, Var};

pub const BASIS_KEYS: &str = "basis.keys";
pub const BASIS_VALUES: &str = "basis.values";

/// `M` attention keys `w_i` and `M` basis user embeddings `v_i`, stored as
/// two separate `M×d` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMemory {
    params: ParamStore,
}

impl BasisMemory {
    /// Keys and values uniform in `±1/√d`.
    pub fn new(m: usize, dim: usize, seed: u64) -> Result<Self> {
        if m == 0 || dim == 0 {
            return Err(Error::Config("basis memory needs M ≥ 1 and d ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let keys = Tensor::uniform(&[m, dim], bound, &mut rng).with_grad(true);
        let values = Tensor::uniform(&[m, dim], bound, &mut rng).with_grad(true);
        Self::from_tensors(keys, values)
    }

    pub fn from_tensors(keys: Tensor, values: Tensor) -> Result<Self> {
        if keys.shape().len() != 2 || keys.shape() != values.shape() || keys.rows() == 0 {
            return Err(dim_err(format!(
                "basis keys {:?} and values {:?} must be equal non-empty M×d matrices",
                keys.shape(),
                values.shape()
            )));
        }
        let mut params = ParamStore::new();
        params.insert(BASIS_KEYS, keys)?;
        params.insert(BASIS_VALUES, values)?;
        Ok(BasisMemory { params })
    }

    /// From rows `w_i` and `v_i`.
    pub fn from_rows(keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Self> {
        Self::from_tensors(
            Tensor::from_rows(keys)?.with_grad(true),
            Tensor::from_rows(values)?.with_grad(true),
        )
    }

    pub fn size(&self) -> usize {
        self.keys().rows()
    }

    pub fn dim(&self) -> usize {
        self.keys().cols()
    }

    pub fn keys(&self) -> &Tensor {
        self.params.get(BASIS_KEYS).expect("basis keys present")
    }

    pub fn values(&self) -> &Tensor {
        self.params.get(BASIS_VALUES).expect("basis values present")
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(dim_err(format!(
                "user embedding has {len} values, basis memory dim is {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// How the kept top-P weights are re-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TopWeighting {
    /// Softmax over the selected attention probabilities themselves.
    #[default]
    Probabilities,
    /// Softmax over the selected logits `u_ra·w_i`. Not the published form.
    Logits,
}

impl FromStr for TopWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probabilities" | "probs" => Ok(TopWeighting::Probabilities),
            "logits" => Ok(TopWeighting::Logits),
            _ => Err(Error::Config(format!(
                "unknown top weighting `{s}` (expected probabilities or logits)"
            ))),
        }
    }
}

/// Attention of one user over the basis slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// `u_ra·w_i` for every slot.
    pub logits: Vec<f64>,
    /// Softmax of the logits.
    pub alpha: Vec<f64>,
    /// Indices kept by top-P selection, in descending weight order.
    pub selected_indices: Option<Vec<usize>>,
}

/// `α = softmax(W·u_ra)`.
pub fn basis_attention(u_ra: &[f64], memory: &BasisMemory) -> Result<AttentionWeights> {
    memory.check_dim(u_ra.len())?;
    let keys = memory.keys();
    let logits: Vec<f64> = (0..keys.rows())
        .map(|i| kernels::dot(keys.row_slice(i), u_ra))
        .collect();
    let mut alpha = logits.clone();
    kernels::softmax_in_place(&mut alpha);
    Ok(AttentionWeights {
        logits,
        alpha,
        selected_indices: None,
    })
}

/// `u_re = Σ α_i v_i` over all slots.
pub fn compose_recall_all(weights: &AttentionWeights, memory: &BasisMemory) -> Result<Vec<f64>> {
    if weights.alpha.len() != memory.size() {
        return Err(dim_err(format!(
            "{} attention weights for {} basis slots",
            weights.alpha.len(),
            memory.size()
        )));
    }
    let values = memory.values();
    let mut u = vec![0.0; memory.dim()];
    for (i, &a) in weights.alpha.iter().enumerate() {
        kernels::axpy(a, values.row_slice(i), &mut u);
    }
    Ok(u)
}

/// Indices of the `p` largest entries, descending, ties to the lower index.
pub fn select_top(alpha: &[f64], p: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..alpha.len()).collect();
    idx.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    idx.truncate(p);
    idx
}

fn check_p(p: usize, m: usize) -> Result<()> {
    if p == 0 || p > m {
        return Err(Error::Config(format!("P = {p} must lie in 1..={m}")));
    }
    Ok(())
}

/// Keeps the `p` strongest slots, re-normalizes their weights with a softmax
/// and mixes the matching values. Returns `u_re` and the re-normalized
/// weights (length `M`, zero outside the kept slots).
pub fn compose_recall_top(
    weights: &AttentionWeights,
    memory: &BasisMemory,
    p: usize,
    weighting: TopWeighting,
) -> Result<(Vec<f64>, AttentionWeights)> {
    let m = memory.size();
    check_p(p, m)?;
    if weights.alpha.len() != m || weights.logits.len() != m {
        return Err(dim_err(format!(
            "{} attention weights for {m} basis slots",
            weights.alpha.len()
        )));
    }
    let top = select_top(&weights.alpha, p);
    let source = match weighting {
        TopWeighting::Probabilities => &weights.alpha,
        TopWeighting::Logits => &weights.logits,
    };
    let mut kept: Vec<f64> = top.iter().map(|&i| source[i]).collect();
    kernels::softmax_in_place(&mut kept);
    let values = memory.values();
    let mut u = vec![0.0; memory.dim()];
    let mut alpha = vec![0.0; m];
    for (&i, &w) in top.iter().zip(&kept) {
        kernels::axpy(w, values.row_slice(i), &mut u);
        alpha[i] = w;
    }
    Ok((
        u,
        AttentionWeights {
            logits: weights.logits.clone(),
            alpha,
            selected_indices: Some(top),
        },
    ))
}

/// Recall composition mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ComposeMode {
    All,
    Top { p: usize, weighting: TopWeighting },
}

impl ComposeMode {
    pub fn label(&self) -> &'static str {
        match self {
            ComposeMode::All => "UniRec(all)",
            ComposeMode::Top { .. } => "UniRec(top)",
        }
    }
}

/// `u_re` for a ranking embedding under the given mode.
pub fn recall_embedding(u_ra: &[f64], memory: &BasisMemory, mode: ComposeMode) -> Result<Vec<f64>> {
    let w = basis_attention(u_ra, memory)?;
    match mode {
        ComposeMode::All => compose_recall_all(&w, memory),
        ComposeMode::Top { p, weighting } => Ok(compose_recall_top(&w, memory, p, weighting)?.0),
    }
}

/// Graph form of the basis attention: `u_ra` is `1×d`; returns the `1×M`
/// logits and weights.
pub fn basis_attention_graph<'a>(
    g: &mut Graph<'a>,
    memory: &'a BasisMemory,
    u_ra: Var,
) -> Result<(Var, Var)> {
    memory.check_dim(g.value(u_ra).numel())?;
    let keys = g.param(&memory.params, BASIS_KEYS)?;
    let logits = g.matmul_bt(u_ra, keys)?;
    let alpha = g.softmax_rows(logits)?;
    Ok((logits, alpha))
}

/// Graph form of `Σ α_i v_i` for a `1×M` weight row.
pub fn compose_recall_all_graph<'a>(
    g: &mut Graph<'a>,
    memory: &'a BasisMemory,
    alpha: Var,
) -> Result<Var> {
    let values = g.param(&memory.params, BASIS_VALUES)?;
    g.matmul(alpha, values)
}

/// Graph form of the top-P composition. Selection is a fixed index choice;
/// gradients flow through the kept weights and values.
pub fn compose_recall_top_graph<'a>(
    g: &mut Graph<'a>,
    memory: &'a BasisMemory,
    logits: Var,
    alpha: Var,
    p: usize,
    weighting: TopWeighting,
) -> Result<Var> {
    check_p(p, memory.size())?;
    let top = select_top(g.value(alpha).data(), p);
    let source = match weighting {
        TopWeighting::Probabilities => alpha,
        TopWeighting::Logits => logits,
    };
    let kept = g.take(source, &top)?;
    let weights = g.softmax_rows(kept)?;
    let values = g.gather(&memory.params, BASIS_VALUES, &top)?;
    g.matmul(weights, values)
}

/// Ranking and recall embeddings of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbeddings {
    pub u_ra: Vec<f64>,
    pub u_re: Vec<f64>,
    pub mode: ComposeMode,
}

impl UserEmbeddings {
    pub fn build(u_ra: Vec<f64>, memory: &BasisMemory, mode: ComposeMode) -> Result<Self> {
        let u_re = recall_embedding(&u_ra, memory, mode)?;
        Ok(UserEmbeddings { u_ra, u_re, mode })
    }
}
