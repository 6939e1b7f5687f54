use serde::{Deserialize, Serialize};

use crate::encoders::TopWeighting;
use crate::error::{Error, Result};

/// Optimization settings for both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Ranking negatives per clicked candidate.
    pub k: usize,
    /// Recall negatives per clicked candidate.
    pub t: usize,
    /// Number of basis user embeddings.
    pub m: usize,
    /// Basis embeddings kept at test time.
    pub p: usize,
    /// Adam step size for the ranking towers.
    pub learning_rate: f64,
    /// Adam step size for the basis memory.
    pub recall_learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Ranking samples used per epoch; 0 uses all of them.
    pub max_samples: usize,
    /// Recall samples used per epoch; 0 uses all of them.
    pub recall_max_samples: usize,
    /// Threads for per-sample work; results do not depend on it.
    pub workers: usize,
    /// Train a copy of the user encoder together with the basis memory.
    pub unfreeze_user: bool,
    pub top_weighting: TopWeighting,
    /// Recall cut-off for stage-2 validation; 0 means 1% of the corpus.
    pub valid_recall_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            t: 200,
            m: 20,
            p: 5,
            learning_rate: 1e-3,
            recall_learning_rate: 1e-2,
            batch_size: 32,
            max_epochs: 10,
            patience: 2,
            seed: 42,
            max_samples: 0,
            recall_max_samples: 0,
            workers: 1,
            unfreeze_user: false,
            top_weighting: TopWeighting::Probabilities,
            valid_recall_k: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.t == 0 || self.m == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config(
                "k, t, m, batch_size and workers must be at least 1".into(),
            ));
        }
        if self.p == 0 || self.p > self.m {
            return Err(Error::Config(format!("P = {} must lie in 1..=M ({})", self.p, self.m)));
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("recall_learning_rate", self.recall_learning_rate),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    /// Stage-2 validation cut-off for a corpus of `n` news.
    pub fn recall_k(&self, n: usize) -> usize {
        if self.valid_recall_k > 0 {
            self.valid_recall_k
        } else {
            ((n as f64 * 0.01).round() as usize).max(1)
        }
    }
}
