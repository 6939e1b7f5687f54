use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

use super::{ImpressionLog, NewsIdx};

/// A clicked candidate with `K` non-clicked candidates from the same
/// impression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingSample {
    pub user_id: String,
    pub history: Vec<NewsIdx>,
    pub positive: NewsIdx,
    pub negatives: Vec<NewsIdx>,
}

/// A clicked candidate with `T` news drawn from the whole corpus, none of
/// which the user clicked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallSample {
    pub user_id: String,
    pub history: Vec<NewsIdx>,
    pub positive: NewsIdx,
    pub negatives: Vec<NewsIdx>,
}

/// One sample per clicked candidate. Negatives are drawn without replacement
/// when the impression has at least `k` non-clicked candidates and with
/// replacement otherwise; impressions without non-clicked candidates are
/// skipped.
pub fn sample_ranking_batch<R: Rng>(
    impressions: &[ImpressionLog],
    k: usize,
    rng: &mut R,
) -> Result<Vec<RankingSample>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut out = Vec::new();
    for imp in impressions {
        let pool: Vec<NewsIdx> = imp.non_clicked().collect();
        if pool.is_empty() {
            continue;
        }
        for positive in imp.clicked() {
            let negatives = if pool.len() >= k {
                index::sample(rng, pool.len(), k)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            } else {
                (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
            };
            out.push(RankingSample {
                user_id: imp.user_id.clone(),
                history: imp.history.clone(),
                positive,
                negatives,
            });
        }
    }
    Ok(out)
}

/// Every news item each user clicked across `impressions`: histories plus
/// clicked candidates.
pub fn clicked_by_user(impressions: &[ImpressionLog]) -> HashMap<&str, HashSet<NewsIdx>> {
    let mut clicked: HashMap<&str, HashSet<NewsIdx>> = HashMap::new();
    for imp in impressions {
        let set = clicked.entry(imp.user_id.as_str()).or_default();
        set.extend(imp.history.iter().copied());
        set.extend(imp.clicked());
    }
    clicked
}

/// One sample per clicked candidate with `t` distinct negatives drawn
/// uniformly from the corpus minus everything the user clicked.
pub fn sample_recall_batch<R: Rng>(
    impressions: &[ImpressionLog],
    corpus_size: usize,
    t: usize,
    rng: &mut R,
) -> Result<Vec<RecallSample>> {
    if t == 0 {
        return Err(Error::Config("T must be at least 1".into()));
    }
    if corpus_size < t + 1 {
        return Err(Error::Config(format!(
            "corpus of {corpus_size} news is too small for {t} recall negatives"
        )));
    }
    let clicked = clicked_by_user(impressions);
    let mut out = Vec::new();
    let mut chosen = HashSet::with_capacity(t);
    for imp in impressions {
        let excluded = &clicked[imp.user_id.as_str()];
        let eligible = corpus_size - excluded.iter().filter(|&&i| i < corpus_size).count();
        if eligible < t {
            return Err(Error::Config(format!(
                "user {} leaves only {eligible} eligible recall negatives, need {t}",
                imp.user_id
            )));
        }
        for positive in imp.clicked() {
            let negatives: Vec<NewsIdx> = if 2 * t <= eligible {
                chosen.clear();
                let mut picked = Vec::with_capacity(t);
                while picked.len() < t {
                    let c = rng.gen_range(0..corpus_size);
                    if !excluded.contains(&c) && chosen.insert(c) {
                        picked.push(c);
                    }
                }
                picked
            } else {
                let pool: Vec<NewsIdx> = (0..corpus_size).filter(|i| !excluded.contains(i)).collect();
                index::sample(rng, pool.len(), t)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            };
            out.push(RecallSample {
                user_id: imp.user_id.clone(),
                history: imp.history.clone(),
                positive,
                negatives,
            });
        }
    }
    Ok(out)
}
