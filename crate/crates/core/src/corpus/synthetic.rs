//! Seeded synthetic MIND-style data with planted topic preferences.
//!
//! Every news item belongs to one topic and one of the topic's niches; its
//! title mixes niche words, topic words and shared filler words. Every user
//! prefers one to three topics and one niche inside each. Clicks land on a
//! preferred topic with probability `preferred_click_prob`, and inside a
//! preferred topic on the user's niche with probability `niche_prob`.
//! Displayed but unclicked news comes from the user's non-preferred topics
//! (from the whole corpus when there is only one topic), except for a
//! `hard_negative_prob` share drawn from a preferred topic outside the niche.

use std::collections::HashSet;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tsv::{write_behaviors_tsv, write_news_tsv, BehaviorsTable, NewsRecord, NewsTable, RawImpression};
use super::{DataOptions, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_topics: usize,
    pub num_users: usize,
    pub num_news: usize,
    pub words_per_topic: usize,
    pub niches_per_topic: usize,
    pub common_words: usize,
    pub impressions_per_user: usize,
    /// Displayed candidates per impression, clicked ones included.
    pub impression_size: usize,
    pub clicks_per_impression: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub title_min: usize,
    pub title_max: usize,
    pub preferred_click_prob: f64,
    pub niche_prob: f64,
    /// Chance that a non-clicked candidate comes from a preferred topic but
    /// outside the user's niche there.
    pub hard_negative_prob: f64,
    /// Share of each user's impressions (the latest ones) held out as test.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_topics: 5,
            num_users: 2000,
            num_news: 3000,
            words_per_topic: 24,
            niches_per_topic: 4,
            common_words: 40,
            impressions_per_user: 30,
            impression_size: 10,
            clicks_per_impression: 1,
            history_min: 5,
            history_max: 15,
            title_min: 5,
            title_max: 10,
            preferred_click_prob: 0.9,
            niche_prob: 0.9,
            hard_negative_prob: 0.15,
            test_fraction: 1.0 / 6.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("num_topics", self.num_topics),
            ("num_users", self.num_users),
            ("num_news", self.num_news),
            ("words_per_topic", self.words_per_topic),
            ("niches_per_topic", self.niches_per_topic),
            ("impressions_per_user", self.impressions_per_user),
            ("impression_size", self.impression_size),
            ("clicks_per_impression", self.clicks_per_impression),
            ("title_min", self.title_min),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("synthetic {name} must be at least 1")));
            }
        }
        if self.history_min > self.history_max || self.title_min > self.title_max {
            return Err(Error::Config("synthetic min exceeds max".into()));
        }
        for (name, p) in [
            ("preferred_click_prob", self.preferred_click_prob),
            ("niche_prob", self.niche_prob),
            ("hard_negative_prob", self.hard_negative_prob),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synthetic {name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Generated data in raw MIND form, with the planted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub news: Vec<NewsRecord>,
    pub train: Vec<RawImpression>,
    pub test: Vec<RawImpression>,
    /// Topic of each news item, by position in `news`.
    pub news_topic: Vec<usize>,
    /// Preferred topics of each user (`U{i}` ↔ index `i`).
    pub user_topics: Vec<Vec<usize>>,
}

impl SyntheticData {
    pub fn into_dataset(self, opts: &DataOptions) -> Result<Dataset> {
        Dataset::from_raw(
            NewsTable {
                records: self.news,
                malformed: 0,
            },
            BehaviorsTable {
                rows: self.train,
                malformed: 0,
            },
            BehaviorsTable {
                rows: self.test,
                malformed: 0,
            },
            opts,
        )
    }

    /// Writes `train/` and `test/` directories in MIND layout under `dir`.
    pub fn write_mind(&self, dir: &Path) -> Result<()> {
        for (sub, rows) in [("train", &self.train), ("test", &self.test)] {
            write_news_tsv(&dir.join(sub).join("news.tsv"), &self.news)?;
            write_behaviors_tsv(&dir.join(sub).join("behaviors.tsv"), rows)?;
        }
        Ok(())
    }
}

struct User {
    topics: Vec<usize>,
    niches: Vec<usize>,
    seen: HashSet<usize>,
}

struct World {
    by_topic: Vec<Vec<usize>>,
    by_niche: Vec<Vec<Vec<usize>>>,
    num_news: usize,
}

impl World {
    fn click<R: Rng>(&self, cfg: &SyntheticConfig, user: &User, rng: &mut R) -> usize {
        let others: Vec<usize> = (0..self.by_topic.len())
            .filter(|t| !user.topics.contains(t))
            .collect();
        let (topic, slot) = if others.is_empty() || rng.gen_bool(cfg.preferred_click_prob) {
            let k = rng.gen_range(0..user.topics.len());
            (user.topics[k], Some(k))
        } else {
            (*others.choose(rng).expect("non-empty"), None)
        };
        if let Some(k) = slot {
            let niche = &self.by_niche[topic][user.niches[k]];
            if !niche.is_empty() && rng.gen_bool(cfg.niche_prob) {
                return *niche.choose(rng).expect("non-empty");
            }
        }
        match self.by_topic[topic].choose(rng) {
            Some(&n) => n,
            None => rng.gen_range(0..self.num_news),
        }
    }

    /// A news item of a preferred topic outside the user's niche there.
    fn off_niche<R: Rng>(&self, user: &User, rng: &mut R) -> usize {
        let k = rng.gen_range(0..user.topics.len());
        let pool = &self.by_topic[user.topics[k]];
        let niche = &self.by_niche[user.topics[k]][user.niches[k]];
        for _ in 0..20 {
            match pool.choose(rng) {
                Some(&n) if !niche.contains(&n) => return n,
                Some(_) => continue,
                None => break,
            }
        }
        rng.gen_range(0..self.num_news)
    }

    /// A click the user has not made before, if one turns up quickly.
    fn fresh_click<R: Rng>(&self, cfg: &SyntheticConfig, user: &mut User, rng: &mut R) -> usize {
        let mut n = self.click(cfg, user, rng);
        for _ in 0..20 {
            if !user.seen.contains(&n) {
                break;
            }
            n = self.click(cfg, user, rng);
        }
        user.seen.insert(n);
        n
    }
}

fn timestamp(day: i64, second: i64) -> String {
    let base = NaiveDate::from_ymd_opt(2019, 10, 12)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");
    (base + Duration::days(day) + Duration::seconds(second))
        .format("%-m/%-d/%Y %-I:%M:%S %p")
        .to_string()
}

/// Generates a corpus and impressions; identical seeds give identical data.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t_count = cfg.num_topics;

    // News: topic round-robin so every topic is populated, niche at random.
    let mut news = Vec::with_capacity(cfg.num_news);
    let mut news_topic = Vec::with_capacity(cfg.num_news);
    let mut by_topic = vec![Vec::new(); t_count];
    let mut by_niche = vec![vec![Vec::new(); cfg.niches_per_topic]; t_count];
    for i in 0..cfg.num_news {
        let topic = i % t_count;
        let niche = rng.gen_range(0..cfg.niches_per_topic);
        let len = rng.gen_range(cfg.title_min..=cfg.title_max);
        let niche_words: Vec<usize> = (0..cfg.words_per_topic)
            .filter(|j| j % cfg.niches_per_topic == niche)
            .collect();
        let words: Vec<String> = (0..len)
            .map(|_| {
                let r: f64 = rng.gen();
                if r < 0.55 && !niche_words.is_empty() {
                    format!("t{topic}w{}", niche_words.choose(&mut rng).expect("non-empty"))
                } else if r < 0.85 || cfg.common_words == 0 {
                    format!("t{topic}w{}", rng.gen_range(0..cfg.words_per_topic))
                } else {
                    format!("common{}", rng.gen_range(0..cfg.common_words))
                }
            })
            .collect();
        let mut title = words.join(" ");
        if let Some(first) = title.get_mut(..1) {
            first.make_ascii_uppercase();
        }
        news.push(NewsRecord {
            news_id: format!("N{i}"),
            category: format!("topic{topic}"),
            subcategory: format!("topic{topic}niche{niche}"),
            title,
        });
        news_topic.push(topic);
        by_topic[topic].push(i);
        by_niche[topic][niche].push(i);
    }
    let world = World {
        by_topic,
        by_niche,
        num_news: cfg.num_news,
    };

    let n_test = ((cfg.impressions_per_user as f64) * cfg.test_fraction).round() as usize;
    let n_test = n_test.min(cfg.impressions_per_user);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut user_topics = Vec::with_capacity(cfg.num_users);
    let mut impression_id = 0usize;
    for u in 0..cfg.num_users {
        let k = rng.gen_range(1..=t_count.min(3));
        let topics: Vec<usize> = rand::seq::index::sample(&mut rng, t_count, k).into_vec();
        let niches = topics
            .iter()
            .map(|_| rng.gen_range(0..cfg.niches_per_topic))
            .collect();
        let mut user = User {
            topics,
            niches,
            seen: HashSet::new(),
        };
        let h_len = rng.gen_range(cfg.history_min..=cfg.history_max);
        let history: Vec<String> = (0..h_len)
            .map(|_| format!("N{}", world.fresh_click(cfg, &mut user, &mut rng)))
            .collect();

        let others: Vec<usize> = (0..t_count)
            .filter(|t| !user.topics.contains(t))
            .flat_map(|t| world.by_topic[t].iter().copied())
            .collect();
        for j in 0..cfg.impressions_per_user {
            let clicks: Vec<usize> = (0..cfg.clicks_per_impression)
                .map(|_| world.fresh_click(cfg, &mut user, &mut rng))
                .collect();
            let mut shown: HashSet<usize> = clicks.iter().copied().collect();
            let mut candidates: Vec<(String, u8)> =
                clicks.iter().map(|c| (format!("N{c}"), 1)).collect();
            let wanted = cfg.impression_size.saturating_sub(clicks.len());
            let mut tries = 0;
            while candidates.len() < clicks.len() + wanted && tries < 50 * cfg.impression_size {
                tries += 1;
                let n = if rng.gen_bool(cfg.hard_negative_prob) {
                    world.off_niche(&user, &mut rng)
                } else if others.is_empty() {
                    rng.gen_range(0..cfg.num_news)
                } else {
                    *others.choose(&mut rng).expect("non-empty")
                };
                if shown.insert(n) {
                    candidates.push((format!("N{n}"), 0));
                }
            }
            candidates.shuffle(&mut rng);
            let day = (j * 42 / cfg.impressions_per_user) as i64;
            let row = RawImpression {
                impression_id: impression_id.to_string(),
                user_id: format!("U{u}"),
                timestamp: timestamp(day, rng.gen_range(0..86_400)),
                history: history.clone(),
                candidates,
            };
            impression_id += 1;
            if j + n_test >= cfg.impressions_per_user {
                test.push(row);
            } else {
                train.push(row);
            }
        }
        user_topics.push(user.topics);
    }
    Ok(SyntheticData {
        news,
        train,
        test,
        news_topic,
        user_topics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_timestamp;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_users: 300,
            num_news: 600,
            impressions_per_user: 12,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn seeded_generation_is_identical() {
        assert_eq!(generate_synthetic(&small(3)).unwrap(), generate_synthetic(&small(3)).unwrap());
        assert_ne!(generate_synthetic(&small(3)).unwrap(), generate_synthetic(&small(4)).unwrap());
    }

    #[test]
    fn single_topic_still_has_mixed_labels() {
        let cfg = SyntheticConfig {
            num_topics: 1,
            ..small(1)
        };
        let d = generate_synthetic(&cfg).unwrap();
        assert!(d.user_topics.iter().all(|t| t == &vec![0]));
        for row in d.train.iter().chain(&d.test) {
            let clicks = row.candidates.iter().filter(|c| c.1 == 1).count();
            assert_eq!(clicks, 1);
            assert!(row.candidates.len() > clicks);
        }
    }

    #[test]
    fn timestamps_parse_and_split_is_chronological() {
        let d = generate_synthetic(&small(2)).unwrap();
        let last_train = d.train.iter().filter(|r| r.user_id == "U0").map(|r| parse_timestamp(&r.timestamp).unwrap()).max().unwrap();
        let first_test = d.test.iter().filter(|r| r.user_id == "U0").map(|r| parse_timestamp(&r.timestamp).unwrap()).min().unwrap();
        assert!(last_train < first_test);
        assert_eq!(d.test.len(), 300 * 2);
    }

    #[test]
    fn clicks_favor_preferred_topics() {
        let d = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let index: std::collections::HashMap<&str, usize> =
            d.news.iter().enumerate().map(|(i, n)| (n.news_id.as_str(), i)).collect();
        let (mut hits, mut total) = (0usize, 0usize);
        for row in d.train.iter().chain(&d.test) {
            let u: usize = row.user_id[1..].parse().unwrap();
            for (id, _) in row.candidates.iter().filter(|c| c.1 == 1) {
                total += 1;
                hits += d.user_topics[u].contains(&d.news_topic[index[id.as_str()]]) as usize;
            }
        }
        let purity = hits as f64 / total as f64;
        assert!(total >= 10_000);
        assert!((purity - 0.9).abs() <= 0.02, "purity {purity}");
    }

    #[test]
    fn zero_counts_rejected() {
        let cfg = SyntheticConfig {
            num_users: 0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }
}
