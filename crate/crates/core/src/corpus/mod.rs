//! News and impression data: MIND-format parsing, tokenization, training
//! sample construction and a synthetic dataset generator.

mod sampling;
mod synthetic;
mod tsv;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use sampling::{
    clicked_by_user, sample_ranking_batch, sample_recall_batch, RankingSample, RecallSample,
};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};
pub use tsv::{
    parse_behaviors_str, parse_behaviors_tsv, parse_news_str, parse_news_tsv,
    read_behaviors_tsv, resolve_behaviors, write_behaviors_tsv, write_news_tsv,
    BehaviorsTable, NewsRecord, NewsTable, RawImpression, ResolvedBehaviors,
};
pub use vocab::{build_vocab, tokenize_title, tokenize_words, Vocab, PAD, UNK};

pub const DEFAULT_TITLE_LEN: usize = 30;

/// Index of a news item inside a [`Corpus`].
pub type NewsIdx = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsArticle {
    pub news_id: String,
    pub category: String,
    pub subcategory: String,
    pub title: String,
    /// Exactly `title_len` ids, padded with [`PAD`].
    pub title_tokens: Vec<u32>,
}

impl NewsArticle {
    pub fn record(&self) -> NewsRecord {
        NewsRecord {
            news_id: self.news_id.clone(),
            category: self.category.clone(),
            subcategory: self.subcategory.clone(),
            title: self.title.clone(),
        }
    }

    /// Number of non-padding tokens.
    pub fn token_count(&self) -> usize {
        self.title_tokens.iter().filter(|&&t| t != PAD).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    articles: Vec<NewsArticle>,
    title_len: usize,
    #[serde(skip)]
    index: HashMap<String, NewsIdx>,
}

impl Corpus {
    /// Tokenizes records into articles. Later duplicates of a news id are
    /// dropped; their count is returned alongside the corpus.
    pub fn build(records: Vec<NewsRecord>, vocab: &Vocab, title_len: usize) -> (Corpus, usize) {
        let mut corpus = Corpus {
            articles: Vec::with_capacity(records.len()),
            title_len,
            index: HashMap::with_capacity(records.len()),
        };
        let mut duplicates = 0;
        for r in records {
            if corpus.index.contains_key(&r.news_id) {
                duplicates += 1;
                continue;
            }
            let title_tokens = tokenize_title(&r.title, vocab, title_len);
            corpus.index.insert(r.news_id.clone(), corpus.articles.len());
            corpus.articles.push(NewsArticle {
                news_id: r.news_id,
                category: r.category,
                subcategory: r.subcategory,
                title: r.title,
                title_tokens,
            });
        }
        (corpus, duplicates)
    }

    pub fn reindex(&mut self) {
        self.index = self
            .articles
            .iter()
            .enumerate()
            .map(|(i, a)| (a.news_id.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn title_len(&self) -> usize {
        self.title_len
    }

    pub fn articles(&self) -> &[NewsArticle] {
        &self.articles
    }

    pub fn article(&self, idx: NewsIdx) -> &NewsArticle {
        &self.articles[idx]
    }

    pub fn index_of(&self, news_id: &str) -> Option<NewsIdx> {
        self.index.get(news_id).copied()
    }

    pub fn news_id(&self, idx: NewsIdx) -> &str {
        &self.articles[idx].news_id
    }

    pub fn records(&self) -> impl Iterator<Item = NewsRecord> + '_ {
        self.articles.iter().map(NewsArticle::record)
    }
}

/// One impression: the user's click history (oldest first) and the displayed
/// candidates with click labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpressionLog {
    pub impression_id: String,
    pub user_id: String,
    pub timestamp: String,
    pub history: Vec<NewsIdx>,
    pub candidates: Vec<(NewsIdx, u8)>,
}

impl ImpressionLog {
    pub fn clicked(&self) -> impl Iterator<Item = NewsIdx> + '_ {
        self.candidates.iter().filter(|c| c.1 == 1).map(|c| c.0)
    }

    pub fn non_clicked(&self) -> impl Iterator<Item = NewsIdx> + '_ {
        self.candidates.iter().filter(|c| c.1 == 0).map(|c| c.0)
    }

    pub fn to_raw(&self, corpus: &Corpus) -> RawImpression {
        RawImpression {
            impression_id: self.impression_id.clone(),
            user_id: self.user_id.clone(),
            timestamp: self.timestamp.clone(),
            history: self
                .history
                .iter()
                .map(|&i| corpus.news_id(i).to_string())
                .collect(),
            candidates: self
                .candidates
                .iter()
                .map(|&(i, l)| (corpus.news_id(i).to_string(), l))
                .collect(),
        }
    }
}

/// MIND timestamps look like `11/15/2019 8:55:22 AM`.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%m/%d/%Y %I:%M:%S %p").ok()
}

/// How validation impressions are carved out of the training period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationSplit {
    /// The latest fraction of training impressions by timestamp.
    Time,
    /// All impressions of a hashed fraction of users.
    User,
}

impl std::str::FromStr for ValidationSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(ValidationSplit::Time),
            "user" => Ok(ValidationSplit::User),
            other => Err(Error::Config(format!(
                "validation split must be `time` or `user`, got `{other}`"
            ))),
        }
    }
}

/// Splits training-period impressions into (train, validation).
pub fn split_validation(
    mut impressions: Vec<ImpressionLog>,
    fraction: f64,
    mode: ValidationSplit,
) -> (Vec<ImpressionLog>, Vec<ImpressionLog>) {
    if fraction <= 0.0 || impressions.is_empty() {
        return (impressions, Vec::new());
    }
    match mode {
        ValidationSplit::Time => {
            // Stable sort keeps file order for equal or unparseable timestamps.
            impressions.sort_by_key(|imp| parse_timestamp(&imp.timestamp));
            let n_valid = ((impressions.len() as f64) * fraction).round() as usize;
            let n_valid = n_valid.min(impressions.len());
            let valid = impressions.split_off(impressions.len() - n_valid);
            (impressions, valid)
        }
        ValidationSplit::User => {
            let threshold = (fraction * u64::MAX as f64) as u64;
            impressions
                .into_iter()
                .partition(|imp| user_hash(&imp.user_id) >= threshold)
        }
    }
}

fn user_hash(user: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(user.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataOptions {
    pub title_len: usize,
    pub min_count: usize,
    pub valid_fraction: f64,
    pub valid_split: ValidationSplit,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            title_len: DEFAULT_TITLE_LEN,
            min_count: 1,
            valid_fraction: 0.1,
            valid_split: ValidationSplit::Time,
        }
    }
}

/// Counters from parsing, kept for the dataset summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseStats {
    pub malformed_news: usize,
    pub duplicate_news: usize,
    pub malformed_behaviors: usize,
    pub unknown_news_refs: usize,
    pub skipped_impressions: usize,
}

/// A tokenized corpus with train/validation/test impressions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub train: Vec<ImpressionLog>,
    pub valid: Vec<ImpressionLog>,
    pub test: Vec<ImpressionLog>,
    pub stats: ParseStats,
}

impl Dataset {
    /// Builds a dataset from raw news and behaviors. The vocabulary is built
    /// from every title in `news`.
    pub fn from_raw(
        news: NewsTable,
        train: BehaviorsTable,
        test: BehaviorsTable,
        opts: &DataOptions,
    ) -> Result<Dataset> {
        if opts.title_len == 0 {
            return Err(Error::Config("title_len must be at least 1".into()));
        }
        let vocab = build_vocab(news.records.iter().map(|r| r.title.as_str()), opts.min_count);
        let (corpus, duplicate_news) = Corpus::build(news.records, &vocab, opts.title_len);
        let tr = resolve_behaviors(&train.rows, &corpus);
        let te = resolve_behaviors(&test.rows, &corpus);
        let (train_imps, valid_imps) =
            split_validation(tr.impressions, opts.valid_fraction, opts.valid_split);
        Ok(Dataset {
            stats: ParseStats {
                malformed_news: news.malformed,
                duplicate_news,
                malformed_behaviors: train.malformed + test.malformed,
                unknown_news_refs: tr.unknown_news + te.unknown_news,
                skipped_impressions: tr.skipped + te.skipped,
            },
            corpus,
            vocab,
            train: train_imps,
            valid: valid_imps,
            test: te.impressions,
        })
    }

    /// Loads a MIND-layout pair of directories, each holding `news.tsv` and
    /// `behaviors.tsv`. News from both directories form one corpus.
    pub fn load_mind(train_dir: &Path, test_dir: &Path, opts: &DataOptions) -> Result<Dataset> {
        let mut news = parse_news_tsv(&train_dir.join("news.tsv"))?;
        if test_dir != train_dir {
            let extra = parse_news_tsv(&test_dir.join("news.tsv"))?;
            news.malformed += extra.malformed;
            news.records.extend(extra.records);
        }
        let train = read_behaviors_tsv(&train_dir.join("behaviors.tsv"))?;
        let test = read_behaviors_tsv(&test_dir.join("behaviors.tsv"))?;
        Self::from_raw(news, train, test, opts)
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.corpus.reindex();
        self.vocab.reindex();
    }

    pub fn summary(&self) -> DatasetSummary {
        let all = || self.train.iter().chain(&self.valid).chain(&self.test);
        let users: HashSet<&str> = all().map(|i| i.user_id.as_str()).collect();
        let clicks: usize = all().map(|i| i.clicked().count()).sum();
        let categories: HashSet<&str> = self
            .corpus
            .articles()
            .iter()
            .map(|a| a.category.as_str())
            .collect();
        let total_tokens: usize = self
            .corpus
            .articles()
            .iter()
            .map(|a| tokenize_words(&a.title).len())
            .sum();
        DatasetSummary {
            users: users.len(),
            news: self.corpus.len(),
            impressions: all().count(),
            clicks,
            avg_title_len: if self.corpus.is_empty() {
                0.0
            } else {
                total_tokens as f64 / self.corpus.len() as f64
            },
            categories: categories.len(),
            vocab: self.vocab.len(),
            train_impressions: self.train.len(),
            valid_impressions: self.valid.len(),
            test_impressions: self.test.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub news: usize,
    pub impressions: usize,
    pub clicks: usize,
    /// Words per title before truncation.
    pub avg_title_len: f64,
    pub categories: usize,
    pub vocab: usize,
    pub train_impressions: usize,
    pub valid_impressions: usize,
    pub test_impressions: usize,
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "# Users               {:>12}   # News             {:>12}",
            self.users, self.news
        )?;
        writeln!(
            f,
            "# Impressions         {:>12}   # Click behaviors  {:>12}",
            self.impressions, self.clicks
        )?;
        writeln!(
            f,
            "Avg. news title len.  {:>12.2}   # Categories       {:>12}",
            self.avg_title_len, self.categories
        )?;
        write!(
            f,
            "(vocab {}, train/valid/test impressions {}/{}/{})",
            self.vocab, self.train_impressions, self.valid_impressions, self.test_impressions
        )
    }
}
