//! MIND-format `news.tsv` / `behaviors.tsv` reading and writing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

use super::{Corpus, ImpressionLog};

/// One row of `news.tsv`; only the fields the model uses are kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsRecord {
    pub news_id: String,
    pub category: String,
    pub subcategory: String,
    pub title: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NewsTable {
    pub records: Vec<NewsRecord>,
    /// Rows with fewer than four columns.
    pub malformed: usize,
}

/// One `behaviors.tsv` row before news ids are resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImpression {
    pub impression_id: String,
    pub user_id: String,
    pub timestamp: String,
    pub history: Vec<String>,
    pub candidates: Vec<(String, u8)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BehaviorsTable {
    pub rows: Vec<RawImpression>,
    /// Rows dropped for a wrong column count or a bad candidate token.
    pub malformed: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResolvedBehaviors {
    pub impressions: Vec<ImpressionLog>,
    /// History or candidate references to news missing from the corpus.
    pub unknown_news: usize,
    /// Rows left without any known candidate.
    pub skipped: usize,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_news_str(text: &str) -> NewsTable {
    let mut table = NewsTable::default();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 || cols[0].is_empty() {
            table.malformed += 1;
            continue;
        }
        table.records.push(NewsRecord {
            news_id: cols[0].to_string(),
            category: cols[1].to_string(),
            subcategory: cols[2].to_string(),
            title: cols[3].to_string(),
        });
    }
    table
}

pub fn parse_news_tsv(path: &Path) -> Result<NewsTable> {
    let table = parse_news_str(&read(path)?);
    if table.malformed > 0 {
        warn!("{}: skipped {} malformed rows", path.display(), table.malformed);
    }
    Ok(table)
}

fn parse_candidate(tok: &str) -> Option<(String, u8)> {
    let (id, label) = tok.rsplit_once('-')?;
    let label = match label {
        "0" => 0,
        "1" => 1,
        _ => return None,
    };
    if id.is_empty() {
        return None;
    }
    Some((id.to_string(), label))
}

pub fn parse_behaviors_str(text: &str) -> BehaviorsTable {
    let mut table = BehaviorsTable::default();
    'rows: for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 5 {
            table.malformed += 1;
            continue;
        }
        let mut candidates = Vec::new();
        for tok in cols[4].split_whitespace() {
            match parse_candidate(tok) {
                Some(c) => candidates.push(c),
                None => {
                    table.malformed += 1;
                    continue 'rows;
                }
            }
        }
        table.rows.push(RawImpression {
            impression_id: cols[0].to_string(),
            user_id: cols[1].to_string(),
            timestamp: cols[2].to_string(),
            history: cols[3].split_whitespace().map(str::to_string).collect(),
            candidates,
        });
    }
    table
}

pub fn read_behaviors_tsv(path: &Path) -> Result<BehaviorsTable> {
    let table = parse_behaviors_str(&read(path)?);
    if table.malformed > 0 {
        warn!("{}: skipped {} malformed rows", path.display(), table.malformed);
    }
    Ok(table)
}

/// Resolves raw rows against a corpus. Unknown news ids are dropped and
/// counted; rows with no known candidate are skipped.
pub fn resolve_behaviors(rows: &[RawImpression], corpus: &Corpus) -> ResolvedBehaviors {
    let mut out = ResolvedBehaviors::default();
    for row in rows {
        let mut history = Vec::with_capacity(row.history.len());
        for id in &row.history {
            match corpus.index_of(id) {
                Some(i) => history.push(i),
                None => out.unknown_news += 1,
            }
        }
        let mut candidates = Vec::with_capacity(row.candidates.len());
        for (id, label) in &row.candidates {
            match corpus.index_of(id) {
                Some(i) => candidates.push((i, *label)),
                None => out.unknown_news += 1,
            }
        }
        if candidates.is_empty() {
            out.skipped += 1;
            continue;
        }
        out.impressions.push(ImpressionLog {
            impression_id: row.impression_id.clone(),
            user_id: row.user_id.clone(),
            timestamp: row.timestamp.clone(),
            history,
            candidates,
        });
    }
    out
}

/// `parse_behaviors_tsv`: read and resolve in one step.
pub fn parse_behaviors_tsv(path: &Path, corpus: &Corpus) -> Result<ResolvedBehaviors> {
    let table = read_behaviors_tsv(path)?;
    let resolved = resolve_behaviors(&table.rows, corpus);
    if resolved.unknown_news > 0 {
        warn!(
            "{}: dropped {} references to unknown news",
            path.display(),
            resolved.unknown_news
        );
    }
    Ok(resolved)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn clean(field: &str) -> String {
    field.replace(['\t', '\n', '\r'], " ")
}

/// Writes eight MIND columns; abstract, url and entity columns are empty.
pub fn write_news_tsv<'r>(
    path: &Path,
    records: impl IntoIterator<Item = &'r NewsRecord>,
) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t\t\t\t",
            clean(&r.news_id),
            clean(&r.category),
            clean(&r.subcategory),
            clean(&r.title)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_behaviors_tsv<'r>(
    path: &Path,
    rows: impl IntoIterator<Item = &'r RawImpression>,
) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        let cands: Vec<String> = r
            .candidates
            .iter()
            .map(|(id, l)| format!("{id}-{l}"))
            .collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.impression_id,
            r.user_id,
            r.timestamp,
            r.history.join(" "),
            cands.join(" ")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
