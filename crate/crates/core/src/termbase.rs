//! Terminology databases: ingestion, frequency filtering and source-disjoint splits.
//!
//! Term bases are plain UTF-8 TSV files with one `source<TAB>target` pair per
//! line. Phrases are tokenized on whitespace. Frequency lists are
//! `word<TAB>count` in rank order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{fold, fold_phrase, split_tokens};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermEntry {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl TermEntry {
    /// Builds an entry from whitespace-separated phrases.
    pub fn new(id: impl Into<String>, source: &str, target: &str) -> Result<Self> {
        let source = split_tokens(source);
        let target = split_tokens(target);
        if source.is_empty() || target.is_empty() {
            return Err(Error::invalid("term phrases must be non-empty"));
        }
        Ok(TermEntry {
            id: id.into(),
            source,
            target,
        })
    }

    pub fn source_text(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_text(&self) -> String {
        self.target.join(" ")
    }

    fn key(&self) -> (&[String], &[String]) {
        (&self.source, &self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermBase {
    pub name: String,
    entries: Vec<TermEntry>,
}

impl TermBase {
    /// Creates a term base, dropping exact (source, target) duplicates.
    pub fn new(name: impl Into<String>, entries: impl IntoIterator<Item = TermEntry>) -> Self {
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        for e in entries {
            if seen.insert((e.source.clone(), e.target.clone())) {
                kept.push(e);
            }
        }
        TermBase {
            name: name.into(),
            entries: kept,
        }
    }

    pub fn empty(name: impl Into<String>) -> Self {
        TermBase::new(name, Vec::new())
    }

    pub fn entries(&self) -> &[TermEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses TSV text. Line numbers in errors are 1-based.
    pub fn parse(name: &str, text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("expected 2 tab-separated fields, found {}", fields.len()),
                });
            }
            let entry =
                TermEntry::new(format!("{name}:{line_no}"), fields[0], fields[1]).map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "empty source or target phrase".into(),
                })?;
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(Error::Empty(format!("term base {}", path.display())));
        }
        Ok(TermBase::new(name, entries))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}", e.source_text(), e.target_text());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Equality on the (source, target) sets, ignoring ids and order.
    pub fn same_entries(&self, other: &TermBase) -> bool {
        let a: HashSet<_> = self.entries.iter().map(TermEntry::key).collect();
        let b: HashSet<_> = other.entries.iter().map(TermEntry::key).collect();
        a == b
    }
}

pub fn ingest_termbase(path: &Path, name: &str) -> Result<TermBase> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TermBase::parse(name, &text, path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyList {
    ranked: Vec<(String, u64)>,
}

impl FrequencyList {
    /// Ranks words by count (descending), ties broken lexicographically, and
    /// keeps the first `top_n`.
    pub fn from_counts(counts: HashMap<String, u64>, top_n: usize) -> Self {
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(top_n);
        FrequencyList { ranked }
    }

    /// Counts case-folded whitespace tokens of `lines`.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>, top_n: usize) -> Result<Self> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(fold(tok)).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("frequency corpus".into()));
        }
        Ok(Self::from_counts(counts, top_n))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(w, _)| w.as_str())
    }

    pub fn ranked(&self) -> &[(String, u64)] {
        &self.ranked
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn contains(&self, folded: &str) -> bool {
        self.ranked.iter().any(|(w, _)| w == folded)
    }

    pub fn to_tsv(&self) -> String {
        self.ranked.iter().map(|(w, c)| format!("{w}\t{c}\n")).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut ranked = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: message.into(),
            };
            let (word, count) = line.split_once('\t').ok_or_else(|| bad("expected word<TAB>count"))?;
            let count: u64 = count.trim().parse().map_err(|_| bad("count is not an integer"))?;
            if let Some((_, prev)) = ranked.last() {
                if count > *prev {
                    return Err(bad("counts must be non-increasing in rank order"));
                }
            }
            ranked.push((fold(word), count));
        }
        Ok(FrequencyList { ranked })
    }
}

pub fn build_frequency_list(corpus: &Path, top_n: usize) -> Result<FrequencyList> {
    let text = fs::read_to_string(corpus).map_err(|e| Error::io(corpus, e))?;
    FrequencyList::from_lines(text.lines(), top_n)
}

pub const DEFAULT_MIN_CHARS: usize = 2;

/// Drops single-word entries whose source is a frequent word, and entries whose
/// source side has fewer than `min_chars` characters. Multi-word entries are
/// never removed by the frequency rule.
pub fn filter_termbase(tb: &TermBase, freq: &FrequencyList, min_chars: usize) -> Result<TermBase> {
    if min_chars == 0 {
        return Err(Error::invalid("min_chars must be at least 1"));
    }
    let frequent: HashSet<&str> = freq.words().collect();
    let kept = tb.entries.iter().filter(|e| {
        let chars: usize = e.source.iter().map(|t| t.chars().count()).sum();
        if chars < min_chars {
            return false;
        }
        !(e.source.len() == 1 && frequent.contains(fold(&e.source[0]).as_str()))
    });
    Ok(TermBase::new(tb.name.clone(), kept.cloned()))
}

/// Splits into (train, test) so that no case-folded source phrase is on both sides.
pub fn split_termbase(tb: &TermBase, test_fraction: f64, seed: u64) -> Result<(TermBase, TermBase)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in tb.entries.iter().enumerate() {
        groups.entry(fold_phrase(&e.source)).or_default().push(i);
    }
    let n_groups = groups.len();
    let n_test = (test_fraction * n_groups as f64).round() as usize;
    if n_test == 0 || n_test == n_groups {
        return Err(Error::invalid(format!(
            "term base with {n_groups} source groups is too small for test_fraction {test_fraction}"
        )));
    }
    let mut keys: Vec<&String> = groups.keys().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_keys: HashSet<&String> = keys[..n_test].iter().copied().collect();

    let mut in_test = vec![false; tb.entries.len()];
    for (k, idx) in &groups {
        if test_keys.contains(k) {
            for &i in idx {
                in_test[i] = true;
            }
        }
    }
    let pick = |want: bool| {
        tb.entries
            .iter()
            .zip(&in_test)
            .filter(move |(_, &t)| t == want)
            .map(|(e, _)| e.clone())
    };
    Ok((
        TermBase::new(format!("{}.train", tb.name), pick(false)),
        TermBase::new(format!("{}.test", tb.name), pick(true)),
    ))
}
