//! Term matching and inline source annotation with a parallel factor stream.
//!
//! Factor values: `0` ordinary source word, `1` source side of a matched term,
//! `2` injected target term. In append mode the target phrase follows the
//! matched source span; in replace mode it takes the span's place.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::termbase::{TermBase, TermEntry};
use crate::text::{contains_run, fold, split_tokens};
use crate::util::mix_seed;

pub const DEFAULT_MIN_STEM_LEN: usize = 4;
pub const DEFAULT_AUGMENT_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Factor {
    Source = 0,
    SourceTerm = 1,
    TargetTerm = 2,
}

impl Factor {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u32> for Factor {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            0 => Ok(Factor::Source),
            1 => Ok(Factor::SourceTerm),
            2 => Ok(Factor::TargetTerm),
            other => Err(Error::InvalidFactor(other)),
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    Append,
    Replace,
}

impl std::str::FromStr for AnnotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "append" => Ok(AnnotationMode::Append),
            "replace" => Ok(AnnotationMode::Replace),
            other => Err(Error::invalid(format!("unknown annotation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactoredSentence {
    tokens: Vec<String>,
    factors: Vec<Factor>,
}

impl FactoredSentence {
    pub fn new(tokens: Vec<String>, factors: Vec<Factor>) -> Result<Self> {
        if tokens.len() != factors.len() {
            return Err(Error::LengthMismatch {
                what: "tokens vs factors",
                left: tokens.len(),
                right: factors.len(),
            });
        }
        Ok(FactoredSentence { tokens, factors })
    }

    /// All tokens with factor 0.
    pub fn plain(tokens: Vec<String>) -> Self {
        let factors = vec![Factor::Source; tokens.len()];
        FactoredSentence { tokens, factors }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Parses a token line and its whitespace-separated factor digits.
    pub fn parse_with_factors(tokens: &str, factors: &str) -> Result<Self> {
        let factors = factors
            .split_whitespace()
            .map(|d| {
                let v: u32 = d.parse().map_err(|_| Error::invalid(format!("bad factor `{d}`")))?;
                Factor::try_from(v)
            })
            .collect::<Result<Vec<_>>>()?;
        FactoredSentence::new(split_tokens(tokens), factors)
    }

    pub fn factor_line(&self) -> String {
        self.factors.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(" ")
    }

    /// Tokens that are not injected target terms, in order.
    pub fn without_targets(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, f)| *f != Factor::TargetTerm)
            .map(|(t, _)| t.to_owned())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Factor)> {
        self.tokens.iter().map(String::as_str).zip(self.factors.iter().copied())
    }
}

impl fmt::Display for FactoredSentence {
    /// `token/factor` pairs separated by spaces.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (t, fac)) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}/{fac}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMatch {
    pub entry: TermEntry,
    pub start: usize,
    pub end: usize,
    pub kind: MatchKind,
}

impl TermMatch {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    fn overlaps(&self, other: &TermMatch) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Case-folded prefix rule: `sentence_token` starts with `term_token`, and the
/// term token is at least `min_stem_len` characters long unless both are equal.
pub fn approx_token_match_with(term_token: &str, sentence_token: &str, min_stem_len: usize) -> bool {
    let term = fold(term_token);
    let sent = fold(sentence_token);
    term == sent || (term.chars().count() >= min_stem_len && sent.starts_with(&term))
}

pub fn approx_token_match(term_token: &str, sentence_token: &str) -> bool {
    approx_token_match_with(term_token, sentence_token, DEFAULT_MIN_STEM_LEN)
}

fn token_eq(a: &str, b: &str) -> bool {
    a == b || fold(a) == fold(b)
}

/// True iff `phrase` occurs contiguously in `tokens`. With `approximate`, the last
/// phrase token may match by the prefix rule; earlier tokens must match exactly.
/// Comparison is case-insensitive.
pub fn phrase_occurs(phrase: &[String], tokens: &[String], approximate: bool) -> bool {
    contains_run(tokens, phrase, |p, t, last| {
        token_eq(p, t) || (approximate && last && approx_token_match(p, t))
    })
}

/// Index over a term base keyed by the case-folded first source token.
#[derive(Debug, Clone)]
pub struct TermMatcher<'a> {
    entries: &'a [TermEntry],
    by_first: HashMap<String, Vec<usize>>,
    min_stem_len: usize,
}

impl<'a> TermMatcher<'a> {
    pub fn new(tb: &'a TermBase) -> Self {
        let mut by_first: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in tb.entries().iter().enumerate() {
            by_first.entry(fold(&e.source[0])).or_default().push(i);
        }
        TermMatcher {
            entries: tb.entries(),
            by_first,
            min_stem_len: DEFAULT_MIN_STEM_LEN,
        }
    }

    /// All candidate matches, overlapping ones included.
    pub fn candidates(&self, sentence: &[String], approximate: bool) -> Vec<TermMatch> {
        let mut out = Vec::new();
        for start in 0..sentence.len() {
            let word = fold(&sentence[start]);
            let mut keys = vec![(word.clone(), true)];
            if approximate {
                // every proper prefix that satisfies the stem length may be a single-token term
                let bounds: Vec<usize> = word.char_indices().map(|(b, _)| b).skip(1).collect();
                for (n_chars, &b) in bounds.iter().enumerate() {
                    if n_chars + 1 >= self.min_stem_len {
                        keys.push((word[..b].to_owned(), false));
                    }
                }
            }
            for (key, whole) in keys {
                let Some(ids) = self.by_first.get(&key) else { continue };
                for &id in ids {
                    let entry = &self.entries[id];
                    if let Some(m) = self.match_at(sentence, start, entry, approximate, whole) {
                        out.push(m);
                    }
                }
            }
        }
        out
    }

    fn match_at(
        &self,
        sentence: &[String],
        start: usize,
        entry: &TermEntry,
        approximate: bool,
        first_whole: bool,
    ) -> Option<TermMatch> {
        let n = entry.source.len();
        if start + n > sentence.len() {
            return None;
        }
        // prefix keys only apply to single-token terms
        if !first_whole && n != 1 {
            return None;
        }
        let mut kind = MatchKind::Exact;
        for (i, term_tok) in entry.source.iter().enumerate() {
            let sent_tok = &sentence[start + i];
            if token_eq(term_tok, sent_tok) {
                continue;
            }
            let last = i + 1 == n;
            if approximate && last && approx_token_match_with(term_tok, sent_tok, self.min_stem_len) {
                kind = MatchKind::Approximate;
            } else {
                return None;
            }
        }
        Some(TermMatch {
            entry: entry.clone(),
            start,
            end: start + n,
            kind,
        })
    }

    /// Non-overlapping matches, longest first; ties go to the leftmost, then to the
    /// lexicographically smallest target. Result is sorted by start.
    pub fn find(&self, sentence: &[String], approximate: bool) -> Vec<TermMatch> {
        let mut cands = self.candidates(sentence, approximate);
        cands.sort_by(|a, b| {
            b.len()
                .cmp(&a.len())
                .then(a.start.cmp(&b.start))
                .then_with(|| a.entry.target.cmp(&b.entry.target))
                .then_with(|| (a.kind as u8).cmp(&(b.kind as u8)))
                .then_with(|| a.entry.id.cmp(&b.entry.id))
        });
        let mut kept: Vec<TermMatch> = Vec::new();
        for c in cands {
            if kept.iter().all(|k| !k.overlaps(&c)) {
                kept.push(c);
            }
        }
        kept.sort_by_key(|m| m.start);
        kept
    }
}

pub fn find_matches(sentence: &[String], tb: &TermBase, approximate: bool) -> Vec<TermMatch> {
    TermMatcher::new(tb).find(sentence, approximate)
}

pub fn annotate_sentence(sentence: &[String], matches: &[TermMatch], mode: AnnotationMode) -> Result<FactoredSentence> {
    let mut prev_end = 0;
    for m in matches {
        if m.start >= m.end || m.end > sentence.len() {
            return Err(Error::InvalidMatches(format!(
                "span [{}, {}) is invalid for a sentence of length {}",
                m.start,
                m.end,
                sentence.len()
            )));
        }
        if m.start < prev_end {
            return Err(Error::InvalidMatches(format!(
                "span [{}, {}) overlaps or precedes an earlier match",
                m.start, m.end
            )));
        }
        prev_end = m.end;
    }

    let mut tokens = Vec::with_capacity(sentence.len() + 4);
    let mut factors = Vec::with_capacity(sentence.len() + 4);
    let mut pos = 0;
    for m in matches {
        for tok in &sentence[pos..m.start] {
            tokens.push(tok.clone());
            factors.push(Factor::Source);
        }
        if mode == AnnotationMode::Append {
            for tok in &sentence[m.start..m.end] {
                tokens.push(tok.clone());
                factors.push(Factor::SourceTerm);
            }
        }
        for tok in &m.entry.target {
            tokens.push(tok.clone());
            factors.push(Factor::TargetTerm);
        }
        pos = m.end;
    }
    for tok in &sentence[pos..] {
        tokens.push(tok.clone());
        factors.push(Factor::Source);
    }
    FactoredSentence::new(tokens, factors)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPair {
    pub source: FactoredSentence,
    pub target: Vec<String>,
    /// Index of the original pair this one was derived from.
    pub origin: usize,
    pub annotated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactoredCorpus {
    pub pairs: Vec<CorpusPair>,
}

impl FactoredCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn annotated_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.annotated).count()
    }

    pub fn plain(src: &[Vec<String>], tgt: &[Vec<String>]) -> Result<Self> {
        check_aligned(src, tgt, "source vs target sentences")?;
        Ok(FactoredCorpus {
            pairs: src
                .iter()
                .zip(tgt)
                .enumerate()
                .map(|(i, (s, t))| CorpusPair {
                    source: FactoredSentence::plain(s.clone()),
                    target: t.clone(),
                    origin: i,
                    annotated: false,
                })
                .collect(),
        })
    }

    /// Writes `<prefix>.tok`, `<prefix>.factors` and `<prefix>.tgt`.
    pub fn write(&self, prefix: &Path) -> Result<Vec<PathBuf>> {
        let mut tok = String::new();
        let mut fac = String::new();
        let mut tgt = String::new();
        for p in &self.pairs {
            tok.push_str(&p.source.tokens().join(" "));
            tok.push('\n');
            fac.push_str(&p.source.factor_line());
            fac.push('\n');
            tgt.push_str(&p.target.join(" "));
            tgt.push('\n');
        }
        let mut written = Vec::new();
        for (ext, body) in [("tok", tok), ("factors", fac), ("tgt", tgt)] {
            let path = with_ext(prefix, ext);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    pub fn read(prefix: &Path) -> Result<Self> {
        let sources = read_factored(&with_ext(prefix, "tok"), Some(&with_ext(prefix, "factors")))?;
        let tgt_path = with_ext(prefix, "tgt");
        let targets = read_lines(&tgt_path)?;
        check_aligned(&sources, &targets, "corpus.tok vs corpus.tgt")?;
        Ok(FactoredCorpus {
            pairs: sources
                .into_iter()
                .zip(targets)
                .enumerate()
                .map(|(i, (source, t))| CorpusPair {
                    annotated: source.factors().iter().any(|&f| f != Factor::Source),
                    source,
                    target: split_tokens(&t),
                    origin: i,
                })
                .collect(),
        })
    }
}

pub fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Reads whitespace-tokenized sentences with an optional aligned factor file.
pub fn read_factored(tok_path: &Path, factor_path: Option<&Path>) -> Result<Vec<FactoredSentence>> {
    let lines = read_lines(tok_path)?;
    let Some(fpath) = factor_path else {
        return Ok(lines.iter().map(|l| FactoredSentence::plain(split_tokens(l))).collect());
    };
    let flines = read_lines(fpath)?;
    check_aligned(&lines, &flines, "token vs factor lines")?;
    lines
        .iter()
        .zip(&flines)
        .enumerate()
        .map(|(i, (l, f))| {
            FactoredSentence::parse_with_factors(l, f).map_err(|e| Error::Parse {
                path: fpath.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn check_aligned<A, B>(a: &[A], b: &[B], what: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what,
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Original corpus (all factors 0) followed by annotated copies of a seeded
/// random subset of eligible pairs. A match is eligible only when its target
/// phrase occurs in the reference, allowing an inflected final token. Source
/// matching is approximate.
pub fn build_training_corpus(
    src: &[Vec<String>],
    tgt: &[Vec<String>],
    tb: &TermBase,
    mode: AnnotationMode,
    augment_fraction: f64,
    seed: u64,
) -> Result<FactoredCorpus> {
    check_aligned(src, tgt, "source vs target sentences")?;
    if !(0.0..=1.0).contains(&augment_fraction) {
        return Err(Error::invalid(format!(
            "augment_fraction must be in [0, 1], got {augment_fraction}"
        )));
    }
    let mut corpus = FactoredCorpus::plain(src, tgt)?;
    let wanted = (augment_fraction * src.len() as f64).round() as usize;
    if wanted == 0 {
        return Ok(corpus);
    }

    let matcher = TermMatcher::new(tb);
    let mut eligible: Vec<(u64, usize, Vec<TermMatch>)> = src
        .iter()
        .zip(tgt)
        .enumerate()
        .filter_map(|(i, (s, t))| {
            let kept: Vec<TermMatch> = matcher
                .find(s, true)
                .into_iter()
                .filter(|m| phrase_occurs(&m.entry.target, t, true))
                .collect();
            (!kept.is_empty()).then(|| (mix_seed(seed, i as u64), i, kept))
        })
        .collect();
    eligible.sort_by_key(|(key, i, _)| (*key, *i));
    eligible.truncate(wanted);
    eligible.sort_by_key(|(_, i, _)| *i);

    for (_, i, matches) in eligible {
        corpus.pairs.push(CorpusPair {
            source: annotate_sentence(&src[i], &matches, mode)?,
            target: tgt[i].clone(),
            origin: i,
            annotated: true,
        });
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMatch {
    Exact,
    Approximate,
}

impl TargetMatch {
    pub fn is_approximate(self) -> bool {
        self == TargetMatch::Approximate
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    /// Line index in the original test corpus.
    pub index: usize,
    pub source: Vec<String>,
    pub reference: Vec<String>,
    pub matches: Vec<TermMatch>,
}

impl TestItem {
    pub fn gold_terms(&self) -> Vec<Vec<String>> {
        self.matches.iter().map(|m| m.entry.target.clone()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSet {
    pub items: Vec<TestItem>,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn term_count(&self) -> usize {
        self.items.iter().map(|i| i.matches.len()).sum()
    }

    pub fn annotated(&self, mode: AnnotationMode) -> Result<Vec<FactoredSentence>> {
        self.items
            .iter()
            .map(|it| annotate_sentence(&it.source, &it.matches, mode))
            .collect()
    }

    pub fn plain_sources(&self) -> Vec<FactoredSentence> {
        self.items
            .iter()
            .map(|it| FactoredSentence::plain(it.source.clone()))
            .collect()
    }

    pub fn references(&self) -> Vec<Vec<String>> {
        self.items.iter().map(|i| i.reference.clone()).collect()
    }

    pub fn gold_terms(&self) -> Vec<Vec<Vec<String>>> {
        self.items.iter().map(TestItem::gold_terms).collect()
    }
}

/// Keeps sentences with at least one exact source match whose target side occurs
/// in the reference under `target_match`.
pub fn extract_test_set(
    src: &[Vec<String>],
    refs: &[Vec<String>],
    tb: &TermBase,
    target_match: TargetMatch,
) -> Result<TestSet> {
    check_aligned(src, refs, "test sources vs references")?;
    let matcher = TermMatcher::new(tb);
    let items = src
        .iter()
        .zip(refs)
        .enumerate()
        .filter_map(|(index, (s, r))| {
            let matches: Vec<TermMatch> = matcher
                .find(s, false)
                .into_iter()
                .filter(|m| phrase_occurs(&m.entry.target, r, target_match.is_approximate()))
                .collect();
            (!matches.is_empty()).then(|| TestItem {
                index,
                source: s.clone(),
                reference: r.clone(),
                matches,
            })
        })
        .collect();
    Ok(TestSet { items })
}
