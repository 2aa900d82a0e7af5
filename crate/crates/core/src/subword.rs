//! Joint byte-pair encoding over source and target text.
//!
//! Words are split into characters followed by a separate end-of-word symbol
//! `</w>`, and merges are learned on pair frequencies over both sides of the
//! corpus. Segmented output uses the `@@` continuation convention: every piece
//! except the last of a word carries a trailing `@@`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{Factor, FactoredSentence};
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const CONTINUATION: &str = "@@";
pub const DEFAULT_NUM_MERGES: usize = 4000;
const FILE_MAGIC: &str = "termnmt-bpe";
const FILE_VERSION: u32 = 1;
const MIN_PAIR_FREQUENCY: i64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: BTreeSet<String>,
    #[serde(skip)]
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: BTreeSet<String>) -> Self {
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        BpeModel { merges, vocab, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Symbols (including `</w>`) present in the segmented training corpus.
    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    /// Segments a single word into output pieces.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        symbols.push(END_OF_WORD.to_owned());
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols_to_pieces(symbols)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{FILE_MAGIC} v{FILE_VERSION} {}\n", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    /// Loads a model file. The symbol vocabulary is not stored; it is rebuilt from
    /// the merges, so it contains only merged symbols and their parts.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != FILE_MAGIC || parts[1] != format!("v{FILE_VERSION}") {
            return Err(bad(1, format!("unrecognized header `{header}`")));
        }
        let count: usize = parts[2]
            .parse()
            .map_err(|_| bad(1, "merge count is not an integer".into()))?;
        let mut merges = Vec::with_capacity(count);
        let mut vocab = BTreeSet::new();
        for (i, line) in lines.enumerate() {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| bad(i + 2, "expected `left right`".into()))?;
            if l.is_empty() || r.is_empty() || r.contains(' ') {
                return Err(bad(i + 2, "expected exactly two symbols".into()));
            }
            vocab.insert(l.to_owned());
            vocab.insert(r.to_owned());
            vocab.insert(format!("{l}{r}"));
            merges.push((l.to_owned(), r.to_owned()));
        }
        if merges.len() != count {
            return Err(bad(1, format!("header says {count} merges, file has {}", merges.len())));
        }
        Ok(Self::from_parts(merges, vocab))
    }
}

fn symbols_to_pieces(mut symbols: Vec<String>) -> Vec<String> {
    if symbols.last().map(String::as_str) == Some(END_OF_WORD) {
        symbols.pop();
    } else if let Some(last) = symbols.last_mut() {
        let cut = last.len() - END_OF_WORD.len();
        last.truncate(cut);
    }
    let n = symbols.len();
    symbols
        .into_iter()
        .enumerate()
        .map(|(i, s)| if i + 1 < n { s + CONTINUATION } else { s })
        .collect()
}

/// Learns up to `num_merges` merges on the word frequencies of both corpora.
/// Ties on pair frequency go to the lexicographically smallest pair. Learning
/// stops early once no pair occurs at least twice.
pub fn bpe_train(src: &[Vec<String>], tgt: &[Vec<String>], num_merges: usize) -> Result<BpeModel> {
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for tok in src.iter().chain(tgt).flatten() {
        *counts.entry(tok.as_str()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Empty("BPE training corpus".into()));
    }

    let mut interner = Interner::default();
    let eow = interner.id(END_OF_WORD);
    let mut words: Vec<(Vec<u32>, i64)> = counts
        .iter()
        .map(|(w, &c)| {
            let mut syms: Vec<u32> = w.chars().map(|ch| interner.id(&ch.to_string())).collect();
            syms.push(eow);
            (syms, c)
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += c;
            pair_words.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= MIN_PAIR_FREQUENCY)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // smaller pair wins ties, so it must compare as "greater"
                    let ka = (interner.name(pa.0), interner.name(pa.1));
                    let kb = (interner.name(pb.0), interner.name(pb.1));
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some((left, right)) = best else { break };
        let merged_name = format!("{}{}", interner.name(left), interner.name(right));
        let merged = interner.id(&merged_name);
        merges.push((interner.name(left).to_owned(), interner.name(right).to_owned()));

        let mut affected: Vec<usize> = pair_words
            .remove(&(left, right))
            .unwrap_or_default()
            .into_iter()
            .collect();
        affected.sort_unstable();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            let c = *c;
            if !syms.windows(2).any(|p| p[0] == left && p[1] == right) {
                continue;
            }
            for p in syms.windows(2) {
                let e = pair_counts.entry((p[0], p[1])).or_default();
                *e -= c;
                if *e == 0 {
                    pair_counts.remove(&(p[0], p[1]));
                }
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += c;
                pair_words.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.remove(&(left, right));
    }

    let vocab = words
        .iter()
        .flat_map(|(syms, _)| syms.iter().map(|&s| interner.name(s).to_owned()))
        .collect();
    Ok(BpeModel::from_parts(merges, vocab))
}

#[derive(Default)]
struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn id(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(s.to_owned());
        self.ids.insert(s.to_owned(), id);
        id
    }

    fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactoredSubwordSentence {
    subwords: Vec<String>,
    factors: Vec<Factor>,
}

impl FactoredSubwordSentence {
    pub fn new(subwords: Vec<String>, factors: Vec<Factor>) -> Result<Self> {
        if subwords.len() != factors.len() {
            return Err(Error::LengthMismatch {
                what: "subwords vs factors",
                left: subwords.len(),
                right: factors.len(),
            });
        }
        Ok(FactoredSubwordSentence { subwords, factors })
    }

    pub fn subwords(&self) -> &[String] {
        &self.subwords
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.subwords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subwords.is_empty()
    }
}

/// Segments every word and copies the word's factor to each of its pieces.
pub fn bpe_apply(sentence: &FactoredSentence, model: &BpeModel) -> FactoredSubwordSentence {
    let mut subwords = Vec::with_capacity(sentence.len() * 2);
    let mut factors = Vec::with_capacity(sentence.len() * 2);
    for (word, factor) in sentence.iter() {
        for piece in model.segment(word) {
            subwords.push(piece);
            factors.push(factor);
        }
    }
    FactoredSubwordSentence { subwords, factors }
}

/// Segments plain tokens (no factors).
pub fn bpe_apply_tokens(tokens: &[String], model: &BpeModel) -> Vec<String> {
    tokens.iter().flat_map(|w| model.segment(w)).collect()
}

/// Joins pieces into words at continuation markers. A dangling continuation
/// piece at the end still yields a word.
pub fn bpe_decode<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut open = false;
    for piece in subwords {
        let piece = piece.as_ref();
        if let Some(stem) = piece.strip_suffix(CONTINUATION) {
            current.push_str(stem);
            open = true;
        } else {
            current.push_str(piece);
            out.push(std::mem::take(&mut current));
            open = false;
        }
    }
    if open {
        out.push(current);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::split_tokens;
    use proptest::prelude::*;

    fn lines(s: &[&str]) -> Vec<Vec<String>> {
        s.iter().map(|l| split_tokens(l)).collect()
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = bpe_train(&lines(&["ab ba"]), &lines(&["c"]), 0).unwrap();
        assert!(m.merges().is_empty());
        let v: Vec<&str> = m.vocab().iter().map(String::as_str).collect();
        assert_eq!(v, vec!["</w>", "a", "b", "c"]);
        assert_eq!(m.segment("abc"), vec!["a@@", "b@@", "c"]);
    }

    #[test]
    fn first_merge_by_hand_count() {
        // "aaab</w>": pairs (a,a)x2, (a,b)x1, (b,</w>)x1 per occurrence
        let corpus = lines(&["aaab aaab aaab"]);
        let m = bpe_train(&corpus, &[], 1).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn ties_are_lexicographic() {
        // every adjacent pair of "xy" and "ab" occurs exactly twice
        let m = bpe_train(&lines(&["xy ab xy ab"]), &[], 1).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn training_is_deterministic() {
        let src = lines(&["the cat sat on the mat", "a cat and a hat"]);
        let tgt = lines(&["die Katze sass auf der Matte", "eine Katze und ein Hut"]);
        let a = bpe_train(&src, &tgt, 30).unwrap();
        let b = bpe_train(&src, &tgt, 30).unwrap();
        assert_eq!(a, b);
        assert!(!a.merges().is_empty());
    }

    #[test]
    fn broadcast_factors() {
        let corpus = lines(&["Stellvertreter Stellvertretung Vertreter vertreten"]);
        let m = bpe_train(&corpus, &[], 12).unwrap();
        let s = FactoredSentence::new(
            split_tokens("All Stellvertreter"),
            vec![Factor::Source, Factor::TargetTerm],
        )
        .unwrap();
        let out = bpe_apply(&s, &m);
        let pieces = m.segment("Stellvertreter");
        assert!(pieces.len() > 1);
        let n2 = out.factors().iter().filter(|&&f| f == Factor::TargetTerm).count();
        assert_eq!(n2, pieces.len());
        assert_eq!(&out.subwords()[out.len() - n2..], &pieces[..]);
        let plain = bpe_apply(&FactoredSentence::plain(split_tokens("Stellvertreter All")), &m);
        assert!(plain.factors().iter().all(|&f| f == Factor::Source));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(bpe_decode(&["Stell@@", "vertreter"]), vec!["Stellvertreter"]);
        assert!(bpe_decode::<&str>(&[]).is_empty());
        assert_eq!(bpe_decode(&["a@@", "b", "c", "d@@"]), vec!["ab", "c", "d"]);
    }

    #[test]
    fn unknown_characters_fall_back() {
        let m = bpe_train(&lines(&["aa aa aa"]), &[], 5).unwrap();
        assert_eq!(m.segment("zaa"), vec!["z@@", "aa"]);
    }

    #[test]
    fn file_round_trip() {
        let src = lines(&["lower lowest newer newest wider"]);
        let m = bpe_train(&src, &[], 20).unwrap();
        let back = BpeModel::parse(&m.to_file_string(), Path::new("m")).unwrap();
        assert_eq!(back.merges(), m.merges());
        for w in ["lowest", "newer", "unseen"] {
            assert_eq!(back.segment(w), m.segment(w));
        }
        assert!(BpeModel::parse("nope\n", Path::new("m")).is_err());
        assert!(BpeModel::parse("termnmt-bpe v1 2\na b\n", Path::new("m")).is_err());
    }

    #[test]
    fn vocab_is_reproduced_and_bounded() {
        let src = lines(&["lower lowest newer newest wider widest low new"]);
        let m = bpe_train(&src, &[], 15).unwrap();
        let mut seen = BTreeSet::new();
        for w in src.iter().flatten() {
            let mut syms: Vec<String> = m.segment(w);
            let last = syms.len() - 1;
            for (i, s) in syms.iter_mut().enumerate() {
                if let Some(stem) = s.strip_suffix(CONTINUATION) {
                    *s = stem.to_owned();
                } else if i == last {
                    if m.vocab().contains(&format!("{s}{END_OF_WORD}")) {
                        s.push_str(END_OF_WORD);
                    } else {
                        seen.insert(END_OF_WORD.to_owned());
                    }
                }
            }
            seen.extend(syms);
        }
        assert_eq!(&seen, m.vocab());
        let alphabet: BTreeSet<char> = src.iter().flatten().flat_map(|w| w.chars()).collect();
        assert!(m.vocab().len() <= m.merges().len() + alphabet.len() + 1);
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
        proptest::collection::vec(proptest::collection::vec("[a-f]{1,8}", 1..8), 1..20)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decode_inverts_apply(corpus in arb_corpus(), merges in 0usize..60) {
            let m = bpe_train(&corpus, &[], merges).unwrap();
            for s in &corpus {
                let fs = FactoredSentence::plain(s.clone());
                let sub = bpe_apply(&fs, &m);
                prop_assert_eq!(&bpe_decode(sub.subwords()), s);
            }
        }
    }

    #[test]
    fn decode_inverts_apply_on_1k_random_sentences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let word = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
            let n = rng.gen_range(1..9);
            (0..n).map(|_| (b'a' + rng.gen_range(0..7u8)) as char).collect()
        };
        let train: Vec<Vec<String>> = (0..200)
            .map(|_| (0..rng.gen_range(1..8)).map(|_| word(&mut rng)).collect())
            .collect();
        let m = bpe_train(&train, &[], 150).unwrap();
        for _ in 0..1000 {
            let s: Vec<String> = (0..rng.gen_range(1..10)).map(|_| word(&mut rng)).collect();
            let factors = (0..s.len())
                .map(|i| Factor::try_from((i % 3) as u32).unwrap())
                .collect();
            let fs = FactoredSentence::new(s.clone(), factors).unwrap();
            let sub = bpe_apply(&fs, &m);
            assert_eq!(bpe_decode(sub.subwords()), s);
            let words_with_two = fs.factors().iter().filter(|&&f| f == Factor::TargetTerm).count();
            let subs_with_two = sub.factors().iter().filter(|&&f| f == Factor::TargetTerm).count();
            assert!(subs_with_two >= words_with_two);
        }
    }
}
