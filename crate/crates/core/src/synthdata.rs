//! Seeded synthetic translation task with held-out terminology for zero-shot tests.
//!
//! Words are built from consonant-vowel syllables; source and target use disjoint
//! consonant sets. A reference is the word-by-word dictionary translation with
//! adjacent word pairs swapped. A marker word makes the next word's translation
//! take an inflection suffix.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::phrase_occurs;
use crate::error::{Error, Result};
use crate::termbase::{TermBase, TermEntry};
use crate::text::{fold_phrase, split_tokens};
use crate::util::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTaskSpec {
    pub source_consonants: String,
    pub target_consonants: String,
    pub vowels: String,
    /// Ordinary dictionary words (two syllables each).
    pub common_words: usize,
    /// Term entries used in training sentences (three-syllable targets).
    pub train_terms: usize,
    /// Syllables per term source word; common words have two.
    pub term_source_syllables: usize,
    /// Term entries reserved for the test set.
    pub held_out_terms: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Probability that a training or dev sentence contains training terms.
    pub term_rate: f64,
    /// A sentence with terms gets between one and this many of them.
    pub max_train_terms_per_sentence: usize,
    /// Held-out terms placed in each test sentence.
    pub terms_per_test_sentence: usize,
    /// Probability of a marker before each non-term word.
    pub marker_rate: f64,
    /// Suffix the marker attaches to the next word's translation.
    pub inflection: String,
    /// Put a marker before every test term, so references carry inflected terms.
    pub inflect_test_terms: bool,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            source_consonants: "ptkbdg".into(),
            target_consonants: "lmnrsv".into(),
            vowels: "aeiou".into(),
            common_words: 40,
            train_terms: 5000,
            term_source_syllables: 3,
            held_out_terms: 40,
            min_words: 3,
            max_words: 7,
            train_size: 3000,
            dev_size: 150,
            test_size: 200,
            term_rate: 0.5,
            max_train_terms_per_sentence: 2,
            terms_per_test_sentence: 2,
            marker_rate: 0.05,
            inflection: "en".into(),
            inflect_test_terms: false,
            seed: 1,
        }
    }
}

/// Sentence-aligned lines of space-separated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source_tokens(&self) -> Vec<Vec<String>> {
        self.source.iter().map(|l| split_tokens(l)).collect()
    }

    pub fn target_tokens(&self) -> Vec<Vec<String>> {
        self.target.iter().map(|l| split_tokens(l)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    pub train_terms: TermBase,
    pub test_terms: TermBase,
    /// Every source word with its translation, markers and terms included.
    pub dictionary: Vec<(String, String)>,
}

/// File names written by [`SynthTask::write`].
pub mod files {
    pub const TRAIN_SRC: &str = "train.src";
    pub const TRAIN_TGT: &str = "train.tgt";
    pub const DEV_SRC: &str = "dev.src";
    pub const DEV_TGT: &str = "dev.tgt";
    pub const TEST_SRC: &str = "test.src";
    pub const TEST_TGT: &str = "test.tgt";
    pub const TRAIN_TERMS: &str = "terms.train.tsv";
    pub const TEST_TERMS: &str = "terms.test.tsv";
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl SynthTask {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, lines) in [
            (files::TRAIN_SRC, &self.train.source),
            (files::TRAIN_TGT, &self.train.target),
            (files::DEV_SRC, &self.dev.source),
            (files::DEV_TGT, &self.dev.target),
            (files::TEST_SRC, &self.test.source),
            (files::TEST_TGT, &self.test.target),
        ] {
            let path = dir.join(name);
            write_lines(&path, lines)?;
            written.push(path);
        }
        for (name, tb) in [
            (files::TRAIN_TERMS, &self.train_terms),
            (files::TEST_TERMS, &self.test_terms),
        ] {
            let path = dir.join(name);
            fs::write(&path, tb.to_tsv()).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Draws fresh words; no word is a prefix of another, so the stem-prefix match rule
/// cannot confuse two distinct words.
struct WordForge {
    syllables: Vec<String>,
    taken: HashSet<String>,
    /// Every proper prefix of a taken word.
    prefixes: HashSet<String>,
}

impl WordForge {
    fn new(consonants: &str, vowels: &str) -> Self {
        let syllables = consonants
            .chars()
            .flat_map(|c| vowels.chars().map(move |v| format!("{c}{v}")))
            .collect();
        WordForge {
            syllables,
            taken: HashSet::new(),
            prefixes: HashSet::new(),
        }
    }

    fn clashes(&self, word: &str) -> bool {
        self.taken.contains(word)
            || self.prefixes.contains(word)
            || word
                .char_indices()
                .skip(1)
                .any(|(i, _)| self.taken.contains(&word[..i]))
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng, syllables: usize, what: &str) -> Result<String> {
        for _ in 0..10_000 {
            let word: String = (0..syllables)
                .map(|_| self.syllables.choose(rng).expect("non-empty syllable set").as_str())
                .collect();
            if !self.clashes(&word) {
                for (i, _) in word.char_indices().skip(1) {
                    self.prefixes.insert(word[..i].to_owned());
                }
                self.taken.insert(word.clone());
                return Ok(word);
            }
        }
        Err(Error::invalid(format!(
            "alphabet too small to draw another {syllables}-syllable {what} word"
        )))
    }
}

fn validate(spec: &SynthTaskSpec) -> Result<()> {
    let src: HashSet<char> = spec.source_consonants.chars().collect();
    let tgt: HashSet<char> = spec.target_consonants.chars().collect();
    let vow: HashSet<char> = spec.vowels.chars().collect();
    if src.is_empty() || tgt.is_empty() || vow.is_empty() {
        return Err(Error::invalid("consonant and vowel sets must be non-empty"));
    }
    if !src.is_disjoint(&tgt) || !src.is_disjoint(&vow) || !tgt.is_disjoint(&vow) {
        return Err(Error::invalid(
            "source consonants, target consonants and vowels must be disjoint",
        ));
    }
    if spec.term_source_syllables == 0 {
        return Err(Error::invalid("term_source_syllables must be positive"));
    }
    if spec.common_words == 0 || spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(Error::invalid("need common_words > 0 and 0 < min_words <= max_words"));
    }
    if spec.train_size == 0 || spec.dev_size == 0 || spec.test_size == 0 {
        return Err(Error::invalid("corpus sizes must be positive"));
    }
    if spec.terms_per_test_sentence > spec.held_out_terms || spec.terms_per_test_sentence > spec.min_words {
        return Err(Error::invalid(format!(
            "cannot place {} distinct held-out terms per test sentence",
            spec.terms_per_test_sentence
        )));
    }
    if spec.term_rate > 0.0 && (spec.train_terms == 0 || spec.max_train_terms_per_sentence == 0) {
        return Err(Error::invalid("term_rate > 0 needs train_terms > 0"));
    }
    if !(0.0..=1.0).contains(&spec.term_rate) || !(0.0..=1.0).contains(&spec.marker_rate) {
        return Err(Error::invalid("term_rate and marker_rate must be probabilities"));
    }
    if spec.inflection.chars().any(char::is_whitespace) {
        return Err(Error::invalid("inflection suffix must be a single token fragment"));
    }
    Ok(())
}

struct Lexicon {
    marker: (String, String),
    common: Vec<(String, String)>,
    train_terms: Vec<(String, String)>,
    held_out: Vec<(String, String)>,
}

/// One source slot: a word index into a list, and whether a marker precedes it.
#[derive(Clone, Copy)]
enum Slot {
    Common(usize),
    Term(usize),
    HeldOut(usize),
}

fn render(lex: &Lexicon, slots: &[(Slot, bool)], suffix: &str) -> (String, String) {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for &(slot, marked) in slots {
        let (s, t) = match slot {
            Slot::Common(i) => &lex.common[i],
            Slot::Term(i) => &lex.train_terms[i],
            Slot::HeldOut(i) => &lex.held_out[i],
        };
        if marked {
            src.push(lex.marker.0.clone());
            tgt.push(lex.marker.1.clone());
        }
        src.push(s.clone());
        tgt.push(if marked { format!("{t}{suffix}") } else { t.clone() });
    }
    for pair in tgt.chunks_mut(2) {
        pair.reverse();
    }
    (src.join(" "), tgt.join(" "))
}

fn sentences(
    spec: &SynthTaskSpec,
    lex: &Lexicon,
    rng: &mut ChaCha8Rng,
    count: usize,
    held_out_per_sentence: usize,
) -> ParallelCorpus {
    let mut corpus = ParallelCorpus::default();
    for _ in 0..count {
        let len = rng.gen_range(spec.min_words..=spec.max_words);
        let mut slots: Vec<(Slot, bool)> = (0..len)
            .map(|_| {
                let w = Slot::Common(rng.gen_range(0..lex.common.len()));
                (w, rng.gen_bool(spec.marker_rate))
            })
            .collect();
        if held_out_per_sentence > 0 {
            let positions = rand::seq::index::sample(rng, len, held_out_per_sentence);
            let terms = rand::seq::index::sample(rng, lex.held_out.len(), held_out_per_sentence);
            for (p, t) in positions.iter().zip(terms.iter()) {
                slots[p] = (Slot::HeldOut(t), spec.inflect_test_terms);
            }
        } else if !lex.train_terms.is_empty() && rng.gen_bool(spec.term_rate) {
            let count = rng.gen_range(1..=spec.max_train_terms_per_sentence.min(len));
            for p in rand::seq::index::sample(rng, len, count) {
                let marked = slots[p].1;
                slots[p] = (Slot::Term(rng.gen_range(0..lex.train_terms.len())), marked);
            }
        }
        let (s, t) = render(lex, &slots, &spec.inflection);
        corpus.source.push(s);
        corpus.target.push(t);
    }
    corpus
}

fn termbase(name: &str, pairs: &[(String, String)]) -> Result<TermBase> {
    let entries = pairs
        .iter()
        .enumerate()
        .map(|(i, (s, t))| TermEntry::new(format!("{name}:{}", i + 1), s, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(TermBase::new(name, entries))
}

/// Generates train/dev/test corpora and the train/test term bases. Each split draws
/// from its own seeded stream, so toggling test-only options leaves training data
/// unchanged.
pub fn generate_task(spec: &SynthTaskSpec) -> Result<SynthTask> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0));
    let mut src_words = WordForge::new(&spec.source_consonants, &spec.vowels);
    let mut tgt_words = WordForge::new(&spec.target_consonants, &spec.vowels);
    let mut pair = |rng: &mut ChaCha8Rng, src_syl: usize, tgt_syl: usize, what: &str| -> Result<(String, String)> {
        Ok((src_words.draw(rng, src_syl, what)?, tgt_words.draw(rng, tgt_syl, what)?))
    };
    let marker = pair(&mut rng, 1, 1, "marker")?;
    let common = (0..spec.common_words)
        .map(|_| pair(&mut rng, 2, 2, "common"))
        .collect::<Result<Vec<_>>>()?;
    let train_terms = (0..spec.train_terms)
        .map(|_| pair(&mut rng, spec.term_source_syllables, 3, "term"))
        .collect::<Result<Vec<_>>>()?;
    let held_out = (0..spec.held_out_terms)
        .map(|_| pair(&mut rng, spec.term_source_syllables, 3, "held-out term"))
        .collect::<Result<Vec<_>>>()?;
    let lex = Lexicon {
        marker,
        common,
        train_terms,
        held_out,
    };

    let stream = |k: u64| ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, k));
    let train = sentences(spec, &lex, &mut stream(1), spec.train_size, 0);
    let dev = sentences(spec, &lex, &mut stream(2), spec.dev_size, 0);
    let test = sentences(spec, &lex, &mut stream(3), spec.test_size, spec.terms_per_test_sentence);

    let mut dictionary = vec![lex.marker.clone()];
    dictionary.extend(lex.common.iter().cloned());
    dictionary.extend(lex.train_terms.iter().cloned());
    dictionary.extend(lex.held_out.iter().cloned());
    Ok(SynthTask {
        train,
        dev,
        test,
        train_terms: termbase("synth-train", &lex.train_terms)?,
        test_terms: termbase("synth-test", &lex.held_out)?,
        dictionary,
    })
}

/// True iff no test term's target occurs in a training reference and no test term's
/// source appears in the training term base.
pub fn verify_zero_shot(train: &ParallelCorpus, train_terms: &TermBase, test_terms: &TermBase) -> bool {
    let train_sources: HashSet<String> = train_terms.entries().iter().map(|e| fold_phrase(&e.source)).collect();
    let refs = train.target_tokens();
    test_terms.entries().iter().all(|e| {
        !train_sources.contains(&fold_phrase(&e.source)) && !refs.iter().any(|r| phrase_occurs(&e.target, r, false))
    })
}
