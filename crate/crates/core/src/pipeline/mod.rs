//! End-to-end experiment runs: term-base preparation, annotation, subwords,
//! training, decoding and evaluation, with a manifest of every input and output.

mod translate;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotate::{
    build_training_corpus, extract_test_set, AnnotationMode, Factor, FactoredCorpus, FactoredSentence, TargetMatch,
    TestSet,
};
use crate::decode::measure_latency;
use crate::error::{Error, Result};
use crate::eval::{assemble_report, render_table, reports_to_json, EvalReport, ReportOptions, SystemRun};
use crate::model::{
    load_checkpoint, save_checkpoint, train, EpochRecord, Example, ModelConfig, TrainConfig, Transformer,
};
use crate::subword::{bpe_train, BpeModel};
use crate::termbase::{filter_termbase, ingest_termbase, split_termbase, FrequencyList, TermBase, DEFAULT_MIN_CHARS};
use crate::text::tokenize;
use crate::util::{mix_seed, sha256_hex};
use crate::vocab::Vocab;

pub use translate::{default_max_len, make_example, Translator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemMode {
    Baseline,
    Append,
    Replace,
    Constrained,
}

impl SystemMode {
    pub const ALL: [SystemMode; 4] = [
        SystemMode::Baseline,
        SystemMode::Append,
        SystemMode::Replace,
        SystemMode::Constrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemMode::Baseline => "baseline",
            SystemMode::Append => "append",
            SystemMode::Replace => "replace",
            SystemMode::Constrained => "constrained",
        }
    }

    /// Annotation applied to training and test sources; `None` trains on plain data.
    pub fn annotation(self) -> Option<AnnotationMode> {
        match self {
            SystemMode::Append => Some(AnnotationMode::Append),
            SystemMode::Replace => Some(AnnotationMode::Replace),
            SystemMode::Baseline | SystemMode::Constrained => None,
        }
    }
}

impl std::str::FromStr for SystemMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown mode {s:?}; expected baseline, append, replace or constrained"
            ))
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub dev_src: PathBuf,
    pub dev_tgt: PathBuf,
    pub test_src: PathBuf,
    pub test_tgt: PathBuf,
    /// Full term base, filtered and split into train/test terms by the run.
    pub termbase: Option<PathBuf>,
    /// Pre-split term bases; used together instead of `termbase`.
    pub train_termbase: Option<PathBuf>,
    pub test_termbase: Option<PathBuf>,
    /// Corpus for the frequent-word filter; defaults to `train_src`.
    pub frequency_corpus: Option<PathBuf>,
}

impl DataPaths {
    /// Paths of a task written by [`crate::synthdata::SynthTask::write`].
    pub fn synthetic(dir: &Path) -> Self {
        use crate::synthdata::files;
        DataPaths {
            train_src: dir.join(files::TRAIN_SRC),
            train_tgt: dir.join(files::TRAIN_TGT),
            dev_src: dir.join(files::DEV_SRC),
            dev_tgt: dir.join(files::DEV_TGT),
            test_src: dir.join(files::TEST_SRC),
            test_tgt: dir.join(files::TEST_TGT),
            termbase: None,
            train_termbase: Some(dir.join(files::TRAIN_TERMS)),
            test_termbase: Some(dir.join(files::TEST_TERMS)),
            frequency_corpus: None,
        }
    }

    fn all(&self) -> Vec<(&'static str, &Path)> {
        let mut out: Vec<(&'static str, &Path)> = vec![
            ("train_src", &self.train_src),
            ("train_tgt", &self.train_tgt),
            ("dev_src", &self.dev_src),
            ("dev_tgt", &self.dev_tgt),
            ("test_src", &self.test_src),
            ("test_tgt", &self.test_tgt),
        ];
        for (k, p) in [
            ("termbase", &self.termbase),
            ("train_termbase", &self.train_termbase),
            ("test_termbase", &self.test_termbase),
            ("frequency_corpus", &self.frequency_corpus),
        ] {
            if let Some(p) = p {
                out.push((k, p));
            }
        }
        out
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.train_src,
            &mut self.train_tgt,
            &mut self.dev_src,
            &mut self.dev_tgt,
            &mut self.test_src,
            &mut self.test_tgt,
        ] {
            fix(p);
        }
        for p in [
            &mut self.termbase,
            &mut self.train_termbase,
            &mut self.test_termbase,
            &mut self.frequency_corpus,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: SystemMode,
    pub data: DataPaths,
    pub work_dir: PathBuf,
    /// Shared BPE/model cache; defaults to `<work_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// `vocab_size` and `seed` are filled in by the run.
    pub model: ModelConfig,
    /// `seed` is filled in by the run.
    pub train: TrainConfig,
    pub num_merges: usize,
    pub beam_size: usize,
    /// Additional beam sizes decoded in constrained mode.
    pub constrained_extra_beams: Vec<usize>,
    pub augment_fraction: f64,
    /// Reference-side term matching for test-set extraction and term use.
    pub regime: TargetMatch,
    /// Most frequent corpus words removed as single-word terms; 0 disables the filter.
    pub freq_top_n: usize,
    pub min_term_chars: usize,
    pub test_term_fraction: f64,
    /// Annotate the dev set like the training data.
    pub annotate_dev: bool,
    pub measure_latency: bool,
    pub latency_repeats: usize,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: SystemMode::Baseline,
            data: DataPaths::default(),
            work_dir: PathBuf::from("work"),
            cache_dir: None,
            model: ModelConfig::desk(0),
            train: TrainConfig::default(),
            num_merges: 1000,
            beam_size: 5,
            constrained_extra_beams: vec![20],
            augment_fraction: 0.1,
            regime: TargetMatch::Exact,
            freq_top_n: 500,
            min_term_chars: DEFAULT_MIN_CHARS,
            test_term_fraction: 0.5,
            annotate_dev: true,
            measure_latency: false,
            latency_repeats: 1,
            bootstrap_resamples: 1000,
            seed: 1,
        }
    }
}

/// Seeds derived from the master seed, one per random stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub split: u64,
    pub augment: u64,
    pub model_init: u64,
    pub training: u64,
    pub bootstrap: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        Seeds {
            master,
            split: mix_seed(master, 1),
            augment: mix_seed(master, 2),
            model_init: mix_seed(master, 3),
            training: mix_seed(master, 4),
            bootstrap: mix_seed(master, 5),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if cfg.work_dir.is_relative() {
            cfg.work_dir = base.join(&cfg.work_dir);
        }
        if let Some(c) = cfg.cache_dir.as_mut() {
            if c.is_relative() {
                *c = base.join(&*c);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.constrained_extra_beams.contains(&0) {
            return Err(Error::invalid("beam sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(Error::invalid("augment_fraction must be in [0, 1]"));
        }
        if self.num_merges == 0 {
            return Err(Error::invalid("num_merges must be positive"));
        }
        let d = &self.data;
        match (&d.termbase, &d.train_termbase, &d.test_termbase) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            _ => {
                return Err(Error::invalid(
                    "give either `termbase` or both `train_termbase` and `test_termbase`",
                ))
            }
        }
        for (name, p) in d.all() {
            if !p.is_file() {
                return Err(Error::invalid(format!(
                    "{name}: {} is not a readable file",
                    p.display()
                )));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.work_dir.join("cache"))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

/// Held while a run owns its work directory.
pub struct WorkDirLock {
    path: PathBuf,
}

impl WorkDirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkDirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub train_terms: usize,
    pub test_terms: usize,
    pub training_pairs: usize,
    pub annotated_pairs: usize,
    pub skipped_long_pairs: usize,
    pub vocab_size: usize,
    pub test_sentences: usize,
    pub test_term_occurrences: usize,
    pub model_key: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_dev_loss: f64,
}

/// Everything needed to reproduce a run: the full config, derived seeds and
/// checksums of the inputs and every file the run wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: SystemMode,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub stats: RunStats,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<EvalReport>,
    pub runs: Vec<SystemRun>,
    pub references: Vec<Vec<String>>,
    pub gold_terms: Vec<Vec<Vec<String>>>,
    pub manifest: Manifest,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{}", l.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Corpora {
    train_src: Vec<Vec<String>>,
    train_tgt: Vec<Vec<String>>,
    dev_src: Vec<Vec<String>>,
    dev_tgt: Vec<Vec<String>>,
    test_src: Vec<Vec<String>>,
    test_tgt: Vec<Vec<String>>,
}

fn read_corpora(d: &DataPaths) -> Result<Corpora> {
    Ok(Corpora {
        train_src: read_tokenized(&d.train_src)?,
        train_tgt: read_tokenized(&d.train_tgt)?,
        dev_src: read_tokenized(&d.dev_src)?,
        dev_tgt: read_tokenized(&d.dev_tgt)?,
        test_src: read_tokenized(&d.test_src)?,
        test_tgt: read_tokenized(&d.test_tgt)?,
    })
}

fn prepare_termbases(cfg: &ExperimentConfig, seeds: &Seeds) -> Result<(TermBase, TermBase)> {
    let d = &cfg.data;
    if let (Some(train), Some(test)) = (&d.train_termbase, &d.test_termbase) {
        let train = stage("filter", ingest_termbase(train, "train"))?;
        let test = stage("filter", ingest_termbase(test, "test"))?;
        return Ok((train, test));
    }
    let path = d.termbase.as_ref().expect("validated");
    let full = stage("filter", ingest_termbase(path, "termbase"))?;
    let filtered = stage(
        "filter",
        (|| {
            let freq = if cfg.freq_top_n == 0 {
                FrequencyList::from_counts(Default::default(), 0)
            } else {
                let corpus = d.frequency_corpus.as_ref().unwrap_or(&d.train_src);
                let text = fs::read_to_string(corpus).map_err(|e| Error::io(corpus, e))?;
                let lines: Vec<String> = text.lines().map(|l| tokenize(l).join(" ")).collect();
                FrequencyList::from_lines(lines.iter().map(String::as_str), cfg.freq_top_n)?
            };
            filter_termbase(&full, &freq, cfg.min_term_chars)
        })(),
    )?;
    stage("split", split_termbase(&filtered, cfg.test_term_fraction, seeds.split))
}

/// Joint BPE over the plain training corpus, plus the vocabulary covering every
/// character seen in the corpora and term bases.
fn prepare_subwords(corpora: &Corpora, terms: [&TermBase; 2], num_merges: usize) -> Result<(BpeModel, Vocab)> {
    let bpe = bpe_train(&corpora.train_src, &corpora.train_tgt, num_merges)?;
    let mut alphabet: BTreeSet<char> = BTreeSet::new();
    for side in [
        &corpora.train_src,
        &corpora.train_tgt,
        &corpora.dev_src,
        &corpora.dev_tgt,
    ] {
        alphabet.extend(side.iter().flatten().flat_map(|w| w.chars()));
    }
    for tb in terms {
        for e in tb.entries() {
            alphabet.extend(e.source.iter().chain(&e.target).flat_map(|w| w.chars()));
        }
    }
    let vocab = Vocab::from_bpe(&bpe, alphabet);
    Ok((bpe, vocab))
}

fn corpus_examples(corpus: &FactoredCorpus, bpe: &BpeModel, vocab: &Vocab, max_len: usize) -> (Vec<Example>, usize) {
    let mut skipped = 0;
    let examples = corpus
        .pairs
        .iter()
        .map(|p| make_example(&p.source, &p.target, bpe, vocab))
        .filter(|ex| {
            let ok = !ex.src.is_empty() && ex.src.len() <= max_len && ex.tgt.len() <= max_len;
            skipped += usize::from(!ok);
            ok
        })
        .collect();
    (examples, skipped)
}

fn examples_key(model: &ModelConfig, train_cfg: &TrainConfig, sets: [&[Example]; 2]) -> Result<String> {
    let mut bytes = serde_json::to_vec(&(model, train_cfg))?;
    for set in sets {
        bytes.extend((set.len() as u64).to_le_bytes());
        for ex in set {
            for seq in [&ex.src, &ex.tgt] {
                bytes.extend((seq.len() as u32).to_le_bytes());
                bytes.extend(seq.iter().flat_map(|t| t.to_le_bytes()));
            }
            bytes.extend(ex.factors.iter().map(|&f| f.index() as u8));
        }
    }
    Ok(sha256_hex(&bytes))
}

/// Every annotated pair must be a copy of an original pair: same target, and its
/// plain source tokens (with injected target tokens dropped in append mode) come
/// from the original source in order.
fn check_no_new_data(corpus: &FactoredCorpus, src: &[Vec<String>], tgt: &[Vec<String>]) -> Result<()> {
    for p in corpus.pairs.iter().filter(|p| p.annotated) {
        let fail = || {
            Error::invalid(format!(
                "annotated pair from line {} is not a copy of an original pair",
                p.origin + 1
            ))
        };
        let (Some(orig_src), Some(orig_tgt)) = (src.get(p.origin), tgt.get(p.origin)) else {
            return Err(fail());
        };
        if &p.target != orig_tgt {
            return Err(fail());
        }
        let mut rest = orig_src.iter();
        let kept = p
            .source
            .iter()
            .filter(|(_, f)| *f != Factor::TargetTerm)
            .all(|(tok, _)| rest.any(|o| o == tok));
        if !kept {
            return Err(fail());
        }
    }
    Ok(())
}

struct TrainedModel {
    model: Transformer<f32>,
    key: String,
    history: Vec<EpochRecord>,
}

fn train_or_load(
    cfg: &ExperimentConfig,
    model_cfg: ModelConfig,
    train_set: &[Example],
    dev_set: &[Example],
    progress: &mut dyn FnMut(&str),
) -> Result<TrainedModel> {
    let key = examples_key(&model_cfg, &cfg.train, [train_set, dev_set])?;
    let dir = cfg.cache_dir().join("models");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = dir.join(format!("{key}.ckpt"));
    let hist = dir.join(format!("{key}.history.json"));
    if ckpt.is_file() && hist.is_file() {
        progress(&format!("reusing cached model {}", &key[..12]));
        let model = load_checkpoint::<f32>(&ckpt)?;
        let text = fs::read_to_string(&hist).map_err(|e| Error::io(&hist, e))?;
        return Ok(TrainedModel {
            model,
            key,
            history: serde_json::from_str(&text)?,
        });
    }
    let mut model = Transformer::<f32>::new(model_cfg)?;
    let state = train(&mut model, train_set, dev_set, &cfg.train, |r| {
        progress(&format!(
            "epoch {:>3}  train {:.4}  dev {:.4}{}",
            r.epoch,
            r.train_loss,
            r.dev_loss,
            if r.improved { "  *" } else { "" }
        ))
    })?;
    let tmp = dir.join(format!("{key}.ckpt.tmp"));
    save_checkpoint(&model, &tmp)?;
    fs::rename(&tmp, &ckpt).map_err(|e| Error::io(&ckpt, e))?;
    write_json(&hist, &state.history)?;
    Ok(TrainedModel {
        model,
        key,
        history: state.history,
    })
}

/// Decodes every test input, recording latency when asked. Outputs come from the
/// first repeat of each input.
fn decode_all<I>(
    inputs: &[I],
    cfg: &ExperimentConfig,
    mut decode: impl FnMut(&I) -> Result<Vec<String>>,
) -> Result<(Vec<Vec<String>>, Option<crate::decode::LatencyReport>)> {
    if !cfg.measure_latency {
        let outputs = inputs.iter().map(&mut decode).collect::<Result<Vec<_>>>()?;
        return Ok((outputs, None));
    }
    let mut outputs: Vec<Vec<String>> = Vec::with_capacity(inputs.len());
    let mut seen = 0usize;
    let indexed: Vec<(usize, &I)> = inputs.iter().enumerate().collect();
    let report = measure_latency(
        |&(i, input): &(usize, &I)| {
            let out = decode(input)?;
            if i == seen {
                outputs.push(out);
                seen += 1;
            }
            Ok(())
        },
        &indexed,
        50.0,
        cfg.latency_repeats,
    )?;
    Ok((outputs, Some(report)))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with(cfg, &mut |_| {})
}

/// Runs one system mode end to end. `progress` receives human-readable status lines.
pub fn run_experiment_with(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<ExperimentOutcome> {
    stage("config", cfg.validate())?;
    let _lock = WorkDirLock::acquire(&cfg.work_dir)?;
    let seeds = cfg.seeds();
    let work = &cfg.work_dir;
    let mut artifacts: Vec<PathBuf> = Vec::new();

    let corpora = stage("read", read_corpora(&cfg.data))?;
    let (train_tb, test_tb) = prepare_termbases(cfg, &seeds)?;
    for (name, tb) in [("terms.train.tsv", &train_tb), ("terms.test.tsv", &test_tb)] {
        let p = work.join(name);
        stage("split", tb.save(&p))?;
        artifacts.push(p);
    }
    progress(&format!(
        "{}: {} train terms, {} test terms",
        cfg.mode.name(),
        train_tb.len(),
        test_tb.len()
    ));

    let (bpe, vocab) = stage("bpe", prepare_subwords(&corpora, [&train_tb, &test_tb], cfg.num_merges))?;
    for (name, res) in [
        ("bpe.codes", bpe.save(&work.join("bpe.codes"))),
        ("vocab.json", vocab.save(&work.join("vocab.json"))),
    ] {
        stage("bpe", res)?;
        artifacts.push(work.join(name));
    }

    let train_mode = cfg.mode.annotation();
    let (train_corpus, dev_corpus) = stage(
        "annotate",
        (|| {
            let build = |src: &[Vec<String>], tgt: &[Vec<String>], augment: bool| match train_mode {
                Some(mode) if augment => {
                    build_training_corpus(src, tgt, &train_tb, mode, cfg.augment_fraction, seeds.augment)
                }
                _ => FactoredCorpus::plain(src, tgt),
            };
            let train = build(&corpora.train_src, &corpora.train_tgt, true)?;
            check_no_new_data(&train, &corpora.train_src, &corpora.train_tgt)?;
            let dev = build(&corpora.dev_src, &corpora.dev_tgt, cfg.annotate_dev)?;
            let prefix = work.join(format!("train.{}", cfg.mode.name()));
            artifacts.extend(train.write(&prefix)?);
            Ok((train, dev))
        })(),
    )?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    model_cfg.seed = seeds.model_init;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seeds.training;
    let (train_set, skipped) = corpus_examples(&train_corpus, &bpe, &vocab, model_cfg.max_seq_len);
    let (dev_set, _) = corpus_examples(&dev_corpus, &bpe, &vocab, model_cfg.max_seq_len);
    let run_cfg = ExperimentConfig {
        train: train_cfg,
        ..cfg.clone()
    };
    progress(&format!(
        "{}: training on {} pairs ({} annotated), vocab {}",
        cfg.mode.name(),
        train_set.len(),
        train_corpus.annotated_count(),
        vocab.len()
    ));
    let trained = stage(
        "train",
        train_or_load(&run_cfg, model_cfg, &train_set, &dev_set, progress),
    )?;

    let test = stage(
        "decode",
        extract_test_set(&corpora.test_src, &corpora.test_tgt, &test_tb, cfg.regime),
    )?;
    if test.is_empty() {
        return Err(Error::Empty("test set with term matches".into()).in_stage("decode"));
    }
    let runs = stage(
        "decode",
        decode_mode(cfg, &trained.model, &bpe, &vocab, &test, progress),
    )?;
    let out_dir = work.join("out");
    stage(
        "decode",
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e)),
    )?;
    for run in &runs {
        let p = out_dir.join(format!("{}.txt", run.name));
        stage("decode", write_lines(&p, &run.outputs))?;
        artifacts.push(p);
    }

    let references = test.references();
    let gold_terms = test.gold_terms();
    let opts = ReportOptions {
        approximate: cfg.regime.is_approximate(),
        resamples: cfg.bootstrap_resamples,
        seed: seeds.bootstrap,
    };
    let reports = stage(
        "evaluate",
        assemble_report(&runs, &references, &gold_terms, None, &opts),
    )?;
    let report_path = work.join("report.json");
    stage(
        "evaluate",
        fs::write(&report_path, reports_to_json(&reports)?).map_err(|e| Error::io(&report_path, e)),
    )?;
    artifacts.push(report_path);

    let best = trained.history.iter().find(|r| r.epoch == best_epoch(&trained.history));
    let stats = RunStats {
        train_terms: train_tb.len(),
        test_terms: test_tb.len(),
        training_pairs: train_set.len(),
        annotated_pairs: train_corpus.annotated_count(),
        skipped_long_pairs: skipped,
        vocab_size: vocab.len(),
        test_sentences: test.len(),
        test_term_occurrences: test.term_count(),
        model_key: trained.key.clone(),
        best_epoch: best.map_or(0, |r| r.epoch),
        epochs_run: trained.history.len(),
        best_dev_loss: best.map_or(f64::NAN, |r| r.dev_loss),
    };
    let manifest = stage("manifest", write_manifest(cfg, &seeds, &artifacts, stats))?;
    Ok(ExperimentOutcome {
        reports,
        runs,
        references,
        gold_terms,
        manifest,
    })
}

fn best_epoch(history: &[EpochRecord]) -> usize {
    history
        .iter()
        .min_by(|a, b| a.dev_loss.total_cmp(&b.dev_loss).then(a.epoch.cmp(&b.epoch)))
        .map_or(0, |r| r.epoch)
}

fn decode_mode(
    cfg: &ExperimentConfig,
    model: &Transformer<f32>,
    bpe: &BpeModel,
    vocab: &Vocab,
    test: &TestSet,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<SystemRun>> {
    let translator = |beam_size| Translator::new(model, bpe, vocab, beam_size);
    let mut runs = Vec::new();
    match cfg.mode {
        SystemMode::Baseline | SystemMode::Append | SystemMode::Replace => {
            let inputs: Vec<FactoredSentence> = match cfg.mode.annotation() {
                Some(mode) => test.annotated(mode)?,
                None => test.plain_sources(),
            };
            let t = translator(cfg.beam_size);
            let (outputs, latency) = decode_all(&inputs, cfg, |s| t.translate(s))?;
            runs.push(SystemRun {
                name: cfg.mode.name().into(),
                outputs,
                latency,
            });
        }
        SystemMode::Constrained => {
            let inputs: Vec<(FactoredSentence, Vec<Vec<String>>)> =
                test.plain_sources().into_iter().zip(test.gold_terms()).collect();
            let beams = std::iter::once(cfg.beam_size).chain(cfg.constrained_extra_beams.iter().copied());
            for (i, beam) in beams.enumerate() {
                let t = translator(beam);
                let (outputs, latency) = decode_all(&inputs, cfg, |(s, c)| t.translate_constrained(s, c))?;
                let name = if i == 0 {
                    cfg.mode.name().to_string()
                } else {
                    format!("{}-beam{beam}", cfg.mode.name())
                };
                progress(&format!("decoded {name}"));
                runs.push(SystemRun { name, outputs, latency });
            }
        }
    }
    Ok(runs)
}

fn write_manifest(cfg: &ExperimentConfig, seeds: &Seeds, artifacts: &[PathBuf], stats: RunStats) -> Result<Manifest> {
    let mut inputs = BTreeMap::new();
    for (name, p) in cfg.data.all() {
        inputs.insert(name.to_string(), file_sha(p)?);
    }
    let mut files = BTreeMap::new();
    for p in artifacts {
        let rel = p.strip_prefix(&cfg.work_dir).unwrap_or(p);
        files.insert(rel.display().to_string(), file_sha(p)?);
    }
    let manifest = Manifest {
        mode: cfg.mode,
        config_sha256: cfg.hash()?,
        config: cfg.clone(),
        seeds: *seeds,
        inputs,
        artifacts: files,
        stats,
    };
    write_json(&cfg.work_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub reports: Vec<EvalReport>,
    pub table: String,
    pub experiments: Vec<ExperimentOutcome>,
}

/// Runs several modes on one config, each in `<work_dir>/<mode>` with a shared
/// model cache, and scores all of them against the baseline when present.
pub fn run_suite(cfg: &ExperimentConfig, modes: &[SystemMode], progress: &mut dyn FnMut(&str)) -> Result<SuiteOutcome> {
    if modes.is_empty() {
        return Err(Error::invalid("no modes selected"));
    }
    let _lock = WorkDirLock::acquire(&cfg.work_dir)?;
    let mut experiments = Vec::new();
    for &mode in modes {
        let sub = ExperimentConfig {
            mode,
            work_dir: cfg.work_dir.join(mode.name()),
            cache_dir: Some(cfg.cache_dir()),
            ..cfg.clone()
        };
        experiments.push(run_experiment_with(&sub, progress)?);
    }
    let first = &experiments[0];
    let runs: Vec<SystemRun> = experiments.iter().flat_map(|e| e.runs.iter().cloned()).collect();
    let baseline = modes
        .contains(&SystemMode::Baseline)
        .then_some(SystemMode::Baseline.name());
    let opts = ReportOptions {
        approximate: cfg.regime.is_approximate(),
        resamples: cfg.bootstrap_resamples,
        seed: cfg.seeds().bootstrap,
    };
    let reports = stage(
        "evaluate",
        assemble_report(&runs, &first.references, &first.gold_terms, baseline, &opts),
    )?;
    let table = render_table(&reports);
    let json_path = cfg.work_dir.join("report.json");
    stage(
        "evaluate",
        fs::write(&json_path, reports_to_json(&reports)?).map_err(|e| Error::io(&json_path, e)),
    )?;
    let txt_path = cfg.work_dir.join("report.txt");
    stage(
        "evaluate",
        fs::write(&txt_path, &table).map_err(|e| Error::io(&txt_path, e)),
    )?;
    Ok(SuiteOutcome {
        reports,
        table,
        experiments,
    })
}
