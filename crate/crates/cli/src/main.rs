//! Command-line front end: one subcommand per pipeline operation.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use termnmt::annotate::{
    annotate_sentence, read_factored, with_ext, AnnotationMode, FactoredCorpus, FactoredSentence, TermMatcher,
};
use termnmt::eval::{assemble_report, render_table, reports_to_json, ReportOptions, SystemRun};
use termnmt::model::{load_checkpoint, save_checkpoint, train, Example, Transformer};
use termnmt::pipeline::{make_example, run_suite, ExperimentConfig, Seeds, SystemMode, Translator};
use termnmt::subword::{bpe_apply, bpe_train, BpeModel};
use termnmt::synthdata::{generate_task, verify_zero_shot, SynthTaskSpec};
use termnmt::termbase::{build_frequency_list, filter_termbase, ingest_termbase, split_termbase};
use termnmt::text::{split_tokens, tokenize};
use termnmt::vocab::Vocab;
use termnmt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "termnmt",
    version,
    about = "Terminology-aware neural machine translation toolkit"
)]
struct Cli {
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration (experiment config; task spec for `synth`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and normalize a term base TSV.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "termbase")]
        name: String,
    },
    /// Drop entries whose source is a frequent corpus word or too short.
    Filter {
        #[arg(long)]
        termbase: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long)]
        min_chars: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Split a term base into train and test parts with disjoint sources.
    Split {
        #[arg(long)]
        termbase: PathBuf,
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
    /// Annotate tokenized sentences with term-base matches.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        termbase: PathBuf,
        #[arg(long, value_parser = parse_annotation_mode)]
        mode: AnnotationMode,
        /// Allow an inflected last token when matching sources.
        #[arg(long)]
        approximate: bool,
        /// Write `<prefix>.tok` and `<prefix>.factors` instead of printing `token/factor` lines.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Learn joint BPE merges over source and target text.
    BpeTrain {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        merges: Option<usize>,
        #[arg(long)]
        output: PathBuf,
        /// Also write the model vocabulary.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Segment tokenized text, carrying word factors onto pieces.
    BpeApply {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        factors_out: Option<PathBuf>,
    },
    /// Generate a synthetic task with held-out terms.
    Synth {
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model on an annotated corpus (`<prefix>.tok/.factors/.tgt`).
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[command(flatten)]
        tables: Tables,
        #[arg(long)]
        output: PathBuf,
    },
    /// Beam-search translation.
    Translate {
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Translation with target phrase constraints (dynamic beam allocation).
    /// Input lines are `sentence<TAB>term<TAB>term...`.
    ConstrainedTranslate {
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Score outputs: BLEU, term use and a paired bootstrap against a baseline.
    Evaluate {
        /// System outputs; repeatable.
        #[arg(long, required = true)]
        hyp: Vec<PathBuf>,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// One line per sentence; tab-separated gold target terms.
        #[arg(long)]
        terms: PathBuf,
        #[arg(long)]
        approximate: bool,
        /// Index into `--hyp` of the baseline system.
        #[arg(long)]
        baseline: Option<usize>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the full pipeline for one or more system modes.
    Experiment {
        /// Comma-separated modes; defaults to the config's mode.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<SystemMode>,
    },
}

#[derive(Args)]
struct Tables {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    tables: Tables,
    /// Tokenized sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    factors: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Defaults to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_annotation_mode(s: &str) -> std::result::Result<AnnotationMode, String> {
    match s {
        "append" => Ok(AnnotationMode::Append),
        "replace" => Ok(AnnotationMode::Replace),
        _ => Err(format!("expected append or replace, got {s:?}")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Filter { .. } => "filter",
            Command::Split { .. } => "split",
            Command::Annotate { .. } => "annotate",
            Command::BpeTrain { .. } => "bpe-train",
            Command::BpeApply { .. } => "bpe-apply",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Translate { .. } => "translate",
            Command::ConstrainedTranslate { .. } => "constrained-translate",
            Command::Evaluate { .. } => "evaluate",
            Command::Experiment { .. } => "experiment",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .map_err(io_err(path))?
        .lines()
        .map(str::to_owned)
        .collect())
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(io_err(Path::new("<stdout>"))),
    }
}

fn lines_text<I: IntoIterator<Item = String>>(lines: I) -> String {
    lines.into_iter().map(|l| l + "\n").collect()
}

struct Env {
    seed: Option<u64>,
    config: Option<PathBuf>,
    quiet: bool,
}

impl Env {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn progress(&self) -> impl FnMut(&str) + '_ {
        move |m: &str| {
            if !self.quiet {
                eprintln!("{m}");
            }
        }
    }
}

fn load_tables(t: &Tables) -> Result<(BpeModel, Vocab)> {
    Ok((BpeModel::load(&t.codes)?, Vocab::load(&t.vocab)?))
}

fn corpus_examples(prefix: &Path, bpe: &BpeModel, vocab: &Vocab, max_len: usize) -> Result<Vec<Example>> {
    let corpus = FactoredCorpus::read(prefix)?;
    Ok(corpus
        .pairs
        .iter()
        .map(|p| make_example(&p.source, &p.target, bpe, vocab))
        .filter(|ex| !ex.src.is_empty() && ex.src.len() <= max_len && ex.tgt.len() <= max_len)
        .collect())
}

fn decode_inputs(d: &DecodeArgs) -> Result<Vec<FactoredSentence>> {
    read_factored(&d.input, d.factors.as_deref())
}

/// Splits `sentence<TAB>phrase...` lines; factors, if given, cover the sentence part.
/// Target phrases per sentence.
type Phrases = Vec<Vec<String>>;

fn constrained_inputs(d: &DecodeArgs) -> Result<(Vec<FactoredSentence>, Vec<Phrases>)> {
    let lines = read_lines(&d.input)?;
    let mut sentences = Vec::with_capacity(lines.len());
    let mut phrases = Vec::with_capacity(lines.len());
    for line in &lines {
        let mut fields = line.split('\t');
        sentences.push(fields.next().unwrap_or("").to_string());
        phrases.push(fields.map(split_tokens).filter(|p| !p.is_empty()).collect());
    }
    let sentences = match &d.factors {
        None => sentences
            .iter()
            .map(|l| FactoredSentence::plain(split_tokens(l)))
            .collect(),
        Some(f) => {
            let flines = read_lines(f)?;
            if flines.len() != sentences.len() {
                return Err(Error::LengthMismatch {
                    what: "factor lines vs sentences",
                    left: flines.len(),
                    right: sentences.len(),
                });
            }
            sentences
                .iter()
                .zip(&flines)
                .map(|(l, f)| FactoredSentence::parse_with_factors(l, f))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok((sentences, phrases))
}

fn run(cmd: Command, env: &Env) -> Result<()> {
    match cmd {
        Command::Ingest { input, output, name } => {
            let tb = ingest_termbase(&input, &name)?;
            tb.save(&output)?;
            eprintln!("{} entries", tb.len());
        }
        Command::Filter {
            termbase,
            corpus,
            top_n,
            min_chars,
            output,
        } => {
            let cfg = env.experiment()?;
            let tb = ingest_termbase(&termbase, "termbase")?;
            let freq = build_frequency_list(&corpus, top_n.unwrap_or(cfg.freq_top_n))?;
            let kept = filter_termbase(&tb, &freq, min_chars.unwrap_or(cfg.min_term_chars))?;
            kept.save(&output)?;
            eprintln!("kept {} of {} entries", kept.len(), tb.len());
        }
        Command::Split {
            termbase,
            test_fraction,
            train_out,
            test_out,
        } => {
            let cfg = env.experiment()?;
            let tb = ingest_termbase(&termbase, "termbase")?;
            let fraction = test_fraction.unwrap_or(cfg.test_term_fraction);
            let (train_tb, test_tb) = split_termbase(&tb, fraction, Seeds::derive(cfg.seed).split)?;
            train_tb.save(&train_out)?;
            test_tb.save(&test_out)?;
            eprintln!("{} train / {} test entries", train_tb.len(), test_tb.len());
        }
        Command::Annotate {
            input,
            termbase,
            mode,
            approximate,
            output,
        } => {
            let tb = ingest_termbase(&termbase, "termbase")?;
            let matcher = TermMatcher::new(&tb);
            let annotated = read_lines(&input)?
                .iter()
                .map(|l| {
                    let toks = tokenize(l);
                    annotate_sentence(&toks, &matcher.find(&toks, approximate), mode)
                })
                .collect::<Result<Vec<_>>>()?;
            match output {
                Some(prefix) => {
                    let tok = lines_text(annotated.iter().map(|s| s.tokens().join(" ")));
                    let fac = lines_text(annotated.iter().map(FactoredSentence::factor_line));
                    write_text(Some(&with_ext(&prefix, "tok")), &tok)?;
                    write_text(Some(&with_ext(&prefix, "factors")), &fac)?;
                }
                None => write_text(None, &lines_text(annotated.iter().map(ToString::to_string)))?,
            }
        }
        Command::BpeTrain {
            src,
            tgt,
            merges,
            output,
            vocab,
        } => {
            let cfg = env.experiment()?;
            let read =
                |p: &Path| -> Result<Vec<Vec<String>>> { Ok(read_lines(p)?.iter().map(|l| split_tokens(l)).collect()) };
            let (s, t) = (read(&src)?, read(&tgt)?);
            let bpe = bpe_train(&s, &t, merges.unwrap_or(cfg.num_merges))?;
            bpe.save(&output)?;
            if let Some(v) = vocab {
                let alphabet = s.iter().chain(&t).flatten().flat_map(|w| w.chars());
                Vocab::from_bpe(&bpe, alphabet).save(&v)?;
            }
            eprintln!("{} merges", bpe.merges().len());
        }
        Command::BpeApply {
            codes,
            input,
            factors,
            output,
            factors_out,
        } => {
            let bpe = BpeModel::load(&codes)?;
            let sentences = read_factored(&input, factors.as_deref())?;
            let segmented: Vec<_> = sentences.iter().map(|s| bpe_apply(s, &bpe)).collect();
            write_text(
                Some(&output),
                &lines_text(segmented.iter().map(|s| s.subwords().join(" "))),
            )?;
            if let Some(fo) = factors_out {
                let lines = segmented.iter().map(|s| {
                    s.factors()
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(" ")
                });
                write_text(Some(&fo), &lines_text(lines))?;
            }
        }
        Command::Synth { output } => {
            let mut spec: SynthTaskSpec = match &env.config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(io_err(p))?)?,
                None => SynthTaskSpec::default(),
            };
            if let Some(s) = env.seed {
                spec.seed = s;
            }
            let task = generate_task(&spec)?;
            if !verify_zero_shot(&task.train, &task.train_terms, &task.test_terms) {
                return Err(Error::InvalidArgument("generated task is not zero-shot".into()));
            }
            task.write(&output)?;
            eprintln!(
                "{} train / {} dev / {} test sentences, {} held-out terms",
                task.train.len(),
                task.dev.len(),
                task.test.len(),
                task.test_terms.len()
            );
        }
        Command::Train {
            corpus,
            dev,
            tables,
            output,
        } => {
            let cfg = env.experiment()?;
            let (bpe, vocab) = load_tables(&tables)?;
            let seeds = cfg.seeds();
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = vocab.len();
            model_cfg.seed = seeds.model_init;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seeds.training;
            let train_set = corpus_examples(&corpus, &bpe, &vocab, model_cfg.max_seq_len)?;
            let dev_set = corpus_examples(&dev, &bpe, &vocab, model_cfg.max_seq_len)?;
            let mut model = Transformer::<f32>::new(model_cfg)?;
            let mut progress = env.progress();
            let state = train(&mut model, &train_set, &dev_set, &train_cfg, |r| {
                progress(&format!(
                    "epoch {:>3}  train {:.4}  dev {:.4}",
                    r.epoch, r.train_loss, r.dev_loss
                ))
            })?;
            save_checkpoint(&model, &output)?;
            eprintln!("best epoch {} (dev loss {:.4})", state.best_epoch, state.best_dev_loss);
        }
        Command::Translate { decode } => {
            let cfg = env.experiment()?;
            let model = load_checkpoint::<f32>(&decode.model)?;
            let (bpe, vocab) = load_tables(&decode.tables)?;
            let t = Translator::new(&model, &bpe, &vocab, decode.beam.unwrap_or(cfg.beam_size));
            let outputs = decode_inputs(&decode)?
                .iter()
                .map(|s| t.translate(s).map(|w| w.join(" ")))
                .collect::<Result<Vec<_>>>()?;
            write_text(decode.output.as_deref(), &lines_text(outputs))?;
        }
        Command::ConstrainedTranslate { decode } => {
            let cfg = env.experiment()?;
            let model = load_checkpoint::<f32>(&decode.model)?;
            let (bpe, vocab) = load_tables(&decode.tables)?;
            let t = Translator::new(&model, &bpe, &vocab, decode.beam.unwrap_or(cfg.beam_size));
            let (inputs, phrases) = constrained_inputs(&decode)?;
            let outputs = inputs
                .iter()
                .zip(&phrases)
                .map(|(s, c)| t.translate_constrained(s, c).map(|w| w.join(" ")))
                .collect::<Result<Vec<_>>>()?;
            write_text(decode.output.as_deref(), &lines_text(outputs))?;
        }
        Command::Evaluate {
            hyp,
            reference,
            terms,
            approximate,
            baseline,
            json,
        } => {
            let cfg = env.experiment()?;
            let refs: Vec<Vec<String>> = read_lines(&reference)?.iter().map(|l| split_tokens(l)).collect();
            let gold = read_phrase_lines(&terms, refs.len())?;
            let runs = hyp
                .iter()
                .map(|p| {
                    Ok(SystemRun {
                        name: p
                            .file_stem()
                            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
                        outputs: read_lines(p)?.iter().map(|l| split_tokens(l)).collect(),
                        latency: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let base_name = match baseline {
                Some(i) => Some(
                    runs.get(i)
                        .ok_or_else(|| Error::InvalidArgument(format!("--baseline {i} is out of range")))?
                        .name
                        .clone(),
                ),
                None => None,
            };
            let opts = ReportOptions {
                approximate: approximate || cfg.regime.is_approximate(),
                resamples: cfg.bootstrap_resamples,
                seed: cfg.seeds().bootstrap,
            };
            let reports = assemble_report(&runs, &refs, &gold, base_name.as_deref(), &opts)?;
            write_text(None, &render_table(&reports))?;
            if let Some(p) = json {
                write_text(Some(&p), &reports_to_json(&reports)?)?;
            }
        }
        Command::Experiment { modes } => {
            if env.config.is_none() {
                return Err(Error::InvalidArgument("experiment needs --config".into()));
            }
            let cfg = env.experiment()?;
            let modes = if modes.is_empty() { vec![cfg.mode] } else { modes };
            let mut progress = env.progress();
            let suite = run_suite(&cfg, &modes, &mut progress)?;
            write_text(None, &suite.table)?;
        }
    }
    Ok(())
}

/// Tab-separated phrases per line, one line per sentence.
fn read_phrase_lines(path: &Path, expected: usize) -> Result<Vec<Phrases>> {
    let lines = read_lines(path)?;
    if lines.len() != expected {
        return Err(Error::LengthMismatch {
            what: "phrase lines vs sentences",
            left: lines.len(),
            right: expected,
        });
    }
    Ok(lines
        .iter()
        .map(|l| l.split('\t').map(split_tokens).filter(|p| !p.is_empty()).collect())
        .collect())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env = Env {
        seed: cli.seed,
        config: cli.config,
        quiet: cli.quiet,
    };
    let name = cli.command.name();
    match run(cli.command, &env) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e = match e {
                e @ Error::Stage { .. } => e,
                e => e.in_stage(name),
            };
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
