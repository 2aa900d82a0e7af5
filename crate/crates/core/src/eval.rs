//! Term use rate, corpus BLEU, paired bootstrap significance and report assembly.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::phrase_occurs;
use crate::decode::LatencyReport;
use crate::error::{Error, Result};
use crate::util::mix_seed;

pub const BLEU_ORDER: usize = 4;
pub const MIN_RESAMPLES: usize = 1000;

fn check_aligned(what: &'static str, left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { what, left, right });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermUse {
    pub used: usize,
    pub total: usize,
}

impl TermUse {
    pub fn rate(&self) -> f64 {
        100.0 * self.used as f64 / self.total as f64
    }
}

/// Counts `(sentence, term)` annotations whose target phrase occurs contiguously in
/// the output. Each annotation counts once however often the phrase appears.
pub fn term_use(outputs: &[Vec<String>], gold_terms: &[Vec<Vec<String>>], approximate: bool) -> Result<TermUse> {
    check_aligned("outputs vs gold terms", outputs.len(), gold_terms.len())?;
    let total: usize = gold_terms.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("term annotations".into()));
    }
    let used = outputs
        .iter()
        .zip(gold_terms)
        .map(|(out, terms)| terms.iter().filter(|t| phrase_occurs(t, out, approximate)).count())
        .sum();
    Ok(TermUse { used, total })
}

/// Percentage of term annotations produced in the output.
pub fn term_use_rate(outputs: &[Vec<String>], gold_terms: &[Vec<Vec<String>>], approximate: bool) -> Result<f64> {
    term_use(outputs, gold_terms, approximate).map(|u| u.rate())
}

/// Sufficient statistics for corpus BLEU; they add across sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn sentence(hyp: &[String], reference: &[String]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_ORDER {
            let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
            for g in reference.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
            for g in hyp.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..BLEU_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn score(&self) -> Bleu {
        let precisions: [f64; BLEU_ORDER] = std::array::from_fn(|n| {
            if self.totals[n] == 0 {
                0.0
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            }
        });
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let score = if precisions.contains(&0.0) {
            0.0
        } else {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
            100.0 * brevity_penalty * log_mean.exp()
        };
        Bleu {
            score,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub score: f64,
    pub precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn sentence_stats(outputs: &[Vec<String>], refs: &[Vec<String>]) -> Result<Vec<BleuStats>> {
    check_aligned("outputs vs references", outputs.len(), refs.len())?;
    if outputs.is_empty() {
        return Err(Error::Empty("BLEU corpus".into()));
    }
    Ok(outputs
        .iter()
        .zip(refs)
        .map(|(h, r)| BleuStats::sentence(h, r))
        .collect())
}

/// Corpus-level BLEU-4 without smoothing, case-sensitive on tokens.
pub fn bleu(outputs: &[Vec<String>], refs: &[Vec<String>]) -> Result<Bleu> {
    let mut total = BleuStats::default();
    for s in sentence_stats(outputs, refs)? {
        total.add(&s);
    }
    Ok(total.score())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub bleu_a: f64,
    pub bleu_b: f64,
    pub resamples: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    /// One-sided p-value for "a is better than b": share of resamples where a does not win.
    pub p_a_better: f64,
    /// One-sided p-value for "b is better than a".
    pub p_b_better: f64,
}

impl Bootstrap {
    /// p-value for the system that won on the full test set; 1.0 on an exact tie.
    pub fn p_value(&self) -> f64 {
        if self.bleu_a > self.bleu_b {
            self.p_a_better
        } else if self.bleu_b > self.bleu_a {
            self.p_b_better
        } else {
            1.0
        }
    }
}

/// Paired bootstrap resampling over sentence indices. Resample `r` draws its indices
/// from a generator seeded with `mix_seed(seed, r)`.
pub fn paired_bootstrap(
    outputs_a: &[Vec<String>],
    outputs_b: &[Vec<String>],
    refs: &[Vec<String>],
    resamples: usize,
    seed: u64,
) -> Result<Bootstrap> {
    check_aligned("system a vs system b", outputs_a.len(), outputs_b.len())?;
    if resamples < MIN_RESAMPLES {
        return Err(Error::invalid(format!(
            "paired bootstrap needs at least {MIN_RESAMPLES} resamples, got {resamples}"
        )));
    }
    let sa = sentence_stats(outputs_a, refs)?;
    let sb = sentence_stats(outputs_b, refs)?;
    let corpus = |stats: &[BleuStats], idx: &mut dyn Iterator<Item = usize>| {
        let mut t = BleuStats::default();
        for i in idx {
            t.add(&stats[i]);
        }
        t.score().score
    };
    let n = sa.len();
    let bleu_a = corpus(&sa, &mut (0..n));
    let bleu_b = corpus(&sb, &mut (0..n));
    let (mut wins_a, mut wins_b) = (0, 0);
    let mut idx = vec![0usize; n];
    for r in 0..resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, r as u64));
        idx.iter_mut().for_each(|i| *i = rng.gen_range(0..n));
        let a = corpus(&sa, &mut idx.iter().copied());
        let b = corpus(&sb, &mut idx.iter().copied());
        if a > b {
            wins_a += 1;
        } else if b > a {
            wins_b += 1;
        }
    }
    Ok(Bootstrap {
        bleu_a,
        bleu_b,
        resamples,
        wins_a,
        wins_b,
        p_a_better: (resamples - wins_a) as f64 / resamples as f64,
        p_b_better: (resamples - wins_b) as f64 / resamples as f64,
    })
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub term_use_rate: f64,
    pub terms_used: usize,
    pub terms_total: usize,
    pub bleu: f64,
    pub precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub bleu_delta: Option<f64>,
    pub p_value_vs_baseline: Option<f64>,
    pub latency_p50: Option<f64>,
    pub latency_p99: Option<f64>,
}

/// Outputs of one system on the shared test set.
#[derive(Debug, Clone)]
pub struct SystemRun {
    pub name: String,
    pub outputs: Vec<Vec<String>>,
    pub latency: Option<LatencyReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    /// Count a term when its last token matches by the stem-prefix rule.
    pub approximate: bool,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            approximate: false,
            resamples: MIN_RESAMPLES,
            seed: 1,
        }
    }
}

/// Scores every run; runs other than `baseline` carry a BLEU delta and p-value against it.
pub fn assemble_report(
    runs: &[SystemRun],
    refs: &[Vec<String>],
    gold_terms: &[Vec<Vec<String>>],
    baseline: Option<&str>,
    opts: &ReportOptions,
) -> Result<Vec<EvalReport>> {
    for run in runs {
        check_aligned("system outputs vs test set", run.outputs.len(), refs.len())?;
    }
    check_aligned("gold terms vs test set", gold_terms.len(), refs.len())?;
    let base = match baseline {
        Some(name) => Some(
            runs.iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::invalid(format!("baseline system {name} has no run")))?,
        ),
        None => None,
    };
    runs.iter()
        .map(|run| {
            let b = bleu(&run.outputs, refs)?;
            let use_ = term_use(&run.outputs, gold_terms, opts.approximate)?;
            let (bleu_delta, p_value_vs_baseline) = match base {
                Some(base) if base.name != run.name => {
                    let boot = paired_bootstrap(&run.outputs, &base.outputs, refs, opts.resamples, opts.seed)?;
                    (Some(boot.bleu_a - boot.bleu_b), Some(boot.p_value()))
                }
                _ => (None, None),
            };
            Ok(EvalReport {
                system: run.name.clone(),
                term_use_rate: use_.rate(),
                terms_used: use_.used,
                terms_total: use_.total,
                bleu: b.score,
                precisions: b.precisions,
                brevity_penalty: b.brevity_penalty,
                bleu_delta,
                p_value_vs_baseline,
                latency_p50: run.latency.as_ref().map(|l| l.median),
                latency_p99: run.latency.as_ref().and_then(|l| l.p99),
            })
        })
        .collect()
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

/// Aligned plain-text table: system, term use, BLEU with delta, p-value, latency.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["System", "Term%", "BLEU (Δ)", "p", "P50(s)", "P99(s)"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            let delta = r.bleu_delta.map_or_else(String::new, |d| format!(" ({d:+.1})"));
            [
                r.system.clone(),
                format!("{:.1}", r.term_use_rate),
                format!("{:.1}{delta}", r.bleu),
                opt(r.p_value_vs_baseline, 3),
                opt(r.latency_p50, 4),
                opt(r.latency_p99, 4),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(rule.iter().map(String::as_str).collect(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn reports_to_json(reports: &[EvalReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::text::split_tokens;

    fn toks(s: &str) -> Vec<String> {
        split_tokens(s)
    }

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| toks(l)).collect()
    }

    #[test]
    fn term_use_arithmetic_and_boundaries() {
        let outs = corpus(&["a b c", "d e", "f", ""]);
        let gold = vec![vec![toks("b c")], vec![toks("e")], vec![toks("f")], vec![toks("g")]];
        assert_eq!(term_use_rate(&outs, &gold, false).unwrap(), 75.0);
        let empty = vec![Vec::new(); 4];
        assert_eq!(term_use_rate(&empty, &gold, false).unwrap(), 0.0);
        assert!(term_use_rate(&outs, &vec![Vec::new(); 4], false).is_err());
        assert!(term_use_rate(&outs[..3], &gold, false).is_err());
    }

    #[test]
    fn table_one_reference_uses_its_term() {
        let out = corpus(&["Alle Stellvertreter werden für eine Amtszeit gewählt"]);
        let gold = vec![vec![toks("Stellvertreter")]];
        assert_eq!(term_use_rate(&out, &gold, false).unwrap(), 100.0);
    }

    #[test]
    fn approximate_term_use_accepts_inflected_last_token() {
        let out = corpus(&["die großen Stellvertretern kamen"]);
        let gold = vec![vec![toks("großen Stellvertreter")]];
        assert_eq!(term_use_rate(&out, &gold, false).unwrap(), 0.0);
        assert_eq!(term_use_rate(&out, &gold, true).unwrap(), 100.0);
    }

    /// Hand-computed: precisions 5/6, 4/5, 3/4, 2/3 and no brevity penalty, so
    /// BLEU = 100 * (1/3)^(1/4) = 75.98.
    #[test]
    fn bleu_hand_oracle() {
        let b = bleu(&corpus(&["a b c d e f"]), &corpus(&["a b c d e g"])).unwrap();
        let expected = 100.0 * (5.0 / 6.0 * 4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0f64).powf(0.25);
        assert!((b.score - expected).abs() < 1e-9);
        assert!((b.score - 75.98).abs() < 0.01);
        assert_eq!(b.precisions, [5.0 / 6.0, 4.0 / 5.0, 3.0 / 4.0, 2.0 / 3.0]);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn bleu_boundaries() {
        let refs = corpus(&["the cat sat on the mat", "a dog"]);
        assert_eq!(bleu(&refs, &refs).unwrap().score, 100.0);
        assert_eq!(bleu(&corpus(&["x y z w", "v"]), &refs).unwrap().score, 0.0);
        assert!(bleu(&refs[..1], &refs).is_err());
        let short = bleu(&corpus(&["the cat sat on"]), &corpus(&["the cat sat on the mat"])).unwrap();
        assert!((short.brevity_penalty - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_identical_systems() {
        let refs = corpus(&["a b c d", "e f g h", "i j k l"]);
        let out = corpus(&["a b c x", "e f g h", "i j y l"]);
        let r = paired_bootstrap(&out, &out, &refs, 1000, 3).unwrap();
        assert_eq!(r.p_value(), 1.0);
        assert_eq!(r.wins_a + r.wins_b, 0);
    }

    #[test]
    fn bootstrap_references_beat_shuffled_references() {
        let refs: Vec<Vec<String>> = (0..30)
            .map(|i| toks(&format!("w{i} x{} y{} z{} q", i % 7, i % 5, i % 3)))
            .collect();
        let mut shuffled = refs.clone();
        shuffled.rotate_left(1);
        let r = paired_bootstrap(&refs, &shuffled, &refs, 1000, 11).unwrap();
        assert!(r.p_value() < 0.05);
        assert_eq!(r.wins_a, 1000);
        let again = paired_bootstrap(&refs, &shuffled, &refs, 1000, 11).unwrap();
        assert_eq!(r, again);
        assert!(paired_bootstrap(&refs, &shuffled, &refs, 999, 11).is_err());
    }

    fn run(name: &str, lines: &[&str], latency: bool) -> SystemRun {
        SystemRun {
            name: name.into(),
            outputs: corpus(lines),
            latency: latency.then(|| LatencyReport::from_samples(vec![0.5; 100], 99.0).unwrap()),
        }
    }

    #[test]
    fn report_rows_and_absent_fields() {
        let refs = corpus(&["a b c d", "e f g h"]);
        let gold = vec![vec![toks("b")], vec![toks("g h")]];
        let runs = vec![
            run("base", &["a x c d", "e f q h"], true),
            run("append", &["a b c d", "e f g h"], false),
        ];
        let reports = assemble_report(&runs, &refs, &gold, Some("base"), &ReportOptions::default()).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].bleu_delta, None);
        assert_eq!(reports[0].p_value_vs_baseline, None);
        assert_eq!(reports[0].latency_p99, Some(0.5));
        assert_eq!(reports[1].term_use_rate, 100.0);
        assert_eq!(reports[1].latency_p99, None);
        assert!(reports[1].bleu_delta.unwrap() > 0.0);
        let json = reports_to_json(&reports).unwrap();
        assert!(json.contains("\"latency_p99\": null"));
        let back: Vec<EvalReport> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, reports);
        let table = render_table(&reports);
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("100.0 (+"));
        let bad = vec![run("base", &["a b c d"], false)];
        assert!(assemble_report(&bad, &refs, &gold, None, &ReportOptions::default()).is_err());
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..8)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bleu_invariants(pairs in prop::collection::vec((sentence(), sentence()), 1..8), rot in 0usize..8) {
            let (outs, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let b = bleu(&outs, &refs).unwrap().score;
            prop_assert!((0.0..=100.0).contains(&b));
            let k = rot % outs.len();
            let (mut o2, mut r2) = (outs.clone(), refs.clone());
            o2.rotate_left(k);
            r2.rotate_left(k);
            prop_assert_eq!(bleu(&o2, &r2).unwrap().score, b);
            if refs.iter().any(|r| r.len() >= 4) {
                prop_assert_eq!(bleu(&refs, &refs).unwrap().score, 100.0);
            }
        }

        #[test]
        fn term_use_is_permutation_invariant(
            outs in prop::collection::vec(sentence(), 1..8),
            terms in prop::collection::vec(prop::collection::vec(sentence().prop_filter("non-empty", |s| !s.is_empty()), 1..3), 1..8),
            rot in 0usize..8,
        ) {
            let n = outs.len().min(terms.len());
            let (outs, terms) = (outs[..n].to_vec(), terms[..n].to_vec());
            let rate = term_use_rate(&outs, &terms, false).unwrap();
            let (mut o2, mut t2) = (outs, terms);
            o2.rotate_left(rot % n);
            t2.rotate_left(rot % n);
            prop_assert_eq!(term_use_rate(&o2, &t2, false).unwrap(), rate);
            prop_assert!((0.0..=100.0).contains(&rate));
        }

        #[test]
        fn bootstrap_sides_are_complementary(
            pairs in prop::collection::vec((sentence(), sentence(), sentence()), 2..6),
            seed in 0u64..100,
        ) {
            let a: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
            let b: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
            let r: Vec<_> = pairs.iter().map(|p| p.2.clone()).collect();
            let ab = paired_bootstrap(&a, &b, &r, 1000, seed).unwrap();
            let ba = paired_bootstrap(&b, &a, &r, 1000, seed).unwrap();
            prop_assert_eq!(ab.p_a_better, ba.p_b_better);
            prop_assert_eq!(ab.p_value(), ba.p_value());
            let ties = (1000 - ab.wins_a - ab.wins_b) as f64 / 1000.0;
            prop_assert!((ab.p_a_better + ab.p_b_better - 1.0 - ties).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab.p_value()));
        }
    }
}
