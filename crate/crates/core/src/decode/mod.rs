//! Beam search over any next-token scorer, with and without lexical constraints.

mod dba;
mod latency;
mod scorer;

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub use dba::{constrained_beam_search_dba, track_constraint_progress, Constraint, ConstraintState};
pub use latency::{compare_latency, measure_latency, LatencyReport};
pub use scorer::{ModelScorer, ToyScorer};

/// Exponent of the length penalty `score / len^alpha`.
pub const LENGTH_ALPHA: f64 = 0.7;

/// Next-token log-probabilities for incremental decoding.
pub trait Scorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn eos(&self) -> TokenId;
    /// Longest output (EOS included) the scorer can extend to, if bounded.
    fn max_output_len(&self) -> Option<usize> {
        None
    }
    /// State after the start symbol and the distribution over the first token.
    fn start(&self) -> (Self::State, Vec<f64>);
    fn step(&self, state: &Self::State, token: TokenId) -> (Self::State, Vec<f64>);
    /// True if `token` is a word-internal piece that the next token continues.
    /// Constraints only start at word boundaries.
    fn continues_word(&self, _token: TokenId) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids; ends with EOS when `finished`.
    pub tokens: Vec<TokenId>,
    /// Cumulative log-probability.
    pub score: f64,
    pub finished: bool,
    /// Constraint tokens met (always 0 for unconstrained search).
    pub constraints_met: usize,
}

impl Hypothesis {
    pub fn normalized_score(&self) -> f64 {
        normalize(self.score, self.tokens.len())
    }

    /// Output ids without the trailing EOS.
    pub fn output(&self) -> &[TokenId] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Final beam, best first.
    pub nbest: Vec<Hypothesis>,
}

pub(crate) fn normalize(score: f64, len: usize) -> f64 {
    score / (len.max(1) as f64).powf(LENGTH_ALPHA)
}

#[derive(Clone)]
pub(crate) struct Entry<S> {
    pub hyp: Hypothesis,
    /// Decoder state and next-token distribution for unfinished entries.
    pub next: Option<(S, Vec<f64>)>,
}

/// A proposed extension of beam entry `origin`; `token == None` carries a finished entry.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    pub origin: usize,
    pub token: Option<TokenId>,
    pub score: f64,
    norm: f64,
}

impl Candidate {
    pub fn new(origin: usize, token: Option<TokenId>, score: f64, len: usize) -> Self {
        Candidate {
            origin,
            token,
            score,
            norm: normalize(score, len),
        }
    }

    fn token_key(&self) -> i64 {
        self.token.map_or(-1, i64::from)
    }
}

/// Beam order: normalized score descending, then origin index, then token id.
pub(crate) fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.norm
        .total_cmp(&a.norm)
        .then(a.origin.cmp(&b.origin))
        .then(a.token_key().cmp(&b.token_key()))
}

/// The `k` best extensions of an open entry that pass `allow`, best first.
pub(crate) fn top_extensions(
    origin: usize,
    hyp: &Hypothesis,
    lp: &[f64],
    k: usize,
    allow: impl Fn(TokenId) -> bool,
) -> Vec<Candidate> {
    let len = hyp.tokens.len() + 1;
    let mut all: Vec<Candidate> = (0..lp.len() as TokenId)
        .filter(|&t| lp[t as usize].is_finite() && allow(t))
        .map(|t| Candidate::new(origin, Some(t), hyp.score + lp[t as usize], len))
        .collect();
    if all.len() > k && k > 0 {
        all.select_nth_unstable_by(k - 1, candidate_order);
        all.truncate(k);
    }
    all.sort_by(candidate_order);
    all
}

/// Keeps a finished entry in the running.
pub(crate) fn carry(origin: usize, hyp: &Hypothesis) -> Candidate {
    Candidate::new(origin, None, hyp.score, hyp.tokens.len())
}

pub(crate) fn effective_max_len<S: Scorer>(scorer: &S, max_len: usize) -> usize {
    scorer.max_output_len().map_or(max_len, |m| m.min(max_len))
}

pub(crate) fn check_beam(beam_size: usize) -> Result<()> {
    if beam_size == 0 {
        return Err(Error::invalid("beam_size must be at least 1"));
    }
    Ok(())
}

pub(crate) fn initial_beam<S: Scorer>(scorer: &S) -> Vec<Entry<S::State>> {
    let (state, lp) = scorer.start();
    vec![Entry {
        hyp: Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
            constraints_met: 0,
        },
        next: Some((state, lp)),
    }]
}

/// Turns selected candidates into the next beam, advancing the scorer for unfinished ones.
pub(crate) fn expand<S: Scorer>(
    scorer: &S,
    beam: &[Entry<S::State>],
    chosen: &[Candidate],
    met: impl Fn(usize) -> usize,
) -> Vec<Entry<S::State>> {
    let eos = scorer.eos();
    chosen
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let parent = &beam[c.origin];
            match c.token {
                None => parent.clone(),
                Some(tok) => {
                    let mut tokens = parent.hyp.tokens.clone();
                    tokens.push(tok);
                    let finished = tok == eos;
                    let next = if finished {
                        None
                    } else {
                        let (state, _) = parent.next.as_ref().expect("unfinished entry has a state");
                        Some(scorer.step(state, tok))
                    };
                    Entry {
                        hyp: Hypothesis {
                            tokens,
                            score: c.score,
                            finished,
                            constraints_met: met(i),
                        },
                        next,
                    }
                }
            }
        })
        .collect()
}

pub(crate) fn finish(beam: Vec<Entry<impl Clone>>) -> BeamResult {
    let mut nbest: Vec<Hypothesis> = beam.into_iter().map(|e| e.hyp).collect();
    nbest.sort_by(|a, b| {
        b.finished
            .cmp(&a.finished)
            .then(b.constraints_met.cmp(&a.constraints_met))
            .then(b.normalized_score().total_cmp(&a.normalized_score()))
    });
    BeamResult {
        best: nbest[0].clone(),
        nbest,
    }
}

/// Length-normalized beam search. Finished hypotheses stay in the beam and compete
/// with open ones; search ends when the whole beam is finished or at `max_len`.
pub fn beam_search<S: Scorer>(scorer: &S, beam_size: usize, max_len: usize) -> Result<BeamResult> {
    check_beam(beam_size)?;
    let max_len = effective_max_len(scorer, max_len);
    let mut beam = initial_beam(scorer);
    for _ in 0..max_len {
        if beam.iter().all(|e| e.hyp.finished) {
            break;
        }
        let mut cands = Vec::new();
        for (origin, e) in beam.iter().enumerate() {
            match &e.next {
                None => cands.push(carry(origin, &e.hyp)),
                Some((_, lp)) => cands.extend(top_extensions(origin, &e.hyp, lp, beam_size, |_| true)),
            }
        }
        cands.sort_by(candidate_order);
        cands.truncate(beam_size);
        beam = expand(scorer, &beam, &cands, |_| 0);
    }
    Ok(finish(beam))
}

/// Greedy argmax rollout (lowest id on ties).
pub fn greedy<S: Scorer>(scorer: &S, max_len: usize) -> Hypothesis {
    let max_len = effective_max_len(scorer, max_len);
    let (mut state, mut lp) = scorer.start();
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        constraints_met: 0,
    };
    while hyp.tokens.len() < max_len {
        let (tok, &v) = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty vocabulary");
        hyp.tokens.push(tok as TokenId);
        hyp.score += v;
        if tok as TokenId == scorer.eos() {
            hyp.finished = true;
            break;
        }
        (state, lp) = scorer.step(&state, tok as TokenId);
    }
    hyp
}

#[cfg(test)]
mod tests;
