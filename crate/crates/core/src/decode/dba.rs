use super::{
    candidate_order, carry, check_beam, effective_max_len, expand, finish, initial_beam, top_extensions, BeamResult,
    Candidate, Scorer,
};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// A target phrase (in subword ids) that must appear contiguously in the output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    pub tokens: Vec<TokenId>,
    pub tokens_met: usize,
}

impl Constraint {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Constraint { tokens, tokens_met: 0 }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn satisfied(&self) -> bool {
        self.tokens_met == self.tokens.len()
    }

    /// The token that would advance this constraint, if it is not yet met.
    pub fn next_token(&self) -> Option<TokenId> {
        self.tokens.get(self.tokens_met).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConstraintState {
    pub constraints: Vec<Constraint>,
}

impl ConstraintState {
    pub fn new(phrases: impl IntoIterator<Item = Vec<TokenId>>) -> Self {
        ConstraintState {
            constraints: phrases.into_iter().map(Constraint::new).collect(),
        }
    }

    /// Constraint tokens met so far across all constraints.
    pub fn bank(&self) -> usize {
        self.constraints.iter().map(|c| c.tokens_met).sum()
    }

    pub fn total(&self) -> usize {
        self.constraints.iter().map(Constraint::len).sum()
    }

    pub fn all_met(&self) -> bool {
        self.constraints.iter().all(Constraint::satisfied)
    }
}

/// Advances each unmet constraint on a match; on a mismatch mid-phrase the progress
/// resets and `next` is rechecked against the first token. Met constraints are frozen.
pub fn track_constraint_progress(state: &ConstraintState, next: TokenId) -> ConstraintState {
    advance(state, next, true)
}

/// As [`track_constraint_progress`]; a constraint can only (re)start when `word_start`.
pub(crate) fn advance(state: &ConstraintState, next: TokenId, word_start: bool) -> ConstraintState {
    let constraints = state
        .constraints
        .iter()
        .map(|c| {
            let tokens_met = if c.satisfied() {
                c.tokens_met
            } else if c.tokens_met > 0 && c.tokens[c.tokens_met] == next {
                c.tokens_met + 1
            } else if word_start && c.tokens[0] == next {
                1
            } else {
                0
            };
            Constraint {
                tokens: c.tokens.clone(),
                tokens_met,
            }
        })
        .collect();
    ConstraintState { constraints }
}

/// Splits `beam_size` slots over banks `0..=total`: an even share each, the remainder
/// to the top bank, then unused slots move to the nearest lower bank with spare
/// candidates, else the nearest higher one.
pub(crate) fn allocate(beam_size: usize, available: &[usize]) -> Vec<usize> {
    let n = available.len();
    let mut slots = vec![beam_size / n; n];
    slots[n - 1] += beam_size % n;
    let mut taken: Vec<usize> = slots.iter().zip(available).map(|(&s, &a)| s.min(a)).collect();
    let surpluses: Vec<usize> = slots.iter().zip(&taken).map(|(&s, &t)| s - t).collect();
    for b in (0..n).rev() {
        let mut surplus = surpluses[b];
        for t in (0..b).rev().chain(b + 1..n) {
            if surplus == 0 {
                break;
            }
            let give = surplus.min(available[t] - taken[t]);
            taken[t] += give;
            surplus -= give;
        }
    }
    taken
}

/// Lexically constrained beam search with dynamic beam allocation.
pub fn constrained_beam_search_dba<S: Scorer>(
    scorer: &S,
    constraints: &[Vec<TokenId>],
    beam_size: usize,
    max_len: usize,
) -> Result<BeamResult> {
    check_beam(beam_size)?;
    for c in constraints {
        if c.is_empty() {
            return Err(Error::invalid("empty constraint"));
        }
        if let Some(&id) = c.iter().find(|&&id| id as usize >= scorer.vocab_size()) {
            return Err(Error::OutOfVocabulary {
                id: id as usize,
                vocab: scorer.vocab_size(),
            });
        }
    }
    let max_len = effective_max_len(scorer, max_len);
    let eos = scorer.eos();
    let root = ConstraintState::new(constraints.iter().cloned());
    let total = root.total();
    let mut beam = initial_beam(scorer);
    let mut states = vec![root];
    for _ in 0..max_len {
        if beam.iter().all(|e| e.hyp.finished) {
            break;
        }
        let mut cands: Vec<(Candidate, ConstraintState)> = Vec::new();
        for (origin, e) in beam.iter().enumerate() {
            let cs = &states[origin];
            let Some((_, lp)) = &e.next else {
                cands.push((carry(origin, &e.hyp), cs.clone()));
                continue;
            };
            let allow_eos = cs.all_met();
            let word_start = e.hyp.tokens.last().is_none_or(|&t| !scorer.continues_word(t));
            // the single best continuation is the head of the top-k list
            let mut own = top_extensions(origin, &e.hyp, lp, beam_size, |t| allow_eos || t != eos);
            for c in cs.constraints.iter().filter(|c| !c.satisfied()) {
                let tok = c.next_token().expect("unmet constraint has a next token");
                if lp[tok as usize].is_finite() && (word_start || c.tokens_met > 0) {
                    own.push(Candidate::new(
                        origin,
                        Some(tok),
                        e.hyp.score + lp[tok as usize],
                        e.hyp.tokens.len() + 1,
                    ));
                }
            }
            own.sort_by_key(|c| c.token);
            own.dedup_by_key(|c| c.token);
            for c in own {
                let next = advance(cs, c.token.expect("extension has a token"), word_start);
                cands.push((c, next));
            }
        }
        cands.sort_by(|a, b| candidate_order(&a.0, &b.0));
        let mut banks: Vec<Vec<(Candidate, ConstraintState)>> = vec![Vec::new(); total + 1];
        for (c, cs) in cands {
            banks[cs.bank()].push((c, cs));
        }
        let available: Vec<usize> = banks.iter().map(Vec::len).collect();
        let taken = allocate(beam_size, &available);
        let mut chosen: Vec<(Candidate, ConstraintState)> = banks
            .into_iter()
            .zip(taken)
            .flat_map(|(bank, n)| bank.into_iter().take(n))
            .collect();
        chosen.sort_by(|a, b| candidate_order(&a.0, &b.0));
        let (picked, next_states): (Vec<Candidate>, Vec<ConstraintState>) = chosen.into_iter().unzip();
        let banks_of: Vec<usize> = next_states.iter().map(ConstraintState::bank).collect();
        beam = expand(scorer, &beam, &picked, |i| banks_of[i]);
        states = next_states;
    }
    Ok(finish(beam))
}
