use super::Scorer;
use crate::annotate::Factor;
use crate::error::Result;
use crate::model::{DecoderState, EncodedSource, Transformer};
use crate::scalar::Scalar;
use crate::util::mix_seed;
use crate::vocab::{TokenId, BOS_ID, EOS_ID, PAD_ID};

/// Adapts a trained transformer and one encoded source sentence to [`Scorer`].
pub struct ModelScorer<'m, T> {
    model: &'m Transformer<T>,
    source: EncodedSource<T>,
    continuation: Option<&'m [bool]>,
}

impl<'m, T: Scalar> ModelScorer<'m, T> {
    pub fn new(model: &'m Transformer<T>, src: &[TokenId], factors: &[Factor]) -> Result<Self> {
        Ok(ModelScorer {
            model,
            source: model.encode(src, factors)?,
            continuation: None,
        })
    }

    /// Marks word-internal pieces by id, so constraints start at word boundaries.
    pub fn with_continuation_mask(mut self, mask: &'m [bool]) -> Self {
        self.continuation = Some(mask);
        self
    }

    fn run(&self, state: &mut DecoderState<T>, token: TokenId) -> Vec<f64> {
        let mut lp: Vec<f64> = self
            .model
            .step(&self.source, state, token)
            .into_iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        lp[PAD_ID as usize] = f64::NEG_INFINITY;
        lp[BOS_ID as usize] = f64::NEG_INFINITY;
        lp
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    type State = DecoderState<T>;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn eos(&self) -> TokenId {
        EOS_ID
    }

    fn max_output_len(&self) -> Option<usize> {
        Some(self.model.max_decoder_positions())
    }

    fn start(&self) -> (Self::State, Vec<f64>) {
        let mut state = self.model.start_state();
        let lp = self.run(&mut state, BOS_ID);
        (state, lp)
    }

    fn step(&self, state: &Self::State, token: TokenId) -> (Self::State, Vec<f64>) {
        let mut state = state.clone();
        let lp = self.run(&mut state, token);
        (state, lp)
    }

    fn continues_word(&self, token: TokenId) -> bool {
        self.continuation
            .and_then(|m| m.get(token as usize).copied())
            .unwrap_or(false)
    }
}

/// Deterministic pseudo-random language model: the distribution after a prefix is a
/// softmax over hashed logits of `(seed, prefix, token)`.
#[derive(Debug, Clone)]
pub struct ToyScorer {
    pub vocab: usize,
    pub eos: TokenId,
    pub seed: u64,
    /// Logit range; larger values make the model more peaked.
    pub sharpness: f64,
}

impl ToyScorer {
    pub fn new(vocab: usize, eos: TokenId, seed: u64) -> Self {
        ToyScorer {
            vocab,
            eos,
            seed,
            sharpness: 3.0,
        }
    }

    /// Log-probabilities after `prefix`.
    pub fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let h = prefix.iter().fold(mix_seed(self.seed, prefix.len() as u64), |h, &t| {
            mix_seed(h, u64::from(t))
        });
        let logits: Vec<f64> = (0..self.vocab)
            .map(|v| {
                let u = (mix_seed(h, v as u64) >> 11) as f64 / (1u64 << 53) as f64;
                self.sharpness * (2.0 * u - 1.0)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        logits.into_iter().map(|l| l - z).collect()
    }

    /// Total log-probability of a complete token sequence.
    pub fn sequence_score(&self, tokens: &[TokenId]) -> f64 {
        (0..tokens.len())
            .map(|i| self.log_probs(&tokens[..i])[tokens[i] as usize])
            .sum()
    }
}

impl Scorer for ToyScorer {
    type State = Vec<TokenId>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn eos(&self) -> TokenId {
        self.eos
    }

    fn start(&self) -> (Self::State, Vec<f64>) {
        (Vec::new(), self.log_probs(&[]))
    }

    fn step(&self, state: &Self::State, token: TokenId) -> (Self::State, Vec<f64>) {
        let mut next = state.clone();
        next.push(token);
        let lp = self.log_probs(&next);
        (next, lp)
    }
}
