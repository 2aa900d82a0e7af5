use crate::annotate::FactoredSentence;
use crate::decode::{beam_search, constrained_beam_search_dba, Hypothesis, ModelScorer};
use crate::error::Result;
use crate::model::{Example, Transformer};
use crate::scalar::Scalar;
use crate::subword::{bpe_apply, bpe_apply_tokens, bpe_decode, BpeModel};
use crate::vocab::{TokenId, Vocab, EOS_ID};

/// Output length cap relative to the subword source length.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 10
}

/// Model plus the subword tables needed to go from words to words.
pub struct Translator<'a, T> {
    pub model: &'a Transformer<T>,
    pub bpe: &'a BpeModel,
    pub vocab: &'a Vocab,
    pub beam_size: usize,
    continuation: Vec<bool>,
}

impl<'a, T: Scalar> Translator<'a, T> {
    pub fn new(model: &'a Transformer<T>, bpe: &'a BpeModel, vocab: &'a Vocab, beam_size: usize) -> Self {
        Translator {
            model,
            bpe,
            vocab,
            beam_size,
            continuation: vocab.continuation_mask(),
        }
    }

    pub fn encode_source(&self, sentence: &FactoredSentence) -> (Vec<TokenId>, Vec<crate::annotate::Factor>) {
        let sub = bpe_apply(sentence, self.bpe);
        (self.vocab.encode(sub.subwords()), sub.factors().to_vec())
    }

    pub fn encode_phrase(&self, words: &[String]) -> Vec<TokenId> {
        self.vocab.encode(&bpe_apply_tokens(words, self.bpe))
    }

    fn words(&self, hyp: &Hypothesis) -> Vec<String> {
        let ids: Vec<TokenId> = hyp.output().iter().copied().filter(|&t| t != EOS_ID).collect();
        bpe_decode(&self.vocab.decode(&ids))
    }

    pub fn translate(&self, sentence: &FactoredSentence) -> Result<Vec<String>> {
        let (src, factors) = self.encode_source(sentence);
        let scorer = ModelScorer::new(self.model, &src, &factors)?;
        let result = beam_search(&scorer, self.beam_size, default_max_len(src.len()))?;
        Ok(self.words(&result.best))
    }

    /// Decodes with dynamic beam allocation; every phrase in `constraints` must appear.
    pub fn translate_constrained(
        &self,
        sentence: &FactoredSentence,
        constraints: &[Vec<String>],
    ) -> Result<Vec<String>> {
        let (src, factors) = self.encode_source(sentence);
        let phrases: Vec<Vec<TokenId>> = constraints
            .iter()
            .filter(|c| !c.is_empty())
            .map(|c| self.encode_phrase(c))
            .collect();
        let scorer = ModelScorer::new(self.model, &src, &factors)?.with_continuation_mask(&self.continuation);
        let result = constrained_beam_search_dba(&scorer, &phrases, self.beam_size, default_max_len(src.len()))?;
        Ok(self.words(&result.best))
    }
}

/// Subword-encodes one training pair.
pub fn make_example(sentence: &FactoredSentence, target: &[String], bpe: &BpeModel, vocab: &Vocab) -> Example {
    let sub = bpe_apply(sentence, bpe);
    Example {
        src: vocab.encode(sub.subwords()),
        factors: sub.factors().to_vec(),
        tgt: vocab.encode(&bpe_apply_tokens(target, bpe)),
    }
}
