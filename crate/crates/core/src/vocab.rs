//! Shared source/target subword vocabulary mapping pieces to ids.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subword::{BpeModel, CONTINUATION, END_OF_WORD};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pieces: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Reserved symbols followed by the given pieces in sorted order.
    pub fn from_pieces<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let rest: BTreeSet<String> = pieces
            .into_iter()
            .map(Into::into)
            .filter(|p| ![PAD, UNK, BOS, EOS].contains(&p.as_str()))
            .collect();
        let pieces: Vec<String> = [PAD, UNK, BOS, EOS]
            .into_iter()
            .map(str::to_owned)
            .chain(rest)
            .collect();
        Self::from_ordered(pieces)
    }

    fn from_ordered(pieces: Vec<String>) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as TokenId))
            .collect();
        Vocab { pieces, index }
    }

    /// Every piece the segmenter can produce from `alphabet` and the model's
    /// merges: each symbol in word-internal (`@@`) and word-final form.
    pub fn from_bpe<I: IntoIterator<Item = char>>(bpe: &BpeModel, alphabet: I) -> Self {
        let mut symbols: BTreeSet<String> = alphabet.into_iter().map(String::from).collect();
        symbols.extend(bpe.merges().iter().map(|(l, r)| format!("{l}{r}")));
        symbols.extend(bpe.vocab().iter().cloned());
        let mut pieces = BTreeSet::new();
        for s in symbols {
            if s == END_OF_WORD {
                continue;
            }
            if let Some(stem) = s.strip_suffix(END_OF_WORD) {
                if !stem.is_empty() {
                    pieces.insert(stem.to_owned());
                }
            } else {
                pieces.insert(format!("{s}{CONTINUATION}"));
                pieces.insert(s);
            }
        }
        Self::from_pieces(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> TokenId {
        self.index.get(piece).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    pub fn piece(&self, id: TokenId) -> &str {
        self.pieces.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, pieces: &[S]) -> Vec<TokenId> {
        pieces.iter().map(|p| self.id(p.as_ref())).collect()
    }

    /// Pieces for `ids`, dropping reserved symbols.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id > EOS_ID)
            .map(|&id| self.piece(id).to_owned())
            .collect()
    }

    /// Per id: true for word-internal (`@@`) pieces.
    pub fn continuation_mask(&self) -> Vec<bool> {
        self.pieces.iter().map(|p| p.ends_with(CONTINUATION)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.pieces)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pieces: Vec<String> = serde_json::from_str(&text)?;
        if pieces.len() < 4 || pieces[..4] != [PAD, UNK, BOS, EOS] {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "vocabulary must start with the reserved symbols".into(),
            });
        }
        Ok(Self::from_ordered(pieces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::bpe_train;
    use crate::text::split_tokens;

    #[test]
    fn covers_every_segmentation() {
        let corpus: Vec<Vec<String>> = ["bolika kamu tira", "kamu bolika rita"]
            .iter()
            .map(|l| split_tokens(l))
            .collect();
        let bpe = bpe_train(&corpus, &[], 10).unwrap();
        let alphabet = corpus.iter().flatten().flat_map(|w| w.chars());
        let v = Vocab::from_bpe(&bpe, alphabet);
        for w in ["bolika", "kamutira", "tiramu", "a", "rikabo"] {
            for p in bpe.segment(w) {
                assert!(v.contains(&p), "{p} missing");
            }
        }
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.piece(EOS_ID), EOS);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::from_pieces(["b@@", "a", "b"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let back = Vocab::load(&p).unwrap();
        assert_eq!(back.len(), 7);
        assert_eq!(back.encode(&["a", "b@@", "q"]), v.encode(&["a", "b@@", "q"]));
        assert_eq!(back.decode(&[BOS_ID, 4, EOS_ID]), vec!["a".to_string()]);
    }
}
