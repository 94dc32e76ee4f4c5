//! Shared cross-lingual vocabulary with reserved special tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved tokens, in id order starting at 0.
pub const SPECIAL_TOKENS: [&str; 7] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]", "[BOS]", "[EOS]"];

pub const CLS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const MASK: TokenId = 2;
pub const PAD: TokenId = 3;
pub const UNK: TokenId = 4;
pub const BOS: TokenId = 5;
pub const EOS: TokenId = 6;

pub const N_SPECIALS: usize = SPECIAL_TOKENS.len();

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < N_SPECIALS
}

/// Token inventory shared by every "language" in a run.
///
/// Ids are dense from 0: the specials come first, then word types ordered by
/// corpus count descending with lexicographic tie-breaks, which makes
/// construction deterministic. Raw text can never produce a special id —
/// literal special tokens in a corpus map to `[UNK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Vocabulary over the given word types (specials are added here).
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, TokenId> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.into();
            if SPECIAL_TOKENS.contains(&w.as_str()) {
                return Err(Error::data(format!("reserved token in word list: {w}")));
            }
            if token_to_id.contains_key(&w) {
                return Err(Error::data(format!("duplicate word type: {w}")));
            }
            token_to_id.insert(w.clone(), id_to_token.len() as TokenId);
            id_to_token.push(w);
        }
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    /// Count whitespace-tokenized types across corpus files and keep those
    /// with `count >= min_count`, ordered by count descending then
    /// lexicographic. Literal special tokens in the text are ignored.
    pub fn build<P: AsRef<Path>>(corpus_paths: &[P], min_count: usize) -> Result<Self> {
        if corpus_paths.is_empty() {
            return Err(Error::data("build_vocab: no corpus files given"));
        }
        let mut lines = Vec::new();
        for p in corpus_paths {
            let path = p.as_ref();
            let text = fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            lines.extend(text.lines().map(|l| l.to_string()));
        }
        Self::build_from_lines(lines.iter().map(|l| l.as_str()), min_count)
    }

    /// In-memory counterpart of [`Vocabulary::build`]. Tab separators count
    /// as whitespace, so parallel files contribute both sides.
    pub fn build_from_lines<'a, I>(lines: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                if SPECIAL_TOKENS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::data("build_vocab: empty corpus"));
        }
        let mut types: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        if types.is_empty() {
            return Err(Error::data(format!(
                "build_vocab: no token type reaches min_count {min_count}"
            )));
        }
        types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(types.into_iter().map(|(w, _)| w))
    }

    /// Total inventory size including specials.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Number of non-special word types.
    pub fn n_words(&self) -> usize {
        self.size() - N_SPECIALS
    }

    /// Ids of all non-special word types.
    pub fn word_ids(&self) -> impl Iterator<Item = TokenId> {
        (N_SPECIALS as TokenId)..(self.size() as TokenId)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Whitespace tokenization; unknown types and literal specials map to
    /// `[UNK]`.
    pub fn tokenize(&self, line: &str) -> Vec<TokenId> {
        line.split_whitespace()
            .map(|tok| {
                if SPECIAL_TOKENS.contains(&tok) {
                    UNK
                } else {
                    self.id(tok).unwrap_or(UNK)
                }
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// All word types in id order (serialization form).
    pub fn word_list(&self) -> &[String] {
        &self.id_to_token[N_SPECIALS..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_and_order() {
        let v = Vocabulary::build_from_lines(["a b a"], 1).unwrap();
        assert_eq!(v.size(), N_SPECIALS + 2);
        // a (count 2) comes before b (count 1)
        assert_eq!(v.token(N_SPECIALS as TokenId), "a");
        assert_eq!(v.token(N_SPECIALS as TokenId + 1), "b");
    }

    #[test]
    fn min_count_threshold() {
        let v = Vocabulary::build_from_lines(["a b a"], 2).unwrap();
        assert_eq!(v.size(), N_SPECIALS + 1);
        assert_eq!(v.id("a"), Some(N_SPECIALS as TokenId));
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn disjoint_scripts_share_one_inventory() {
        let v = Vocabulary::build_from_lines(["aaa bbb", "xxx yyy zzz"], 1).unwrap();
        assert_eq!(v.n_words(), 5);
        for w in ["aaa", "bbb", "xxx", "yyy", "zzz"] {
            assert!(v.id(w).is_some(), "missing {w}");
        }
    }

    #[test]
    fn ids_dense_from_zero() {
        let v = Vocabulary::build_from_lines(["c b a"], 1).unwrap();
        let ids: Vec<TokenId> = (0..v.size() as TokenId).collect();
        for id in ids {
            let tok = v.token(id).to_string();
            assert_eq!(v.id(&tok), Some(id));
        }
    }

    #[test]
    fn specials_never_tokenized_from_text() {
        let v = Vocabulary::build_from_lines(["a [CLS] b [MASK]"], 1).unwrap();
        assert_eq!(v.n_words(), 2, "special literals are not counted");
        let ids = v.tokenize("a [CLS] b");
        assert_eq!(ids[1], UNK);
        assert!(!ids.iter().any(|&i| i == CLS));
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(Vocabulary::build_from_lines([], 1).is_err());
        assert!(Vocabulary::build_from_lines(["", "   "], 1).is_err());
    }

    #[test]
    fn deterministic_ordering_on_ties() {
        let a = Vocabulary::build_from_lines(["z y x w"], 1).unwrap();
        let b = Vocabulary::build_from_lines(["z y x w"], 1).unwrap();
        assert_eq!(a, b);
        // equal counts: lexicographic
        assert_eq!(a.token(N_SPECIALS as TokenId), "w");
    }
}
