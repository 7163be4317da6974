//! Word vocabulary with fixed reserved ids.

use crate::error::{Error, Result};
use crate::metrics::tokenize;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token list with reserved ids 0..3 (PAD, BOS, EOS, UNK) and a
/// token -> id map covering the non-reserved entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_token_list(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds from an already-ordered full token list (reserved entries
    /// included). Used when deserializing.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        let reserved = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        if tokens.len() < 4 || tokens[..4] != reserved.map(String::from) {
            return Err(Error::Vocab(
                "token list must start with <pad>, <bos>, <eos>, <unk>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token '{t}'")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Builds from content words only; reserved tokens are prepended.
    pub fn from_content_tokens(content: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        tokens.extend(content);
        Vocabulary::from_token_list(tokens)
    }

    /// Vocabulary from a caption corpus: tokens with frequency >=
    /// `min_count` kept, ordered by (frequency desc, token asc).
    pub fn build(captions: &[String], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Contract("min_count must be >= 1".into()));
        }
        if captions.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for t in tokenize(c) {
                *freq.entry(t).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|&(_, n)| n >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Vocabulary::from_content_tokens(kept.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Id of a token; unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes and encodes a caption, wrapping it in BOS .. EOS.
    pub fn encode_caption(&self, caption: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        for t in tokenize(caption) {
            ids.push(self.id(&t));
        }
        ids.push(EOS);
        ids
    }

    /// Decodes content ids into a sentence; PAD/BOS/EOS are skipped,
    /// UNK decodes to its sentinel string.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect();
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_content_tokens(["cat".into(), "dog".into()]).unwrap();
        assert_eq!(v.id(PAD_TOKEN), PAD);
        assert_eq!(v.id(BOS_TOKEN), BOS);
        assert_eq!(v.id(EOS_TOKEN), EOS);
        assert_eq!(v.id(UNK_TOKEN), UNK);
        assert_eq!(v.id("cat"), 4);
    }

    #[test]
    fn encode_decode_identity_in_vocab() {
        let v = Vocabulary::build(&["the cat sat".into(), "the dog ran".into()], 1).unwrap();
        let ids = v.encode_caption("the cat ran");
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), "the cat ran");
    }

    #[test]
    fn oov_maps_to_unk_sentinel() {
        let v = Vocabulary::build(&["the cat".into()], 1).unwrap();
        let ids = v.encode_caption("the zebra");
        assert_eq!(ids, vec![BOS, v.id("the"), UNK, EOS]);
        assert_eq!(v.decode(&ids), "the <unk>");
    }

    #[test]
    fn min_count_filters_to_reserved_only() {
        let v = Vocabulary::build(&["a b c".into()], 2).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn min_count_one_keeps_all_distinct() {
        let v = Vocabulary::build(&["a b".into(), "b c".into()], 1).unwrap();
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn id_assignment_is_stable() {
        // frequency desc, token asc
        let captions = vec!["b a".to_string(), "b c a".to_string(), "b".to_string()];
        let v1 = Vocabulary::build(&captions, 1).unwrap();
        let v2 = Vocabulary::build(&captions, 1).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1.tokens()[4..], ["b".to_string(), "a".to_string(), "c".to_string()]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocabulary::build(&[], 1).is_err());
    }
}
