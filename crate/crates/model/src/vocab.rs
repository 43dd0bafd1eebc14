//! Word-level vocabulary with single-entry control tokens.

use std::collections::{BTreeSet, HashMap};

use discourse_core::corpus::{Story, DEFAULT_STORY_LENGTH};
use discourse_core::Dimension;
use serde::{Deserialize, Serialize};

use crate::ModelError;

pub const PAD_TOKEN: &str = "<|PAD|>";
pub const UNK_TOKEN: &str = "<|UNK|>";
pub const EOS_TOKEN: &str = "<|endoftext|>";

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;

pub fn sentence_token(i: usize) -> String {
    format!("<|sent{i}|>")
}

fn is_control(token: &str) -> bool {
    token.starts_with("<|") && token.ends_with("|>")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    sentences: usize,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    sentences: usize,
    tokens: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_tokens(r.tokens, r.sentences)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            sentences: v.sentences,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, sentences: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            sentences,
            index,
        }
    }

    /// Control tokens first (PAD, UNK, EOS, sentence markers, dimension
    /// markers), then the sorted whitespace-split words of `texts`.
    /// Words that look like control tokens are dropped.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, sentences: usize) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        tokens.extend((0..sentences).map(sentence_token));
        tokens.extend(Dimension::ALL.iter().map(|d| d.control_token()));
        let words: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !is_control(w))
            .collect();
        tokens.extend(words.into_iter().map(str::to_string));
        Vocabulary::from_tokens(tokens, sentences)
    }

    /// Vocabulary over story sentences and templated inferences.
    pub fn from_corpus(stories: &[Story], templated: &[String]) -> Self {
        let sentences = stories
            .iter()
            .map(Story::len)
            .max()
            .unwrap_or(DEFAULT_STORY_LENGTH)
            .max(DEFAULT_STORY_LENGTH);
        let texts = stories
            .iter()
            .flat_map(|s| s.sentences.iter().map(String::as_str))
            .chain(templated.iter().map(String::as_str));
        Vocabulary::build(texts, sentences)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentences(&self) -> usize {
        self.sentences
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    pub fn sentence(&self, i: usize) -> Result<u32, ModelError> {
        if i >= self.sentences {
            return Err(ModelError::Precondition(format!(
                "sentence index {i} exceeds the {} sentence markers",
                self.sentences
            )));
        }
        Ok(3 + i as u32)
    }

    pub fn dimension(&self, d: Dimension) -> u32 {
        (3 + self.sentences + d.index()) as u32
    }

    /// Word ids of `text`; control-looking words are never produced from text.
    pub fn encode_words(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| if is_control(w) { UNK } else { self.id(w) })
            .collect()
    }

    /// Space-joined tokens, stopping at EOS and skipping PAD.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_are_single_entries() {
        let v = Vocabulary::build(["b a", "c <|sent0|>"], 5);
        assert_eq!(v.id(PAD_TOKEN), PAD);
        assert_eq!(v.id(EOS_TOKEN), EOS);
        assert_eq!(v.token(v.sentence(4).unwrap()), "<|sent4|>");
        assert_eq!(v.token(v.dimension(Dimension::XWant)), "<|xWant|>");
        assert_eq!(v.len(), 3 + 5 + 9 + 3);
        assert_eq!(v.encode_words("a <|sent0|> zz"), vec![v.id("a"), UNK, UNK]);
        assert!(v.sentence(5).is_err());
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::build(["x y"], 5);
        let ids = [v.id("x"), PAD, v.id("y"), EOS, v.id("x")];
        assert_eq!(v.decode(&ids), "x y");
    }

    #[test]
    fn serde_roundtrip() {
        let v = Vocabulary::build(["hello world"], 5);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("world"), v.id("world"));
    }
}
