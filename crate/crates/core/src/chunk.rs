//! Noun/verb phrase extraction used to match story sentences to KB events.

use std::collections::HashMap;

/// Extracts noun phrases and verb phrases from a text.
///
/// Implementations must be deterministic and return phrases that occur in
/// the input modulo [`normalize_phrase`].
pub trait PhraseChunker: Send + Sync {
    fn phrases(&self, text: &str) -> Vec<String>;
}

/// Lowercases and collapses internal whitespace.
pub fn normalize_phrase(phrase: &str) -> String {
    phrase
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Det,
    Pron,
    Prep,
    Adj,
    Verb,
    Particle,
    Other,
    Noun,
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "his", "her", "their", "my", "our", "your", "its", "some", "this", "that",
    "these", "those", "every", "each", "all", "any", "no", "another",
];

const PRONOUNS: &[&str] = &[
    "i", "me", "he", "him", "she", "they", "them", "we", "us", "you", "it", "personx", "persony",
    "personx's", "persony's", "himself", "herself", "themselves", "myself", "everyone", "someone",
    "others", "who", "what",
];

const PREPOSITIONS: &[&str] = &[
    "to", "at", "in", "of", "for", "with", "from", "into", "by", "about", "after", "before",
    "during", "under", "through", "between", "without", "onto", "toward", "towards", "across",
    "near", "around", "until", "since", "like", "as",
];

const PARTICLES: &[&str] = &["up", "out", "down", "off", "away", "back", "on", "over", "along"];

const OTHER: &[&str] = &[
    "and", "or", "but", "so", "because", "then", "when", "while", "if", "not", "never", "very",
    "too", "also", "just", "still", "really", "finally", "again", "soon", "later", "there", "here",
    "now", "yesterday", "today", "tomorrow", "always", "often", "n't", "will", "would", "could",
    "should", "can", "must", "might", "is", "was", "are", "were", "be", "been", "am", "has", "had",
    "have", "do", "does", "did", "much", "many", "more", "most", "one",
];

const ADJECTIVES: &[&str] = &[
    "new", "old", "big", "small", "little", "good", "bad", "great", "happy", "sad", "angry",
    "tired", "hungry", "excited", "nervous", "scared", "long", "short", "hot", "cold", "nice",
    "best", "favorite", "first", "last", "next", "whole", "local", "young", "large", "early",
    "late", "red", "blue", "green", "black", "white", "beautiful", "delicious", "huge", "free",
];

const VERBS: &[&str] = &[
    "go", "goes", "went", "going", "gone", "get", "gets", "got", "getting", "make", "makes",
    "made", "take", "takes", "took", "taken", "buy", "buys", "bought", "eat", "eats", "ate",
    "see", "sees", "saw", "seen", "run", "runs", "ran", "put", "puts", "give", "gives", "gave",
    "come", "comes", "came", "find", "finds", "found", "know", "knows", "knew", "think",
    "thinks", "thought", "tell", "tells", "told", "feel", "feels", "felt", "leave", "leaves",
    "left", "keep", "keeps", "kept", "bring", "brings", "brought", "begin", "begins", "began",
    "write", "writes", "wrote", "read", "reads", "sit", "sits", "sat", "stand", "stands",
    "stood", "lose", "loses", "lost", "pay", "pays", "meet", "meets", "met", "win", "wins",
    "won", "drive", "drives", "drove", "sleep", "sleeps", "slept", "play", "plays", "want",
    "wants", "need", "needs", "try", "tries", "call", "calls", "ask", "asks", "work", "works",
    "help", "helps", "learn", "learns", "cook", "cooks", "bake", "bakes", "fix", "fixes",
    "clean", "cleans", "study", "studies", "visit", "visits", "watch", "watches", "open",
    "opens", "close", "closes", "walk", "walks", "cancel", "cancels", "miss", "misses",
    "travel", "travels", "love", "loves", "hate", "hates", "break", "breaks", "broke",
    "throw", "throws", "threw", "catch", "catches", "caught", "fall", "falls", "fell", "swim",
    "swims", "swam", "sell", "sells", "sold", "send", "sends", "sent", "spend", "spends",
    "spent", "build", "builds", "built", "decide", "decides", "start", "starts", "finish",
    "finishes", "enjoy", "enjoys", "adopt", "adopts", "plant", "plants", "grow", "grows",
    "grew", "paint", "paints", "sing", "sings", "sang", "dance", "dances", "wash", "washes",
];

/// Rule-based chunker over a small closed-class lexicon.
///
/// Noun phrases follow `(determiner)? adjective* noun+`; verb phrases are a
/// verb head plus an optional particle. Words outside the lexicon default to
/// nouns, except `-ed` forms and the word right after an infinitival "to".
#[derive(Debug, Clone, Default)]
pub struct RuleChunker;

impl RuleChunker {
    fn words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }

    fn tag(words: &[String]) -> Vec<Tag> {
        let mut tags = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let w = w.as_str();
            let after_to = i > 0 && words[i - 1] == "to";
            let tag = if DETERMINERS.contains(&w) {
                Tag::Det
            } else if PRONOUNS.contains(&w) {
                Tag::Pron
            } else if VERBS.contains(&w) {
                Tag::Verb
            } else if PARTICLES.contains(&w) && tags.last() == Some(&Tag::Verb) {
                Tag::Particle
            } else if PREPOSITIONS.contains(&w) || PARTICLES.contains(&w) {
                Tag::Prep
            } else if OTHER.contains(&w) {
                Tag::Other
            } else if ADJECTIVES.contains(&w) {
                Tag::Adj
            } else if after_to || (w.len() > 4 && w.ends_with("ed")) {
                Tag::Verb
            } else {
                Tag::Noun
            };
            tags.push(tag);
        }
        tags
    }
}

impl PhraseChunker for RuleChunker {
    fn phrases(&self, text: &str) -> Vec<String> {
        let words = Self::words(text);
        let tags = Self::tag(&words);
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            match tags[i] {
                Tag::Verb => {
                    if i + 1 < words.len() && tags[i + 1] == Tag::Particle {
                        out.push(format!("{} {}", words[i], words[i + 1]));
                        i += 2;
                    } else {
                        out.push(words[i].clone());
                        i += 1;
                    }
                }
                Tag::Det | Tag::Adj | Tag::Noun => {
                    let start = i;
                    if tags[i] == Tag::Det {
                        i += 1;
                    }
                    while i < words.len() && tags[i] == Tag::Adj {
                        i += 1;
                    }
                    let noun_start = i;
                    while i < words.len() && tags[i] == Tag::Noun {
                        i += 1;
                    }
                    if i > noun_start {
                        out.push(words[start..i].join(" "));
                    } else if i == start {
                        i += 1;
                    }
                }
                _ => i += 1,
            }
        }
        out
    }
}

/// Returns preset phrases for known texts and nothing otherwise. Handy for
/// tests and for replaying the output of an external parser.
#[derive(Debug, Clone, Default)]
pub struct FixedChunker {
    table: HashMap<String, Vec<String>>,
}

impl FixedChunker {
    pub fn new(entries: &[(&str, &[&str])]) -> Self {
        FixedChunker {
            table: entries
                .iter()
                .map(|(text, phrases)| {
                    (text.to_string(), phrases.iter().map(|p| p.to_string()).collect())
                })
                .collect(),
        }
    }

    pub fn insert(&mut self, text: &str, phrases: Vec<String>) {
        self.table.insert(text.to_string(), phrases);
    }
}

impl PhraseChunker for FixedChunker {
    fn phrases(&self, text: &str) -> Vec<String> {
        self.table.get(text).cloned().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_noun_and_verb_phrases() {
        let c = RuleChunker;
        let p = c.phrases("PersonX puts out a fire");
        assert!(p.contains(&"puts out".to_string()), "{p:?}");
        assert!(p.contains(&"a fire".to_string()), "{p:?}");

        let p = c.phrases("Tom went to the store to buy some milk.");
        assert!(p.contains(&"went".to_string()));
        assert!(p.contains(&"the store".to_string()));
        assert!(p.contains(&"buy".to_string()));
        assert!(p.contains(&"some milk".to_string()));
    }

    #[test]
    fn adjectives_attach_to_nouns() {
        let p = RuleChunker.phrases("She adopted a little brown dog");
        assert!(p.contains(&"adopted".to_string()));
        assert!(p.contains(&"a little brown dog".to_string()), "{p:?}");
    }

    #[test]
    fn phrases_are_substrings_modulo_normalization() {
        let text = "Jim wanted to learn Spanish. He tried taking a class!";
        let norm = normalize_phrase(&text.replace(['.', '!'], ""));
        for p in RuleChunker.phrases(text) {
            assert!(norm.contains(&p), "{p} not in {norm}");
        }
    }

    #[test]
    fn deterministic() {
        let t = "Our building had a summer bbq party today.";
        assert_eq!(RuleChunker.phrases(t), RuleChunker.phrases(t));
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize_phrase("  The   Store "), "the store");
    }
}
