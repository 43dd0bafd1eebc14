//! Small deterministic fixture: stories built from five everyday events and
//! a 20-triple knowledge base about the same events.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chunk::RuleChunker;
use crate::corpus::Story;
use crate::kb::{AtomicTriple, Dimension, KnowledgeBase};

struct Event {
    head: &'static str,
    sentence: &'static str,
    triples: [(Dimension, &'static str); 4],
}

const EVENTS: [Event; 5] = [
    Event {
        head: "PersonX goes to the store",
        sentence: "{} went to the store.",
        triples: [
            (Dimension::XIntent, "to buy food"),
            (Dimension::XNeed, "to find the car keys"),
            (Dimension::XEffect, "buys groceries"),
            (Dimension::XWant, "to go home"),
        ],
    },
    Event {
        head: "PersonX bakes a cake",
        sentence: "{} baked a cake for the party.",
        triples: [
            (Dimension::XIntent, "to celebrate"),
            (Dimension::XAttr, "skilled"),
            (Dimension::XReact, "proud"),
            (Dimension::OReact, "happy"),
        ],
    },
    Event {
        head: "PersonX walks the dog",
        sentence: "{} walked the dog in the park.",
        triples: [
            (Dimension::XNeed, "a leash"),
            (Dimension::XEffect, "gets exercise"),
            (Dimension::XReact, "relaxed"),
            (Dimension::OWant, "to play"),
        ],
    },
    Event {
        head: "PersonX reads a book",
        sentence: "{} read a book at night.",
        triples: [
            (Dimension::XIntent, "to learn"),
            (Dimension::XAttr, "curious"),
            (Dimension::XEffect, "falls asleep"),
            (Dimension::XWant, "to read more"),
        ],
    },
    Event {
        head: "PersonX cleans the house",
        sentence: "{} cleaned the house.",
        triples: [
            (Dimension::XNeed, "soap"),
            (Dimension::XReact, "tired"),
            (Dimension::OEffect, "has a clean home"),
            (Dimension::OReact, "grateful"),
        ],
    },
];

const NAMES: [&str; 6] = ["Tom", "Anna", "Jim", "Kate", "Sam", "Lucy"];

/// The 20-triple KB, phrase-indexed with [`RuleChunker`].
pub fn synthetic_kb() -> KnowledgeBase {
    let triples = EVENTS
        .iter()
        .flat_map(|e| {
            e.triples
                .iter()
                .map(|&(d, t)| AtomicTriple::new(e.head, d, t).expect("fixture triple is valid"))
        })
        .collect();
    KnowledgeBase::from_triples(triples).with_phrase_index(&RuleChunker)
}

/// `n` five-sentence stories. Each story has one protagonist and visits the
/// five events in a seeded random order.
pub fn synthetic_stories(n: usize, seed: u64) -> Vec<Story> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let name = NAMES.choose(&mut rng).expect("names");
            let mut order: Vec<usize> = (0..EVENTS.len()).collect();
            order.shuffle(&mut rng);
            let sentences = order
                .into_iter()
                .map(|e| EVENTS[e].sentence.replace("{}", name))
                .collect();
            Story::new(format!("syn{k:03}"), sentences)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::{heuristic_candidates, PhraseCache};

    #[test]
    fn sizes_and_determinism() {
        assert_eq!(synthetic_kb().len(), 20);
        let a = synthetic_stories(50, 7);
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|s| s.len() == 5));
        assert_eq!(a, synthetic_stories(50, 7));
        assert_ne!(a, synthetic_stories(50, 8));
    }

    #[test]
    fn every_sentence_matches_its_event() {
        let kb = synthetic_kb();
        let cache = PhraseCache::new();
        for story in synthetic_stories(5, 1) {
            for i in 0..5 {
                let c = heuristic_candidates(&story, i, &kb, &RuleChunker, 10, &cache);
                assert!(c.len() >= 4, "{:?} -> {c:?}", story.sentences[i]);
            }
        }
    }
}
