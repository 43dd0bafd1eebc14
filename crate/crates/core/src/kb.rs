//! If-then commonsense knowledge base: triples of `<event, dimension, inference>`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunk::{normalize_phrase, PhraseChunker};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read knowledge base {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("knowledge base {path} has no valid records ({skipped} skipped)")]
    NoValidRecords { path: String, skipped: usize },
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("inference text is empty")]
    EmptyTail,
}

/// Whether a dimension describes what precedes an event or what follows it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimensionGroup {
    Cause,
    Effect,
}

/// The nine inferential dimensions. Declaration order is the canonical
/// enumeration order used everywhere a fixed order matters (decoding,
/// output sorting).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    #[serde(rename = "xIntent")]
    XIntent,
    #[serde(rename = "xNeed")]
    XNeed,
    #[serde(rename = "xAttr")]
    XAttr,
    #[serde(rename = "xEffect")]
    XEffect,
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "xReact")]
    XReact,
    #[serde(rename = "oEffect")]
    OEffect,
    #[serde(rename = "oWant")]
    OWant,
    #[serde(rename = "oReact")]
    OReact,
}

impl Dimension {
    pub const ALL: [Dimension; 9] = [
        Dimension::XIntent,
        Dimension::XNeed,
        Dimension::XAttr,
        Dimension::XEffect,
        Dimension::XWant,
        Dimension::XReact,
        Dimension::OEffect,
        Dimension::OWant,
        Dimension::OReact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::XIntent => "xIntent",
            Dimension::XNeed => "xNeed",
            Dimension::XAttr => "xAttr",
            Dimension::XEffect => "xEffect",
            Dimension::XWant => "xWant",
            Dimension::XReact => "xReact",
            Dimension::OEffect => "oEffect",
            Dimension::OWant => "oWant",
            Dimension::OReact => "oReact",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn group(self) -> DimensionGroup {
        match self {
            Dimension::XNeed | Dimension::XIntent | Dimension::XAttr => DimensionGroup::Cause,
            _ => DimensionGroup::Effect,
        }
    }

    /// Control token naming this dimension, e.g. `<|xWant|>`.
    pub fn control_token(self) -> String {
        format!("<|{}|>", self.name())
    }

    /// Natural-language prefix placed in front of an inference.
    pub fn template(self) -> &'static str {
        match self {
            Dimension::XIntent => "PersonX wanted: ",
            Dimension::XNeed => "PersonX needed: ",
            Dimension::XAttr => "PersonX is seen as: ",
            Dimension::XEffect => "PersonX is likely: ",
            Dimension::XWant => "PersonX wants: ",
            Dimension::XReact => "PersonX then feels: ",
            Dimension::OEffect => "PersonY is likely: ",
            Dimension::OWant => "PersonY wants: ",
            Dimension::OReact => "Others then feel: ",
        }
    }

    /// Declarative subject + verb used when rewriting an inference into a
    /// plain sentence for an entailment classifier.
    fn declarative_prefix(self) -> &'static str {
        match self {
            Dimension::XIntent => "they want",
            Dimension::XNeed => "they need",
            Dimension::XAttr => "they are seen as",
            Dimension::XEffect => "they are likely",
            Dimension::XWant => "they want",
            Dimension::XReact => "they then feel",
            Dimension::OEffect => "others are likely",
            Dimension::OWant => "others want",
            Dimension::OReact => "others then feel",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dimension {
    type Err = KbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dimension::ALL
            .iter()
            .copied()
            .find(|d| d.name() == s.trim())
            .ok_or_else(|| KbError::UnknownDimension(s.to_string()))
    }
}

/// Per-dimension template prefixes. The default table holds the standard
/// nine strings; other knowledge bases can substitute their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateTable {
    templates: BTreeMap<Dimension, String>,
}

impl Default for TemplateTable {
    fn default() -> Self {
        TemplateTable {
            templates: Dimension::ALL
                .iter()
                .map(|&d| (d, d.template().to_string()))
                .collect(),
        }
    }
}

impl TemplateTable {
    /// Replaces the template of one dimension. The stored prefix is forced to
    /// end in `": "` so rendering keeps the one-space-after-colon shape.
    pub fn set(&mut self, dimension: Dimension, template: &str) {
        let stem = template.trim_end().trim_end_matches(':').trim_end();
        self.templates.insert(dimension, format!("{stem}: "));
    }

    pub fn get(&self, dimension: Dimension) -> &str {
        &self.templates[&dimension]
    }

    pub fn render(&self, dimension: Dimension, tail: &str) -> Result<String, KbError> {
        let tail = tail.trim();
        if tail.is_empty() {
            return Err(KbError::EmptyTail);
        }
        Ok(format!("{}{}", self.get(dimension), tail))
    }

    /// Removes this dimension's template from the front of `text`, if present.
    pub fn strip<'a>(&self, dimension: Dimension, text: &'a str) -> &'a str {
        let template = self.get(dimension);
        text.strip_prefix(template)
            .or_else(|| text.strip_prefix(template.trim_end()))
            .map(str::trim_start)
            .unwrap_or(text)
    }
}

/// `template ++ tail` using the default template table.
pub fn render_template(dimension: Dimension, tail: &str) -> Result<String, KbError> {
    TemplateTable::default().render(dimension, tail)
}

/// Rewrites a templated inference into a lowercase declarative sentence:
/// the colon is dropped, the template verb is put into a plain present
/// form, `PersonX` becomes "they" (and `PersonY` "others"), and a final
/// period is ensured.
pub fn normalize_for_nli(dimension: Dimension, tail: &str) -> Result<String, KbError> {
    let tail = tail.trim();
    if tail.is_empty() {
        return Err(KbError::EmptyTail);
    }
    let lowered = tail.to_lowercase().replace(':', " ");
    let mut words: Vec<String> = Vec::new();
    for word in lowered.split_whitespace() {
        words.push(replace_person_variable(word));
    }
    let mut out = String::from(dimension.declarative_prefix());
    if !words.is_empty() {
        out.push(' ');
        out.push_str(&words.join(" "));
    }
    // Catches variables glued to other characters that survived tokenization.
    let mut out = out.replace("personx", "they").replace("persony", "others");
    if !out.ends_with('.') {
        out.push('.');
    }
    Ok(out)
}

fn replace_person_variable(word: &str) -> String {
    let core = word.trim_end_matches(|c: char| c.is_ascii_punctuation());
    let trailing = &word[core.len()..];
    let replaced = match core {
        "personx" => "they",
        "personx's" | "personx’s" => "their",
        "persony" => "others",
        "persony's" | "persony’s" => "others'",
        _ => return word.to_string(),
    };
    format!("{replaced}{trailing}")
}

/// One knowledge entry `<head_event, dimension, tail_inference>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicTriple {
    pub head: String,
    #[serde(rename = "dim")]
    pub dimension: Dimension,
    pub tail: String,
}

impl AtomicTriple {
    pub fn new(head: &str, dimension: Dimension, tail: &str) -> Option<Self> {
        let (head, tail) = (head.trim(), tail.trim());
        if head.is_empty() || tail.is_empty() {
            return None;
        }
        Some(AtomicTriple {
            head: head.to_string(),
            dimension,
            tail: tail.to_string(),
        })
    }

    /// "none" tails stay in the KB but are left out of metric reference sets.
    pub fn is_none_tail(&self) -> bool {
        is_none_text(&self.tail)
    }
}

pub fn is_none_text(text: &str) -> bool {
    text.trim().eq_ignore_ascii_case("none")
}

pub type PhraseIndex = BTreeMap<String, Vec<usize>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KbFormat {
    Tsv,
    Jsonl,
}

impl KbFormat {
    /// Guesses the format from the file extension; anything that is not
    /// `.jsonl`/`.json` is read as TSV.
    pub fn from_path(path: &Path) -> KbFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => KbFormat::Jsonl,
            _ => KbFormat::Tsv,
        }
    }
}

impl FromStr for KbFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(KbFormat::Tsv),
            "jsonl" => Ok(KbFormat::Jsonl),
            other => Err(format!("unknown knowledge base format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    triples: Vec<AtomicTriple>,
    phrase_index: PhraseIndex,
    events: IndexSet<String>,
    skipped: usize,
}

impl KnowledgeBase {
    /// Builds a KB with an empty phrase index; use [`KnowledgeBase::with_phrase_index`]
    /// or [`index_phrases`] to attach one.
    pub fn from_triples(triples: Vec<AtomicTriple>) -> Self {
        let events = triples.iter().map(|t| t.head.clone()).collect();
        KnowledgeBase {
            triples,
            phrase_index: PhraseIndex::new(),
            events,
            skipped: 0,
        }
    }

    pub fn with_phrase_index(mut self, chunker: &dyn PhraseChunker) -> Self {
        self.phrase_index = index_phrases(&self, chunker);
        self
    }

    pub fn triples(&self) -> &[AtomicTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn phrase_index(&self) -> &PhraseIndex {
        &self.phrase_index
    }

    /// Unique head events in first-occurrence order.
    pub fn events(&self) -> &IndexSet<String> {
        &self.events
    }

    /// Records dropped at load time because of an unknown dimension or empty field.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn triples_with_head<'a>(&'a self, head: &'a str) -> impl Iterator<Item = (usize, &'a AtomicTriple)> + 'a {
        self.triples
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.head == head)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&serde_json::to_string(t).expect("triple serializes"));
            out.push('\n');
        }
        out
    }
}

/// Maps every normalized noun/verb phrase of every head event to the indices
/// of the triples whose head contains it, in KB order.
pub fn index_phrases(kb: &KnowledgeBase, chunker: &dyn PhraseChunker) -> PhraseIndex {
    let mut index = PhraseIndex::new();
    let mut head_phrases: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (i, triple) in kb.triples.iter().enumerate() {
        let phrases = head_phrases
            .entry(triple.head.as_str())
            .or_insert_with(|| {
                let mut ps: Vec<String> = chunker
                    .phrases(&triple.head)
                    .iter()
                    .map(|p| normalize_phrase(p))
                    .filter(|p| !p.is_empty())
                    .collect();
                ps.sort();
                ps.dedup();
                ps
            });
        for phrase in phrases.iter() {
            index.entry(phrase.clone()).or_default().push(i);
        }
    }
    index
}

/// True for a `{"header": ...}` provenance line.
pub fn is_header_line(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .map(|v| v.get("header").is_some() && v.get("head").is_none())
        .unwrap_or(false)
}

#[derive(Deserialize)]
struct JsonRecord {
    head: String,
    dim: String,
    tail: String,
}

/// Reads a TSV (`head\tdim\ttail`, no header) or JSONL (`{"head","dim","tail"}`)
/// knowledge base and indexes it with the default rule-based chunker.
pub fn load_knowledge_base(path: &Path, format: KbFormat) -> Result<KnowledgeBase, KbError> {
    load_knowledge_base_with(path, format, &crate::chunk::RuleChunker)
}

pub fn load_knowledge_base_with(
    path: &Path,
    format: KbFormat,
    chunker: &dyn PhraseChunker,
) -> Result<KnowledgeBase, KbError> {
    let display = path.display().to_string();
    let io_err = |source| KbError::Io {
        path: display.clone(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut triples = Vec::new();
    let mut skipped = 0usize;
    for line in reader.lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() || (format == KbFormat::Jsonl && is_header_line(&line)) {
            continue;
        }
        let fields = match format {
            KbFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() == 3 {
                    Some((cols[0].to_string(), cols[1].to_string(), cols[2].to_string()))
                } else {
                    None
                }
            }
            KbFormat::Jsonl => serde_json::from_str::<JsonRecord>(&line)
                .ok()
                .map(|r| (r.head, r.dim, r.tail)),
        };
        let triple = fields.and_then(|(head, dim, tail)| {
            let dimension = dim.parse::<Dimension>().ok()?;
            AtomicTriple::new(&head, dimension, &tail)
        });
        match triple {
            Some(t) => triples.push(t),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{display}: skipped {skipped} malformed or unknown-dimension records");
    }
    if triples.is_empty() {
        return Err(KbError::NoValidRecords {
            path: display,
            skipped,
        });
    }
    let mut kb = KnowledgeBase::from_triples(triples).with_phrase_index(chunker);
    kb.skipped = skipped;
    Ok(kb)
}
