//! Narrative corpora: loading, train/dev/test splitting and window truncation.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_STORY_LENGTH: usize = 5;
pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.90, 0.05, 0.05);

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read stories from {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no valid stories in {path} ({skipped} rows skipped)")]
    Empty { path: String, skipped: usize },
    #[error("split ratios must sum to 1, got {0}")]
    BadRatios(f64),
    #[error("cannot split an empty corpus")]
    NothingToSplit,
    #[error("window size must be positive")]
    ZeroWindow,
}

/// An ordered list of narrative sentences with a stable identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    pub sentences: Vec<String>,
}

impl Story {
    pub fn new(id: impl Into<String>, sentences: Vec<String>) -> Self {
        Story {
            id: id.into(),
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// How `load_stories` validates story length.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Reject stories whose length differs from this value.
    pub exact_length: Option<usize>,
    /// Reject stories longer than this (ignored when `exact_length` is set).
    pub max_length: Option<usize>,
}

impl LoadOptions {
    pub fn strict(n: usize) -> Self {
        LoadOptions {
            exact_length: Some(n),
            max_length: None,
        }
    }

    fn accepts(&self, story: &Story) -> bool {
        if story.sentences.is_empty() || story.sentences.iter().any(|s| s.trim().is_empty()) {
            return false;
        }
        match (self.exact_length, self.max_length) {
            (Some(n), _) => story.len() == n,
            (None, Some(max)) => story.len() <= max,
            (None, None) => true,
        }
    }
}

/// Stories plus the number of input rows that were rejected.
#[derive(Debug, Clone)]
pub struct LoadedStories {
    pub stories: Vec<Story>,
    pub skipped: usize,
}

/// Splits running text into sentences.
pub trait SentenceSplitter: Send + Sync {
    fn split(&self, text: &str) -> Vec<String>;
}

/// Splits after `.`, `?` or `!` followed by whitespace, unless the word
/// carrying the period is a known abbreviation.
#[derive(Debug, Clone)]
pub struct RuleSentenceSplitter {
    abbreviations: Vec<&'static str>,
}

impl Default for RuleSentenceSplitter {
    fn default() -> Self {
        RuleSentenceSplitter {
            abbreviations: vec![
                "mr.", "mrs.", "ms.", "dr.", "st.", "jr.", "sr.", "prof.", "vs.", "etc.", "e.g.",
                "i.e.", "u.s.", "mt.", "no.",
            ],
        }
    }
}

impl SentenceSplitter for RuleSentenceSplitter {
    fn split(&self, text: &str) -> Vec<String> {
        let mut sentences = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        for word in text.split_whitespace() {
            current.push(word);
            let ends = word.ends_with(['.', '?', '!'])
                || word.ends_with(".\"")
                || word.ends_with("?\"")
                || word.ends_with("!\"");
            let abbreviation = self.abbreviations.contains(&word.to_lowercase().as_str());
            if ends && !abbreviation {
                sentences.push(current.join(" "));
                current.clear();
            }
        }
        if !current.is_empty() {
            sentences.push(current.join(" "));
        }
        sentences
    }
}

/// Loads stories from JSONL (`{"id", "sentences": [...]}`), CSV (an id
/// column plus `sentence1..N` columns) or plain text (one story per line,
/// `id<TAB>text` or bare text, sentence-split with the rule splitter).
pub fn load_stories(path: &Path, options: LoadOptions) -> Result<LoadedStories, CorpusError> {
    load_stories_with(path, options, &RuleSentenceSplitter::default())
}

pub fn load_stories_with(
    path: &Path,
    options: LoadOptions,
    splitter: &dyn SentenceSplitter,
) -> Result<LoadedStories, CorpusError> {
    let display = path.display().to_string();
    let io_err = |source| CorpusError::Io {
        path: display.clone(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let (raw, mut skipped) = match ext {
        "jsonl" | "json" => read_jsonl(BufReader::new(file)).map_err(io_err)?,
        "csv" => read_csv(file),
        _ => read_plain(BufReader::new(file), splitter).map_err(io_err)?,
    };
    let mut stories = Vec::with_capacity(raw.len());
    for story in raw {
        if options.accepts(&story) {
            stories.push(story);
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("{display}: skipped {skipped} malformed stories");
    }
    if stories.is_empty() {
        return Err(CorpusError::Empty {
            path: display,
            skipped,
        });
    }
    Ok(LoadedStories { stories, skipped })
}

fn read_jsonl(reader: impl BufRead) -> std::io::Result<(Vec<Story>, usize)> {
    let mut stories = Vec::new();
    let mut skipped = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let Some(obj) = value.as_object() else {
            skipped += 1;
            continue;
        };
        for key in obj.keys() {
            if key != "id" && key != "sentences" {
                log::warn!("ignoring unknown story field `{key}`");
            }
        }
        let id = obj.get("id").and_then(|v| match v {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Number(n) => Some(n.to_string()),
            _ => None,
        });
        let sentences = obj.get("sentences").and_then(|v| v.as_array()).and_then(|arr| {
            arr.iter()
                .map(|s| s.as_str().map(|s| s.trim().to_string()))
                .collect::<Option<Vec<_>>>()
        });
        match (id, sentences) {
            (Some(id), Some(sentences)) => stories.push(Story::new(id, sentences)),
            _ => skipped += 1,
        }
    }
    Ok((stories, skipped))
}

fn read_csv(file: File) -> (Vec<Story>, usize) {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(_) => return (Vec::new(), 0),
    };
    let id_col = headers
        .iter()
        .position(|h| matches!(h.to_lowercase().as_str(), "id" | "storyid" | "story_id"));
    let mut sentence_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.to_lowercase()
                .strip_prefix("sentence")
                .and_then(|n| n.parse::<usize>().ok())
                .map(|n| (n, i))
        })
        .collect();
    sentence_cols.sort();
    let mut stories = Vec::new();
    let mut skipped = 0;
    for (row_idx, record) in reader.records().enumerate() {
        let Ok(record) = record else {
            skipped += 1;
            continue;
        };
        let id = id_col
            .and_then(|c| record.get(c))
            .map(str::to_string)
            .unwrap_or_else(|| format!("row{row_idx}"));
        let sentences: Vec<String> = sentence_cols
            .iter()
            .filter_map(|&(_, c)| record.get(c))
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        stories.push(Story::new(id, sentences));
    }
    (stories, skipped)
}

fn read_plain(
    reader: impl BufRead,
    splitter: &dyn SentenceSplitter,
) -> std::io::Result<(Vec<Story>, usize)> {
    let mut stories = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = match line.split_once('\t') {
            Some((id, text)) => (id.trim().to_string(), text),
            None => (format!("line{i}"), line.as_str()),
        };
        stories.push(Story::new(id, splitter.split(text)));
    }
    Ok((stories, 0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Story>,
    pub dev: Vec<Story>,
    pub test: Vec<Story>,
    pub seed: u64,
}

/// Seeded shuffle followed by contiguous slicing into train/dev/test.
/// Dev and test get `floor(n * ratio)` stories; the remainder goes to train.
pub fn split_corpus(
    stories: &[Story],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if (total - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(CorpusError::BadRatios(total));
    }
    if stories.is_empty() {
        return Err(CorpusError::NothingToSplit);
    }
    let n = stories.len();
    // The epsilon absorbs products such as 0.05 * 60 landing just below an integer.
    let portion = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_dev = portion(ratios.1);
    let n_test = portion(ratios.2);
    let n_train = n - n_dev - n_test;

    let mut shuffled = stories.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train + n_dev);
    let dev = shuffled.split_off(n_train);
    Ok(CorpusSplit {
        train: shuffled,
        dev,
        test,
        seed,
    })
}

/// Keeps the first `window` sentences.
pub fn truncate_to_window(story: &Story, window: usize) -> Result<Story, CorpusError> {
    if window == 0 {
        return Err(CorpusError::ZeroWindow);
    }
    let mut out = story.clone();
    out.sentences.truncate(window);
    Ok(out)
}
