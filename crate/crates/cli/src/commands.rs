//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use anyhow::{anyhow, bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use discourse_core::baselines::{build_index, knn_inferences, sentence_level_generate};
use discourse_core::corpus::{load_stories, split_corpus, truncate_to_window, LoadOptions, DEFAULT_SPLIT_RATIOS};
use discourse_core::eval::{bleu, nli_coherence, novelty, EvalCounts, EvalReport, NliDistribution};
use discourse_core::hashing::config_hash;
use discourse_core::kb::{is_header_line, load_knowledge_base, render_template, KbFormat};
use discourse_core::lm::{
    reference_tiny_lm, ConstantNli, HashedBowEmbedder, LexicalNli, LineProtocolScorer, NliClassifier, NliLabel,
    RetrievalGenerator, TextScorer, UniformScorer,
};
use discourse_core::supervision::{
    build_supervision, write_atomically, PhraseCache, SupervisionInputs, SupervisionMode, SupervisionSummary,
};
use discourse_core::{chunk::RuleChunker, Candidate, Dimension, KnowledgeBase, SilverDataset, Story};
use discourse_model::checkpoint::{self, CheckpointExtras};
use discourse_model::train::{templated_texts, EpochRecord};
use discourse_model::{build_examples, decode_story, DecodedKey, Model, Trainer, Variant, Vocabulary};

use crate::config::RunConfig;
use crate::plot::nli_bar_chart;
use crate::CliError;

/// Environment variable naming the directory for reusable caches.
pub const CACHE_DIR_ENV: &str = "DISCOURSE_CACHE_DIR";
pub const PHRASE_CACHE_FILE: &str = "phrases.json";

/// Which part of the corpus a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitSel {
    #[default]
    All,
    Train,
    Dev,
    Test,
}

/// Provenance stored in every artifact header.
pub fn provenance(command: &str, config: &RunConfig, inputs: &[(&str, &Path)]) -> serde_json::Value {
    let files: BTreeMap<&str, String> = inputs
        .iter()
        .map(|(k, p)| (*k, p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()))
        .collect();
    serde_json::json!({ "command": command, "config": config.to_json(), "inputs": files })
}

pub fn header_line(provenance: &serde_json::Value) -> String {
    let line = serde_json::json!({
        "header": { "config_hash": config_hash(provenance), "config": provenance }
    });
    serde_json::to_string(&line).expect("header serializes")
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

pub fn load_corpus(path: &Path, split: SplitSel, config: &RunConfig) -> Result<Vec<Story>, CliError> {
    let loaded = load_stories(path, LoadOptions::default()).map_err(runtime)?;
    let mut stories = loaded.stories;
    if config.window > 0 {
        stories = stories
            .iter()
            .map(|s| truncate_to_window(s, config.window))
            .collect::<Result<_, _>>()
            .map_err(runtime)?;
    }
    if split == SplitSel::All {
        return Ok(stories);
    }
    let parts = split_corpus(&stories, DEFAULT_SPLIT_RATIOS, config.seed).map_err(runtime)?;
    Ok(match split {
        SplitSel::Train => parts.train,
        SplitSel::Dev => parts.dev,
        SplitSel::Test => parts.test,
        SplitSel::All => unreachable!(),
    })
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase, CliError> {
    load_knowledge_base(path, KbFormat::from_path(path)).map_err(runtime)
}

pub struct BuildKbArgs<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
}

pub fn cmd_build_kb(args: &BuildKbArgs<'_>, config: &RunConfig) -> Result<String, CliError> {
    let kb = load_kb(args.input)?;
    let prov = provenance("build-kb", config, &[("kb", args.input)]);
    let mut text = header_line(&prov);
    text.push('\n');
    text.push_str(&kb.to_jsonl());
    write_atomically(args.output, text.as_bytes()).map_err(runtime)?;
    Ok(format!(
        "{} triples ({} unique events, {} phrases, {} skipped) -> {}",
        kb.len(),
        kb.events().len(),
        kb.phrase_index().len(),
        kb.skipped(),
        args.output.display()
    ))
}

/// A line-protocol scorer running as a child process.
struct ChildScorer {
    _child: Child,
    inner: LineProtocolScorer<BufReader<ChildStdout>, ChildStdin>,
}

impl TextScorer for ChildScorer {
    fn score_text(&self, text: &str) -> Result<f64, discourse_core::lm::LmError> {
        self.inner.score_text(text)
    }
}

fn make_scorer(config: &RunConfig, stories: &[Story]) -> Result<Box<dyn TextScorer>, CliError> {
    match config.scorer.kind.as_str() {
        "ngram" => {
            let texts: Vec<String> = stories.iter().map(|s| s.sentences.join(" ")).collect();
            Ok(Box::new(reference_tiny_lm(&texts, config.scorer.order).map_err(runtime)?))
        }
        "uniform" => Ok(Box::new(UniformScorer::new(config.scorer.vocab))),
        "command" => {
            let cmd = config
                .scorer
                .command
                .as_deref()
                .ok_or_else(|| CliError::Usage("scorer kind `command` needs scorer.command".into()))?;
            let mut child = Command::new("sh")
                .arg("-c")
                .arg(cmd)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()
                .with_context(|| format!("starting scorer `{cmd}`"))
                .map_err(CliError::Runtime)?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            Ok(Box::new(ChildScorer {
                _child: child,
                inner: LineProtocolScorer::new(BufReader::new(stdout), stdin),
            }))
        }
        other => Err(CliError::Usage(format!(
            "unknown scorer kind `{other}` (expected ngram, uniform or command)"
        ))),
    }
}

pub struct BuildSupervisionArgs<'a> {
    pub kb: &'a Path,
    pub stories: &'a Path,
    pub split: SplitSel,
    pub output: &'a Path,
}

pub fn cmd_build_supervision(
    args: &BuildSupervisionArgs<'_>,
    config: &RunConfig,
) -> Result<SupervisionSummary, CliError> {
    let kb = load_kb(args.kb)?;
    let stories = load_corpus(args.stories, args.split, config)?;
    let scorer = make_scorer(config, &stories)?;
    let generator = RetrievalGenerator::new(&kb);
    let cache_path = std::env::var_os(CACHE_DIR_ENV).map(|d| PathBuf::from(d).join(PHRASE_CACHE_FILE));
    let cache = match &cache_path {
        Some(p) => PhraseCache::load(p).map_err(runtime)?,
        None => PhraseCache::new(),
    };
    let inputs = SupervisionInputs {
        kb: &kb,
        chunker: &RuleChunker,
        generator: match config.supervision.mode {
            SupervisionMode::Heuristic => None,
            _ => Some(&generator),
        },
        scorer: scorer.as_ref(),
        cache: &cache,
    };
    let (dataset, summary) = build_supervision(&stories, &inputs, &config.supervision).map_err(|e| match e {
        discourse_core::supervision::SupervisionError::MissingGenerator(_)
        | discourse_core::supervision::SupervisionError::Config(_) => CliError::Usage(e.to_string()),
        other => runtime(other),
    })?;
    let prov = provenance("build-supervision", config, &[("kb", args.kb), ("stories", args.stories)]);
    let dataset = dataset.with_provenance(prov);
    dataset.write(args.output).map_err(runtime)?;
    let summary_path = sidecar(args.output, "summary.json");
    write_atomically(&summary_path, serde_json::to_string_pretty(&summary).expect("summary").as_bytes())
        .map_err(runtime)?;
    if let Some(p) = &cache_path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(runtime)?;
        }
        cache.save(p).map_err(runtime)?;
    }
    Ok(summary)
}

/// `<path>.<suffix>` next to `path`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub struct TrainArgs<'a> {
    pub silver: &'a Path,
    pub stories: &'a Path,
    pub split: SplitSel,
    pub output: &'a Path,
    pub resume: Option<&'a Path>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub examples: usize,
    pub parameters: usize,
    pub epochs: Vec<EpochRecord>,
    pub step: u64,
}

pub fn cmd_train(args: &TrainArgs<'_>, config: &RunConfig) -> Result<TrainReport, CliError> {
    if !args.silver.exists() {
        return Err(CliError::Runtime(anyhow!("silver file {} does not exist", args.silver.display())));
    }
    let silver = SilverDataset::read(args.silver).map_err(runtime)?;
    if silver.records.is_empty() {
        return Err(CliError::Runtime(anyhow!("{} holds no records", args.silver.display())));
    }
    let stories = load_corpus(args.stories, args.split, config)?;
    let mut trainer = match args.resume {
        Some(path) => {
            let (model, extras) = checkpoint::load(path).map_err(runtime)?;
            let state = extras.train.unwrap_or_default();
            let adam = extras
                .adam
                .ok_or_else(|| CliError::Runtime(anyhow!("{} has no optimizer state", path.display())))?;
            Trainer::resume(model, config.train.clone(), adam, state).map_err(runtime)?
        }
        None => {
            let vocab = Vocabulary::from_corpus(&stories, &templated_texts(&silver));
            let model = Model::new(config.model.clone(), vocab).map_err(|e| CliError::Usage(e.to_string()))?;
            Trainer::new(model, config.train.clone()).map_err(runtime)?
        }
    };
    let set = build_examples(&silver, &stories, &trainer.model).map_err(runtime)?;
    if set.is_empty() {
        return Err(CliError::Runtime(anyhow!("no silver record matches a loaded story")));
    }
    let prov = provenance("train", config, &[("silver", args.silver), ("stories", args.stories)]);
    let log_path = sidecar(args.output, "loss.jsonl");
    while trainer.state.epoch < trainer.config.epochs {
        trainer.run_epoch(&set).map_err(runtime)?;
        let extras = CheckpointExtras {
            train: Some(trainer.state.clone()),
            adam: Some(trainer.adam.clone()),
            extra: prov.clone(),
        };
        checkpoint::save(args.output, &trainer.model, &extras).map_err(runtime)?;
        let mut log = header_line(&prov);
        log.push('\n');
        for r in &trainer.state.loss_log {
            log.push_str(&serde_json::to_string(r).expect("record"));
            log.push('\n');
        }
        write_atomically(&log_path, log.as_bytes()).map_err(runtime)?;
    }
    if !args.output.exists() {
        // Nothing left to train (resumed at the final epoch): still emit the checkpoint.
        let extras = CheckpointExtras {
            train: Some(trainer.state.clone()),
            adam: Some(trainer.adam.clone()),
            extra: prov.clone(),
        };
        checkpoint::save(args.output, &trainer.model, &extras).map_err(runtime)?;
    }
    Ok(TrainReport {
        examples: set.len(),
        parameters: trainer.model.param_count(),
        epochs: trainer.state.loss_log.clone(),
        step: trainer.state.step,
    })
}

pub struct GenerateArgs<'a> {
    pub checkpoint: &'a Path,
    pub stories: &'a Path,
    pub split: SplitSel,
    pub output: &'a Path,
    pub variant: Option<Variant>,
}

pub fn cmd_generate(args: &GenerateArgs<'_>, config: &RunConfig) -> Result<usize, CliError> {
    let (mut model, _) = checkpoint::load(args.checkpoint).map_err(runtime)?;
    if let Some(v) = args.variant {
        model.config.variant = v;
    }
    let stories = load_corpus(args.stories, args.split, config)?;
    let beam = config.decode.beam;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(runtime)?;
    let decoded: Vec<Vec<DecodedKey>> = pool
        .install(|| stories.par_iter().map(|s| decode_story(&model, s, beam)).collect::<Result<_, _>>())
        .map_err(runtime)?;
    let mut prov = provenance("generate", config, &[("checkpoint", args.checkpoint), ("stories", args.stories)]);
    prov["model"] = serde_json::to_value(&model.config).expect("model config");
    let mut text = header_line(&prov);
    text.push('\n');
    let mut n = 0;
    for key in decoded.iter().flatten() {
        text.push_str(&serde_json::to_string(key).expect("record"));
        text.push('\n');
        n += 1;
    }
    write_atomically(args.output, text.as_bytes()).map_err(runtime)?;
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineMethod {
    Knn,
    Sentgen,
}

pub struct BaselineArgs<'a> {
    pub method: BaselineMethod,
    pub kb: &'a Path,
    pub stories: &'a Path,
    pub split: SplitSel,
    pub output: &'a Path,
}

pub fn cmd_baseline(args: &BaselineArgs<'_>, config: &RunConfig) -> Result<usize, CliError> {
    let kb = load_kb(args.kb)?;
    let stories = load_corpus(args.stories, args.split, config)?;
    let mut records: Vec<Candidate> = Vec::new();
    match args.method {
        BaselineMethod::Knn => {
            let embedder = HashedBowEmbedder::new(config.baseline.embedding_dim);
            let index = build_index(&kb, &embedder).map_err(runtime)?;
            for s in &stories {
                for i in 0..s.len() {
                    records.extend(knn_inferences(s, i, &index, &kb, &embedder, config.baseline.k).map_err(runtime)?);
                }
            }
        }
        BaselineMethod::Sentgen => {
            let generator = RetrievalGenerator::new(&kb);
            for s in &stories {
                let (c, failures) = sentence_level_generate(s, &generator, config.baseline.beam);
                if failures > 0 {
                    log::warn!("{}: {failures} dimensions failed", s.id);
                }
                records.extend(c);
            }
        }
    }
    let method = match args.method {
        BaselineMethod::Knn => "knn",
        BaselineMethod::Sentgen => "sentgen",
    };
    let mut prov = provenance("baseline", config, &[("kb", args.kb), ("stories", args.stories)]);
    prov["method"] = method.into();
    let n = records.len();
    SilverDataset::new(records, prov).write(args.output).map_err(runtime)?;
    Ok(n)
}

type Key = (String, usize, Dimension);

/// Ranked inference texts per key from a decode-output or candidate file.
pub fn read_inferences(path: &Path) -> Result<BTreeMap<Key, Vec<String>>, CliError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Line {
        Decoded(DecodedKey),
        Candidate(Candidate),
    }
    let file = File::open(path).with_context(|| format!("opening {}", path.display())).map_err(CliError::Runtime)?;
    let mut ranked: BTreeMap<Key, Vec<(usize, usize, String)>> = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() || is_header_line(&line) {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: unrecognized record", path.display(), n + 1))
            .map_err(CliError::Runtime)?;
        match parsed {
            Line::Decoded(d) => {
                let entry = ranked.entry((d.story_id, d.sentence_idx, d.dimension)).or_default();
                entry.extend(d.beam.into_iter().enumerate().map(|(r, t)| (r, n, t)));
            }
            Line::Candidate(c) => {
                let rank = c.rank.unwrap_or(usize::MAX);
                ranked
                    .entry((c.story_id, c.sentence_idx, c.dimension))
                    .or_default()
                    .push((rank, n, c.inference));
            }
        }
    }
    Ok(ranked
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by_key(|(r, n, _)| (*r, *n));
            (k, v.into_iter().map(|(_, _, t)| t).collect())
        })
        .collect())
}

fn make_nli(spec: &str) -> Result<Box<dyn NliClassifier>, CliError> {
    if spec == "lexical" {
        return Ok(Box::new(LexicalNli));
    }
    if let Some(label) = spec.strip_prefix("constant:") {
        let label = NliLabel::ALL
            .into_iter()
            .find(|l| l.to_string() == label)
            .ok_or_else(|| CliError::Usage(format!("unknown NLI label `{label}`")))?;
        return Ok(Box::new(ConstantNli(label)));
    }
    Err(CliError::Usage(format!(
        "unknown NLI classifier `{spec}` (expected lexical or constant:<label>)"
    )))
}

pub struct EvaluateArgs<'a> {
    pub inferences: &'a Path,
    pub gold: &'a Path,
    pub kb: &'a Path,
    pub stories: &'a Path,
    pub output: &'a Path,
    pub plot: Option<&'a Path>,
}

pub fn cmd_evaluate(args: &EvaluateArgs<'_>, config: &RunConfig) -> Result<EvalReport, CliError> {
    let nli = make_nli(&config.eval.nli)?;
    let hyps = read_inferences(args.inferences)?;
    let gold = read_inferences(args.gold)?;
    let kb = load_kb(args.kb)?;
    let stories = load_corpus(args.stories, SplitSel::All, config)?;
    if hyps.is_empty() {
        return Err(CliError::Runtime(anyhow!("{} holds no inferences", args.inferences.display())));
    }
    let templated = |m: &BTreeMap<Key, Vec<String>>| -> BTreeMap<Key, Vec<String>> {
        m.iter()
            .map(|(k, v)| {
                let t = v.iter().filter_map(|x| render_template(k.2, x).ok()).collect();
                (k.clone(), t)
            })
            .collect()
    };
    let (th, tg) = (templated(&hyps), templated(&gold));
    let b1 = bleu(&th, &tg, 1).map_err(runtime)?;
    let b2 = bleu(&th, &tg, 2).map_err(runtime)?;

    let generated: Vec<(Dimension, String)> = hyps
        .iter()
        .flat_map(|(k, v)| v.iter().map(move |t| (k.2, t.clone())))
        .collect();
    let nov = novelty(&generated, &kb, config.eval.novelty_threshold, config.eval.include_heads).map_err(runtime)?;

    let by_id: BTreeMap<&str, &Story> = stories.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut dist = NliDistribution::default();
    let mut missing = 0;
    for ((story_id, i, d), texts) in &hyps {
        let (Some(story), Some(top)) = (by_id.get(story_id.as_str()), texts.first()) else {
            missing += 1;
            continue;
        };
        let c = Candidate {
            story_id: story_id.clone(),
            sentence_idx: *i,
            dimension: *d,
            inference: top.clone(),
            source: discourse_core::Source::Model,
            match_score: None,
            rank: Some(0),
            coherence_ce: None,
        };
        dist.merge(&nli_coherence(story, &[c], nli.as_ref()));
    }
    if missing > 0 {
        log::warn!("{missing} keys have no matching story and were left out of NLI");
    }
    let prov = provenance(
        "evaluate",
        config,
        &[("inferences", args.inferences), ("gold", args.gold), ("kb", args.kb), ("stories", args.stories)],
    );
    let report = EvalReport {
        config_hash: config_hash(&prov),
        bleu1: b1.score,
        bleu2: b2.score,
        novelty_pct: nov.novelty_pct,
        nli_pct: dist.percentages(),
        counts: EvalCounts {
            keys: hyps.len(),
            hypotheses: generated.len(),
            skipped_keys: b1.skipped_keys,
            novelty_items: nov.total,
            nli_items: dist.total(),
            nli_pair_failures: dist.pair_failures,
        },
        config: prov,
    };
    write_atomically(args.output, serde_json::to_string_pretty(&report).expect("report").as_bytes())
        .map_err(runtime)?;
    if let Some(plot) = args.plot {
        nli_bar_chart(&report.nli_pct, plot).map_err(runtime)?;
    }
    Ok(report)
}

/// Reads the header of an artifact written by this tool.
pub fn read_header(path: &Path) -> anyhow::Result<serde_json::Value> {
    let file = File::open(path)?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first)?;
    let v: serde_json::Value = serde_json::from_str(&first)?;
    match v.get("header") {
        Some(h) => Ok(h.clone()),
        None => bail!("{} has no header line", path.display()),
    }
}
