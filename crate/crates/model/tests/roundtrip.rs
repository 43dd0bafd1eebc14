use discourse_core::synthetic::synthetic_stories;
use discourse_core::{Candidate, Dimension, SilverDataset, Source};
use discourse_model::checkpoint::{self, CheckpointExtras};
use discourse_model::train::templated_texts;
use discourse_model::{build_examples, decode_story, Model, ModelConfig, TrainConfig, Trainer, Variant, Vocabulary};

fn silver() -> (SilverDataset, Vec<discourse_core::Story>) {
    let stories = synthetic_stories(3, 9);
    let mut records = Vec::new();
    for s in &stories {
        for i in 0..s.len() {
            for (d, text) in [(Dimension::XWant, "to rest"), (Dimension::XReact, "happy")] {
                records.push(Candidate {
                    story_id: s.id.clone(),
                    sentence_idx: i,
                    dimension: d,
                    inference: text.into(),
                    source: Source::Heuristic,
                    match_score: None,
                    rank: Some(0),
                    coherence_ce: Some(1.0),
                });
            }
        }
    }
    (SilverDataset::new(records, serde_json::Value::Null), stories)
}

fn config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        layers: 1,
        max_decode: 6,
        ..ModelConfig::tiny()
    }
}

#[test]
fn trained_model_survives_checkpointing() {
    let (silver, stories) = silver();
    let vocab = Vocabulary::from_corpus(&stories, &templated_texts(&silver));
    let model = Model::new(config(), vocab).unwrap();
    let set = build_examples(&silver, &stories, &model).unwrap();
    assert_eq!(set.len(), silver.records.len());
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            warmup_steps: 0,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let log = trainer.train(&set).unwrap().to_vec();
    assert_eq!(log.len(), 3);
    assert!(log[2].loss < log[0].loss);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let extras = CheckpointExtras {
        train: Some(trainer.state.clone()),
        adam: Some(trainer.adam.clone()),
        extra: serde_json::json!({"note": "test"}),
    };
    checkpoint::save(&path, &trainer.model, &extras).unwrap();
    let (loaded, back) = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params(), trainer.model.params());
    assert_eq!(back.train.unwrap().step, trainer.state.step);
    assert_eq!(
        decode_story(&loaded, &stories[0], 2).unwrap(),
        decode_story(&trainer.model, &stories[0], 2).unwrap()
    );
}

#[test]
fn memoryless_variant_ignores_training_memory() {
    let (silver, stories) = silver();
    let vocab = Vocabulary::from_corpus(&stories, &templated_texts(&silver));
    let mut cfg = config();
    cfg.variant = Variant::Memoryless;
    let plain = Model::new(cfg, vocab.clone()).unwrap();
    let mut mem = Model::new(config(), vocab).unwrap();
    mem.zero_projection();
    let set = build_examples(&silver, &stories, &mem).unwrap();
    let idx: Vec<usize> = (0..set.len()).collect();
    let a = discourse_model::train::group_gradients(&plain, &set, &idx, 4).unwrap().0;
    let b = discourse_model::train::group_gradients(&mem, &set, &idx, 4).unwrap().0;
    assert_eq!(a.to_bits(), b.to_bits());
}
