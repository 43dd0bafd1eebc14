//! Versioned binary checkpoint: magic, version, JSON header, then
//! little-endian `f64` parameter data and optional Adam moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use discourse_core::hashing::config_hash;

use crate::config::ModelConfig;
use crate::model::{Model, ParamInfo};
use crate::train::{Adam, TrainState};
use crate::vocab::Vocabulary;
use crate::ModelError;

const MAGIC: &[u8; 8] = b"DSCMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    config: ModelConfig,
    vocab: Vocabulary,
    params: Vec<ParamInfo>,
    train: Option<TrainState>,
    adam: Option<Adam>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// What a checkpoint holds besides the model.
#[derive(Debug, Clone, Default)]
pub struct CheckpointExtras {
    pub train: Option<TrainState>,
    pub adam: Option<Adam>,
    /// Free-form provenance stored in the header.
    pub extra: serde_json::Value,
}

pub fn model_hash(config: &ModelConfig) -> String {
    config_hash(config)
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_array(w: &mut impl Write, a: &Array2<f64>) -> std::io::Result<()> {
    for v in a.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read, shape: (usize, usize)) -> std::io::Result<Array2<f64>> {
    let mut buf = vec![0u8; shape.0 * shape.1 * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Array2::from_shape_vec(shape, data).expect("shape matches length"))
}

pub fn save(path: &Path, model: &Model, extras: &CheckpointExtras) -> Result<(), ModelError> {
    let header = Header {
        config_hash: model_hash(&model.config),
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        params: model.param_info().to_vec(),
        train: extras.train.clone(),
        adam: extras.adam.clone(),
        extra: extras.extra.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let tmp = path.with_extension("partial");
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in model.params() {
            write_array(&mut w, p)?;
        }
        if let Some(adam) = &extras.adam {
            for a in adam.m.iter().chain(&adam.v) {
                write_array(&mut w, a)?;
            }
        }
        w.flush()?;
        drop(w);
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io(path))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointExtras), ModelError> {
    let err = io(path);
    let mut r = BufReader::new(File::open(path).map_err(&err)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(&err)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(&err)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(&err)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(&err)?;
    let mut header: Header =
        serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    if header.config_hash != model_hash(&header.config) {
        return Err(ModelError::Checkpoint("config hash does not match the stored config".into()));
    }
    let params = header
        .params
        .iter()
        .map(|p| read_array(&mut r, p.shape))
        .collect::<Result<Vec<_>, _>>()
        .map_err(&err)?;
    if let Some(adam) = header.adam.as_mut() {
        let mut read_all = || {
            header
                .params
                .iter()
                .map(|p| read_array(&mut r, p.shape))
                .collect::<Result<Vec<_>, _>>()
        };
        adam.m = read_all().map_err(&err)?;
        adam.v = read_all().map_err(&err)?;
    }
    let model = Model::from_parts(header.config, header.vocab, params)?;
    if model.param_info() != header.params.as_slice() {
        return Err(ModelError::Checkpoint("parameter layout does not match the config".into()));
    }
    Ok((
        model,
        CheckpointExtras {
            train: header.train,
            adam: header.adam,
            extra: header.extra,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochRecord;

    fn model() -> Model {
        let vocab = Vocabulary::build(["a b c"], 5);
        Model::new(ModelConfig::tiny(), vocab).unwrap()
    }

    #[test]
    fn roundtrip_with_optimizer_state() {
        let m = model();
        let mut adam = Adam::new(m.params());
        adam.t = 7;
        adam.m[0][[0, 0]] = 0.25;
        adam.v[3][[0, 1]] = 1.5;
        let extras = CheckpointExtras {
            train: Some(TrainState {
                step: 7,
                epoch: 2,
                loss_log: vec![EpochRecord {
                    epoch: 0,
                    loss: 3.0,
                    steps: 4,
                    tokens: 100,
                }],
            }),
            adam: Some(adam.clone()),
            extra: serde_json::json!({"note": 1}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &m, &extras).unwrap();
        let (back, ex) = load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.config, m.config);
        assert_eq!(ex.adam.unwrap(), adam);
        assert_eq!(ex.train.unwrap().step, 7);
        assert_eq!(ex.extra, serde_json::json!({"note": 1}));
    }

    #[test]
    fn rejects_garbage_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path), Err(ModelError::Checkpoint(_))));
        assert!(matches!(load(&dir.path().join("none")), Err(ModelError::Io { .. })));
    }

    #[test]
    fn save_is_deterministic() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save(&a, &m, &CheckpointExtras::default()).unwrap();
        save(&b, &m, &CheckpointExtras::default()).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
