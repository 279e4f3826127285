//! Checkpoints: a JSON index plus one EMOF file per parameter tensor.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capsule::ModalitySet;
use crate::config::ModelConfig;
use crate::data::{emof, write_atomic, LabelSet};
use crate::error::{Error, Result};
use crate::model::EmoCaps;

pub const INDEX_FILE: &str = "checkpoint.json";
const FORMAT: &str = "emocaps-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Index {
    format: String,
    version: u32,
    config: ModelConfig,
    labels: LabelSet,
    keep: ModalitySet,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: PathBuf,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: EmoCaps,
    pub labels: LabelSet,
    /// Modalities the model was trained with.
    pub keep: ModalitySet,
}

/// Write `model` under `dir`. Parameters are stored as `f32`. Returns the
/// index path.
pub fn save_checkpoint(dir: &Path, model: &EmoCaps, labels: &LabelSet, keep: ModalitySet) -> Result<PathBuf> {
    let mut params = Vec::with_capacity(model.store().len());
    for (i, (_, name, t)) in model.store().iter().enumerate() {
        let file = PathBuf::from(format!("params/{i:03}_{name}.emof"));
        emof::write(&dir.join(&file), t)?;
        params.push(ParamEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let index = Index {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        labels: labels.clone(),
        keep,
        params,
    };
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_vec_pretty(&index).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    write_atomic(&path, &json)?;
    Ok(path)
}

/// Load from a checkpoint directory or its index file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let index_path = if path.is_dir() {
        path.join(INDEX_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = index_path.parent().unwrap_or(Path::new("."));
    let raw = std::fs::read(&index_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            path: index_path.clone(),
            record: "checkpoint index".into(),
        },
        _ => Error::io(&index_path, e),
    })?;
    let index: Index = serde_json::from_slice(&raw).map_err(|source| Error::Json {
        path: index_path.clone(),
        source,
    })?;
    if index.format != FORMAT || index.version != VERSION {
        return Err(Error::Format {
            path: index_path,
            reason: format!("unsupported checkpoint {} v{}", index.format, index.version),
        });
    }
    let mut model = EmoCaps::new(index.config, 0)?;
    if index.params.len() != model.store().len() {
        return Err(Error::Format {
            path: index_path,
            reason: format!(
                "{} parameters listed, model has {}",
                index.params.len(),
                model.store().len()
            ),
        });
    }
    for entry in &index.params {
        let file = dir.join(&entry.file);
        if !file.is_file() {
            return Err(Error::MissingFile {
                path: file,
                record: format!("parameter {}", entry.name),
            });
        }
        let t = emof::read(&file)?;
        model.store_mut().assign(&entry.name, t).map_err(|e| Error::Format {
            path: file.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(Checkpoint {
        model,
        labels: index.labels,
        keep: index.keep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureDims;

    fn model() -> EmoCaps {
        let mut cfg = ModelConfig::new(
            FeatureDims {
                text: 6,
                audio: 4,
                visual: 4,
            },
            3,
        );
        cfg.d_hidden = 5;
        cfg.n_heads = 2;
        EmoCaps::new(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_matches_f32_quantized_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let labels = LabelSet::numbered(3).unwrap();
        save_checkpoint(dir.path(), &m, &labels, ModalitySet::TEXT).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.labels, labels);
        assert_eq!(back.keep, ModalitySet::TEXT);
        assert_eq!(back.model.config(), m.config());
        for ((_, n1, a), (_, n2, b)) in m.store().iter().zip(back.model.store().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(&emof::quantize(a), b);
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let labels = LabelSet::numbered(3).unwrap();
        save_checkpoint(a.path(), &model(), &labels, ModalitySet::ALL).unwrap();
        save_checkpoint(b.path(), &model(), &labels, ModalitySet::ALL).unwrap();
        let read = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(read(&a.path().join(INDEX_FILE)), read(&b.path().join(INDEX_FILE)));
        let files = std::fs::read_dir(a.path().join("params")).unwrap();
        for f in files {
            let name = f.unwrap().file_name();
            assert_eq!(
                read(&a.path().join("params").join(&name)),
                read(&b.path().join("params").join(&name))
            );
        }
    }

    #[test]
    fn missing_parameter_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model(), &LabelSet::numbered(3).unwrap(), ModalitySet::ALL).unwrap();
        let victim = std::fs::read_dir(dir.path().join("params")).unwrap().next().unwrap().unwrap();
        std::fs::remove_file(victim.path()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::MissingFile { .. })));
    }
}
