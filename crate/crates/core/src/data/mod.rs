//! Dialogues, label sets, dataset IO, splits and synthetic data.

pub mod emof;
mod manifest;
mod split;
mod synth;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{load_dataset, save_dataset};
pub use split::{split, Split};
pub use synth::{generate_synthetic, ClassOffsets, SignalStrength, SynthSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    /// Sentence vector, shape `[d_t]`.
    pub text: Tensor,
    /// Shape `[T_a, d_a]`.
    pub audio: Tensor,
    /// Shape `[T_v, d_v]`.
    pub visual: Tensor,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Gold labels, or a usage error naming the first unlabeled utterance.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.utterances
            .iter()
            .map(|u| {
                u.label.ok_or_else(|| {
                    Error::Usage(format!("utterance {}/{} is unlabeled", self.id, u.id))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Usage("label set is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Usage(format!("duplicate label {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn iemocap() -> Self {
        Self::new(["happy", "sad", "neutral", "angry", "excited", "frustrated"]).expect("unique")
    }

    pub fn meld() -> Self {
        Self::new(["neutral", "surprise", "fear", "sadness", "joy", "disgust", "angry"])
            .expect("unique")
    }

    /// `class0`, `class1`, ...
    pub fn numbered(m: usize) -> Result<Self> {
        Self::new((0..m).map(|i| format!("class{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.names
    }
}

/// Feature extents shared by every utterance of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub text: usize,
    pub audio: usize,
    pub visual: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: LabelSet,
    pub dialogues: Vec<Dialogue>,
}

impl Dataset {
    /// Checks every dialogue against the first utterance's extents and the label set.
    pub fn new(labels: LabelSet, dialogues: Vec<Dialogue>) -> Result<Self> {
        let ds = Self { labels, dialogues };
        ds.validate()?;
        Ok(ds)
    }

    pub fn dims(&self) -> Result<FeatureDims> {
        let u = self
            .dialogues
            .first()
            .and_then(|d| d.utterances.first())
            .ok_or_else(|| Error::Usage("no dialogues".into()))?;
        Ok(FeatureDims {
            text: u.text.numel(),
            audio: feature_cols(&u.audio),
            visual: feature_cols(&u.visual),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        for d in &self.dialogues {
            if d.is_empty() {
                return Err(Error::Usage(format!("dialogue {} has no utterances", d.id)));
            }
            for u in &d.utterances {
                let record = || format!("dialogue {} utterance {}", d.id, u.id);
                check_extent(&record(), "text", &[dims.text], &u.text, true)?;
                check_extent(&record(), "audio", &[dims.audio], &u.audio, false)?;
                check_extent(&record(), "visual", &[dims.visual], &u.visual, false)?;
                if let Some(l) = u.label {
                    if l >= self.labels.len() {
                        return Err(Error::UnknownLabel {
                            record: record(),
                            label: l.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_utterances(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }
}

fn feature_cols(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

fn check_extent(record: &str, what: &str, expected: &[usize], t: &Tensor, vector: bool) -> Result<()> {
    let ok = if vector {
        t.shape().len() == 1 && t.shape()[0] == expected[0]
    } else {
        t.shape().len() == 2 && t.shape()[1] == expected[0]
    };
    if ok {
        Ok(())
    } else {
        Err(Error::ExtentMismatch {
            record: format!("{record} ({what})"),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        })
    }
}

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
