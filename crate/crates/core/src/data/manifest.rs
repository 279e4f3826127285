use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{emof, Dataset, Dialogue, FeatureDims, LabelSet, Utterance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Manifest {
    labels: Vec<String>,
    /// Optional header; when absent the first utterance defines the extents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_dims: Option<FeatureDims>,
    dialogues: Vec<DialogueEntry>,
}

#[derive(Serialize, Deserialize)]
struct DialogueEntry {
    id: String,
    utterances: Vec<UtteranceEntry>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceEntry {
    id: String,
    #[serde(default)]
    speaker: String,
    label: Option<String>,
    text_feat: PathBuf,
    audio_feat: PathBuf,
    visual_feat: PathBuf,
}

/// Load a JSON manifest and its EMOF feature files. Relative feature paths
/// resolve against the manifest's directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let raw = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            path: path.to_path_buf(),
            record: "dataset manifest".into(),
        },
        _ => Error::io(path, e),
    })?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if manifest.dialogues.is_empty() {
        return Err(Error::Usage(format!("no dialogues in {}", path.display())));
    }
    let labels = LabelSet::new(manifest.labels.clone())?;
    let base = path.parent().unwrap_or(Path::new("."));

    let jobs: Vec<(&DialogueEntry, &UtteranceEntry)> = manifest
        .dialogues
        .iter()
        .flat_map(|d| d.utterances.iter().map(move |u| (d, u)))
        .collect();
    for d in &manifest.dialogues {
        if d.utterances.is_empty() {
            return Err(Error::Usage(format!("dialogue {} has no utterances", d.id)));
        }
    }
    let loaded: Vec<Result<Utterance>> = jobs
        .par_iter()
        .map(|(d, u)| load_utterance(base, d, u, &labels))
        .collect();

    let mut loaded = loaded.into_iter();
    let mut dialogues = Vec::with_capacity(manifest.dialogues.len());
    for d in &manifest.dialogues {
        let utterances = loaded.by_ref().take(d.utterances.len()).collect::<Result<Vec<_>>>()?;
        dialogues.push(Dialogue {
            id: d.id.clone(),
            utterances,
        });
    }

    let dataset = Dataset { labels, dialogues };
    if let Some(dims) = manifest.feature_dims {
        let found = dataset.dims()?;
        if found != dims {
            let first = &dataset.dialogues[0];
            return Err(Error::ExtentMismatch {
                record: format!("dialogue {} utterance {}", first.id, first.utterances[0].id),
                expected: vec![dims.text, dims.audio, dims.visual],
                found: vec![found.text, found.audio, found.visual],
            });
        }
    }
    dataset.validate()?;
    Ok(dataset)
}

fn load_utterance(
    base: &Path,
    d: &DialogueEntry,
    u: &UtteranceEntry,
    labels: &LabelSet,
) -> Result<Utterance> {
    let record = format!("dialogue {} utterance {}", d.id, u.id);
    let label = match &u.label {
        None => None,
        Some(name) => Some(labels.index_of(name).ok_or_else(|| Error::UnknownLabel {
            record: record.clone(),
            label: name.clone(),
        })?),
    };
    let text = read_feature(base, &u.text_feat, &record)?;
    let text = match *text.shape() {
        [_] => text,
        [1, n] => text.reshape(vec![n])?,
        _ => {
            return Err(Error::ExtentMismatch {
                record: format!("{record} (text)"),
                expected: vec![1, text.shape()[text.shape().len() - 1]],
                found: text.shape().to_vec(),
            })
        }
    };
    let audio = as_sequence(read_feature(base, &u.audio_feat, &record)?, &record, "audio")?;
    let visual = as_sequence(read_feature(base, &u.visual_feat, &record)?, &record, "visual")?;
    Ok(Utterance {
        id: u.id.clone(),
        speaker: u.speaker.clone(),
        text,
        audio,
        visual,
        label,
    })
}

fn read_feature(base: &Path, rel: &Path, record: &str) -> Result<Tensor> {
    let path = base.join(rel);
    if !path.is_file() {
        return Err(Error::MissingFile {
            path,
            record: record.to_string(),
        });
    }
    emof::read(&path)
}

/// A pooled rank-1 feature is a one-step sequence.
fn as_sequence(t: Tensor, record: &str, what: &str) -> Result<Tensor> {
    match *t.shape() {
        [n] => t.reshape(vec![1, n]),
        [_, _] => Ok(t),
        _ => Err(Error::ExtentMismatch {
            record: format!("{record} ({what})"),
            expected: vec![0, 0],
            found: t.shape().to_vec(),
        }),
    }
}

/// Write `dataset` as `manifest.json` plus one EMOF file per feature under
/// `dir/features`. Returns the manifest path.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    dataset.validate()?;
    let mut entries = Vec::with_capacity(dataset.dialogues.len());
    for (di, d) in dataset.dialogues.iter().enumerate() {
        let mut utterances = Vec::with_capacity(d.len());
        for (ui, u) in d.utterances.iter().enumerate() {
            let stem = format!("features/{di:05}_{ui:04}");
            let files = [
                (format!("{stem}_text.emof"), &u.text),
                (format!("{stem}_audio.emof"), &u.audio),
                (format!("{stem}_visual.emof"), &u.visual),
            ];
            for (rel, t) in &files {
                emof::write(&dir.join(rel), t)?;
            }
            let [t, a, v] = files.map(|(rel, _)| PathBuf::from(rel));
            utterances.push(UtteranceEntry {
                id: u.id.clone(),
                speaker: u.speaker.clone(),
                label: u
                    .label
                    .map(|l| dataset.labels.name(l).expect("validated").to_string()),
                text_feat: t,
                audio_feat: a,
                visual_feat: v,
            });
        }
        entries.push(DialogueEntry {
            id: d.id.clone(),
            utterances,
        });
    }
    let manifest = Manifest {
        labels: dataset.labels.names().to_vec(),
        feature_dims: Some(dataset.dims()?),
        dialogues: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    super::write_atomic(&path, &json)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn tiny_dataset() -> Dataset {
        let mut rng = Rng::new(3);
        let mut q = |shape: &[usize]| emof::quantize(&Tensor::normal(shape, 1.0, &mut rng));
        let dialogues = (0..2)
            .map(|d| Dialogue {
                id: format!("dlg{d}"),
                utterances: (0..3)
                    .map(|u| Utterance {
                        id: format!("u{u}"),
                        speaker: if u % 2 == 0 { "A".into() } else { "B".into() },
                        text: q(&[5]),
                        audio: q(&[2, 3]),
                        visual: q(&[1, 4]),
                        label: if u == 2 { None } else { Some((d + u) % 6) },
                    })
                    .collect(),
            })
            .collect();
        Dataset::new(LabelSet::iemocap(), dialogues).unwrap()
    }

    fn write_manifest(dir: &Path, value: serde_json::Value) -> PathBuf {
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_vec(&value).unwrap()).unwrap();
        p
    }

    #[test]
    fn save_then_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let path = save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.dialogues.iter().zip(&ds.dialogues) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.utterances.iter().zip(&b.utterances) {
                for (p, q) in [(&x.text, &y.text), (&x.audio, &y.audio), (&x.visual, &y.visual)] {
                    assert_eq!(p.shape(), q.shape());
                    let pb: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
                    let qb: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
                    assert_eq!(pb, qb);
                }
                assert_eq!(x.label, y.label);
                assert_eq!(x.speaker, y.speaker);
            }
        }
    }

    #[test]
    fn empty_manifest_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), serde_json::json!({"labels": ["a"], "dialogues": []}));
        let err = load_dataset(&p).unwrap_err();
        assert!(matches!(err, Error::Usage(ref m) if m.contains("no dialogues")), "{err}");
    }

    #[test]
    fn load_errors_are_distinct_and_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(dir.path(), &tiny_dataset()).unwrap();
        let original: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();

        let mut missing = original.clone();
        missing["dialogues"][1]["utterances"][0]["audio_feat"] = "features/nope.emof".into();
        let p = write_manifest(dir.path(), missing);
        match load_dataset(&p).unwrap_err() {
            Error::MissingFile { record, .. } => assert_eq!(record, "dialogue dlg1 utterance u0"),
            e => panic!("unexpected {e}"),
        }

        let mut unknown = original.clone();
        unknown["dialogues"][0]["utterances"][1]["label"] = "bored".into();
        let p = write_manifest(dir.path(), unknown);
        match load_dataset(&p).unwrap_err() {
            Error::UnknownLabel { record, label } => {
                assert_eq!(record, "dialogue dlg0 utterance u1");
                assert_eq!(label, "bored");
            }
            e => panic!("unexpected {e}"),
        }

        let mut wrong = original.clone();
        emof::write(&dir.path().join("features/odd.emof"), &Tensor::zeros(&[2, 7])).unwrap();
        wrong["dialogues"][1]["utterances"][2]["visual_feat"] = "features/odd.emof".into();
        let p = write_manifest(dir.path(), wrong);
        match load_dataset(&p).unwrap_err() {
            Error::ExtentMismatch { record, expected, found } => {
                assert!(record.starts_with("dialogue dlg1 utterance u2"), "{record}");
                assert_eq!(expected, vec![4]);
                assert_eq!(found, vec![2, 7]);
            }
            e => panic!("unexpected {e}"),
        }

        let mut header = original;
        header["feature_dims"]["text"] = 6.into();
        let p = write_manifest(dir.path(), header);
        assert!(matches!(load_dataset(&p), Err(Error::ExtentMismatch { .. })));
    }

    #[test]
    fn missing_manifest_is_a_data_error() {
        let err = load_dataset(Path::new("/definitely/not/here.json")).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Data);
    }
}
