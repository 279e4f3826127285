use serde::{Deserialize, Serialize};

use super::{emof, Dataset, Dialogue, FeatureDims, LabelSet, Utterance};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Per-modality multiplier on the class offsets. Zero plants no signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalStrength {
    pub text: f64,
    pub audio: f64,
    pub visual: f64,
}

impl SignalStrength {
    pub const ALL: Self = Self {
        text: 1.0,
        audio: 1.0,
        visual: 1.0,
    };

    pub fn only_text(s: f64) -> Self {
        Self {
            text: s,
            audio: 0.0,
            visual: 0.0,
        }
    }

    pub fn only_audio(s: f64) -> Self {
        Self {
            text: 0.0,
            audio: s,
            visual: 0.0,
        }
    }
}

/// Class offset vectors, `[class][component]` per modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassOffsets {
    pub text: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_dialogues: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub n_labels: usize,
    pub dims: FeatureDims,
    /// Rows per audio/visual feature matrix.
    pub seq_len: usize,
    pub signal: SignalStrength,
    /// Drawn from N(0, 1) under `seed` when absent.
    pub offsets: Option<ClassOffsets>,
    pub noise: f64,
    /// Probability that an utterance copies the previous utterance's label
    /// instead of the class planted in its features.
    pub context_flip: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_dialogues: 200,
            min_utterances: 4,
            max_utterances: 8,
            n_labels: 4,
            dims: FeatureDims {
                text: 16,
                audio: 16,
                visual: 16,
            },
            seq_len: 1,
            signal: SignalStrength::ALL,
            offsets: None,
            noise: 0.5,
            context_flip: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Offsets after scaling by the per-modality signal strength.
    pub fn class_offsets(&self) -> Result<ClassOffsets> {
        self.check_shape()?;
        let raw = match &self.offsets {
            Some(o) => o.clone(),
            None => {
                let mut rng = Rng::new(self.seed).fork(0);
                let mut draw = |d: usize| -> Vec<Vec<f64>> {
                    (0..self.n_labels)
                        .map(|_| (0..d).map(|_| rng.normal()).collect())
                        .collect()
                };
                ClassOffsets {
                    text: draw(self.dims.text),
                    audio: draw(self.dims.audio),
                    visual: draw(self.dims.visual),
                }
            }
        };
        let scale = |rows: Vec<Vec<f64>>, s: f64| -> Vec<Vec<f64>> {
            rows.into_iter()
                .map(|r| r.into_iter().map(|v| v * s).collect())
                .collect()
        };
        let scaled = ClassOffsets {
            text: scale(raw.text, self.signal.text),
            audio: scale(raw.audio, self.signal.audio),
            visual: scale(raw.visual, self.signal.visual),
        };
        for (name, rows, d) in [
            ("text", &scaled.text, self.dims.text),
            ("audio", &scaled.audio, self.dims.audio),
            ("visual", &scaled.visual, self.dims.visual),
        ] {
            if rows.len() != self.n_labels || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Usage(format!(
                    "{name} offsets must be {} x {d}",
                    self.n_labels
                )));
            }
        }
        let carriers = [
            (self.signal.text, &scaled.text),
            (self.signal.audio, &scaled.audio),
            (self.signal.visual, &scaled.visual),
        ];
        if carriers.iter().all(|(s, _)| *s == 0.0) {
            return Err(Error::Usage("no modality carries signal".into()));
        }
        for (s, rows) in carriers {
            if s == 0.0 {
                continue;
            }
            for i in 0..rows.len() {
                for j in 0..i {
                    if rows[i] == rows[j] {
                        return Err(Error::Usage(format!(
                            "classes {j} and {i} have identical offsets"
                        )));
                    }
                }
            }
        }
        Ok(scaled)
    }

    fn check_shape(&self) -> Result<()> {
        let FeatureDims { text, audio, visual } = self.dims;
        if self.n_dialogues == 0 || self.n_labels < 2 {
            return Err(Error::Usage("need at least one dialogue and two labels".into()));
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return Err(Error::Usage(format!(
                "bad utterance range {}..={}",
                self.min_utterances, self.max_utterances
            )));
        }
        if text == 0 || audio == 0 || visual == 0 || self.seq_len == 0 {
            return Err(Error::Usage("feature extents must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Usage(format!("noise scale {} must be >= 0", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.context_flip) {
            return Err(Error::Usage(format!(
                "context flip probability {} outside [0, 1]",
                self.context_flip
            )));
        }
        Ok(())
    }
}

/// Dialogues whose features are a class offset plus Gaussian noise. Values
/// are rounded to `f32` so a saved copy reloads bit-exact.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    let offsets = spec.class_offsets()?;
    let root = Rng::new(spec.seed);
    let dialogues = (0..spec.n_dialogues)
        .map(|di| {
            let mut rng = root.fork(1 + di as u64);
            let n = rng.range_inclusive(spec.min_utterances, spec.max_utterances);
            let mut previous: Option<usize> = None;
            let utterances = (0..n)
                .map(|ui| {
                    let planted = rng.below(spec.n_labels);
                    let label = match previous {
                        Some(p) if rng.bernoulli(spec.context_flip) => p,
                        _ => planted,
                    };
                    previous = Some(label);
                    let mut feature = |offset: &[f64], rows: usize| -> Vec<f64> {
                        (0..rows)
                            .flat_map(|_| offset.to_vec())
                            .map(|o| o + spec.noise * rng.normal())
                            .collect()
                    };
                    let text = feature(&offsets.text[planted], 1);
                    let audio = feature(&offsets.audio[planted], spec.seq_len);
                    let visual = feature(&offsets.visual[planted], spec.seq_len);
                    Utterance {
                        id: format!("u{ui}"),
                        speaker: if ui % 2 == 0 { "A" } else { "B" }.to_string(),
                        text: emof::quantize(&Tensor::vector(text)),
                        audio: emof::quantize(
                            &Tensor::matrix(spec.seq_len, spec.dims.audio, audio).expect("shape"),
                        ),
                        visual: emof::quantize(
                            &Tensor::matrix(spec.seq_len, spec.dims.visual, visual).expect("shape"),
                        ),
                        label: Some(label),
                    }
                })
                .collect();
            Dialogue {
                id: format!("synth{di:05}"),
                utterances,
            }
        })
        .collect();
    Dataset::new(LabelSet::numbered(spec.n_labels)?, dialogues)
}
