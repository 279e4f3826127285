//! Model, training and run configuration, plus the IEMOCAP and MELD presets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleLayout, ModalitySet};
use crate::data::{FeatureDims, LabelSet, SynthSpec};
use crate::emoformer::{AttentionScale, EmoformerConfig};
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Iemocap,
    Meld,
    #[default]
    Custom,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iemocap" => Ok(Preset::Iemocap),
            "meld" => Ok(Preset::Meld),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected iemocap, meld or custom)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Iemocap => "iemocap",
            Preset::Meld => "meld",
            Preset::Custom => "custom",
        })
    }
}

/// Published hyperparameters for one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PresetValues {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub dim_t: usize,
    pub dim_v: usize,
    pub dim_a: usize,
}

impl Preset {
    pub fn values(self) -> Option<PresetValues> {
        let shared = |dim_t, dim_a| PresetValues {
            epochs: 80,
            lr: 0.0001,
            dropout: 0.1,
            batch_size: 30,
            dim_t,
            dim_v: 256,
            dim_a,
        };
        match self {
            Preset::Iemocap => Some(shared(100, 100)),
            Preset::Meld => Some(shared(600, 300)),
            Preset::Custom => None,
        }
    }

    pub fn labels(self) -> Option<LabelSet> {
        match self {
            Preset::Iemocap => Some(LabelSet::iemocap()),
            Preset::Meld => Some(LabelSet::meld()),
            Preset::Custom => None,
        }
    }

    pub fn train_config(self) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        if let Some(v) = self.values() {
            cfg.epochs = v.epochs;
            cfg.lr = v.lr;
            cfg.dropout = v.dropout;
            cfg.batch_size = v.batch_size;
        }
        cfg
    }

    /// Model sizes for features of extent `dims`. Dim-T sets the text
    /// emotion extent; the sentence extent always follows the data.
    pub fn model_config(self, dims: FeatureDims, n_labels: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(dims, n_labels);
        if let Some(v) = self.values() {
            cfg.d_text_emotion = v.dim_t;
            cfg.d_visual_emotion = v.dim_v;
            cfg.d_audio_emotion = v.dim_a;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_text: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub d_text_emotion: usize,
    pub d_audio_emotion: usize,
    pub d_visual_emotion: usize,
    pub n_heads: usize,
    /// Feed-forward width inside the encoder; `2 * d_model` when absent.
    #[serde(default)]
    pub d_ff: Option<usize>,
    pub d_hidden: usize,
    /// Width of the classifier's hidden layer; `d_hidden` when absent.
    #[serde(default)]
    pub d_mlp: Option<usize>,
    pub n_labels: usize,
    #[serde(default)]
    pub attention_scale: AttentionScale,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn new(dims: FeatureDims, n_labels: usize) -> Self {
        Self {
            d_text: dims.text,
            d_audio: dims.audio,
            d_visual: dims.visual,
            d_text_emotion: 32,
            d_audio_emotion: 32,
            d_visual_emotion: 32,
            n_heads: 4,
            d_ff: None,
            d_hidden: 128,
            d_mlp: None,
            n_labels,
            attention_scale: AttentionScale::DHead,
            layer_norm_eps: default_ln_eps(),
        }
    }

    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            text: self.d_text,
            audio: self.d_audio,
            visual: self.d_visual,
        }
    }

    pub fn layout(&self) -> CapsuleLayout {
        CapsuleLayout {
            sentence: self.d_text,
            text_emotion: self.d_text_emotion,
            visual_emotion: self.d_visual_emotion,
            audio_emotion: self.d_audio_emotion,
        }
    }

    pub fn d_mlp(&self) -> usize {
        self.d_mlp.unwrap_or(self.d_hidden)
    }

    pub fn audio_emoformer(&self, dropout: f64) -> EmoformerConfig {
        self.emoformer(self.d_audio, self.d_audio_emotion, dropout)
    }

    pub fn visual_emoformer(&self, dropout: f64) -> EmoformerConfig {
        self.emoformer(self.d_visual, self.d_visual_emotion, dropout)
    }

    fn emoformer(&self, d_model: usize, d_emotion: usize, dropout: f64) -> EmoformerConfig {
        EmoformerConfig {
            d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff.unwrap_or(2 * d_model),
            d_emotion,
            dropout_rate: dropout,
            attention_scale: self.attention_scale,
            layer_norm_eps: self.layer_norm_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_text", self.d_text),
            ("d_audio", self.d_audio),
            ("d_visual", self.d_visual),
            ("d_text_emotion", self.d_text_emotion),
            ("d_audio_emotion", self.d_audio_emotion),
            ("d_visual_emotion", self.d_visual_emotion),
            ("n_heads", self.n_heads),
            ("d_hidden", self.d_hidden),
            ("d_mlp", self.d_mlp()),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_labels < 2 {
            return Err(Error::Config(format!("need at least 2 labels, got {}", self.n_labels)));
        }
        for (name, d) in [("d_audio", self.d_audio), ("d_visual", self.d_visual)] {
            if d % self.n_heads != 0 {
                return Err(Error::Config(format!(
                    "{name} = {d} is not divisible by n_heads = {}",
                    self.n_heads
                )));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Config error naming both extents when data and model disagree.
    pub fn check_data(&self, dims: FeatureDims, n_labels: usize) -> Result<()> {
        let ours = self.feature_dims();
        if ours != dims {
            return Err(Error::Config(format!(
                "model expects features text={} audio={} visual={}, data has text={} audio={} visual={}",
                ours.text, ours.audio, ours.visual, dims.text, dims.audio, dims.visual
            )));
        }
        if n_labels != self.n_labels {
            return Err(Error::Config(format!(
                "model has {} labels, data has {n_labels}",
                self.n_labels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    /// Dialogues per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Worker threads for per-dialogue forward/backward.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 0.0001,
            dropout: 0.1,
            batch_size: 30,
            seed: 0,
            clip_norm: Some(5.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("epochs, batch_size and threads must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Independent seeds for model initialization, dataset splitting and the
/// training stream, all derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub model: u64,
    pub split: u64,
    pub train: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let root = Rng::new(seed);
        Self {
            model: root.fork(1).seed(),
            split: root.fork(2).seed(),
            train: root.fork(3).seed(),
        }
    }
}

/// Optional replacements for [`TrainConfig`] fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub batch_size: Option<usize>,
    /// `0` disables clipping.
    pub clip_norm: Option<f64>,
}

/// Optional replacements for [`ModelConfig`] fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub d_text_emotion: Option<usize>,
    pub d_audio_emotion: Option<usize>,
    pub d_visual_emotion: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub d_hidden: Option<usize>,
    pub d_mlp: Option<usize>,
    pub attention_scale: Option<AttentionScale>,
    pub layer_norm_eps: Option<f64>,
}

/// Contents of a `--config` JSON file. Resolution order is command-line
/// flags, then these fields, then the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub preset: Preset,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    /// Modalities used by train/eval/predict.
    pub keep: Option<ModalitySet>,
    /// Settings for `ablate`; all six rows when absent.
    pub modalities: Option<Vec<ModalitySet>>,
    /// Train/dev/test fractions.
    pub split: Option<[f64; 3]>,
    pub train: TrainOverrides,
    pub model: ModelOverrides,
    pub synth: Option<SynthSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Config(format!("config file {} not found", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        serde_json::from_slice(&raw)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn split_fractions(&self) -> [f64; 3] {
        self.split.unwrap_or([0.8, 0.1, 0.1])
    }

    pub fn keep(&self) -> ModalitySet {
        self.keep.unwrap_or(ModalitySet::ALL)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = self.preset.train_config();
        let o = &self.train;
        if let Some(v) = o.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = o.lr {
            cfg.lr = v;
        }
        if let Some(v) = o.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = o.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = o.clip_norm {
            cfg.clip_norm = (v > 0.0).then_some(v);
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, dims: FeatureDims, n_labels: usize) -> Result<ModelConfig> {
        let mut cfg = self.preset.model_config(dims, n_labels);
        let o = &self.model;
        if let Some(v) = o.d_text_emotion {
            cfg.d_text_emotion = v;
        }
        if let Some(v) = o.d_audio_emotion {
            cfg.d_audio_emotion = v;
        }
        if let Some(v) = o.d_visual_emotion {
            cfg.d_visual_emotion = v;
        }
        if let Some(v) = o.n_heads {
            cfg.n_heads = v;
        }
        if o.d_ff.is_some() {
            cfg.d_ff = o.d_ff;
        }
        if let Some(v) = o.d_hidden {
            cfg.d_hidden = v;
        }
        if o.d_mlp.is_some() {
            cfg.d_mlp = o.d_mlp;
        }
        if let Some(v) = o.attention_scale {
            cfg.attention_scale = v;
        }
        if let Some(v) = o.layer_norm_eps {
            cfg.layer_norm_eps = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
