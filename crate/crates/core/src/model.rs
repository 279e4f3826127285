//! The full dialogue model: per-modality emotion vectors, capsule fusion and
//! the bidirectional context classifier.

use crate::capsule::{capsule_rows, CapsuleLayout, ModalitySet};
use crate::config::ModelConfig;
use crate::context::{bilstm_context, classify, BiLstmStates, ContextParams};
use crate::data::Dialogue;
use crate::emoformer::{emoformer_forward_with_weights, text_emotion_rows, EmoformerParams, TextEmotionPath};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Names of the parameter groups, in the order [`EmoCaps::param_groups`] lists them.
pub const PARAM_GROUPS: [&str; 5] = ["emoformer.audio", "emoformer.visual", "text_path", "bilstm", "head"];

#[derive(Clone, Debug)]
pub struct EmoCaps {
    config: ModelConfig,
    store: ParamStore,
    text: TextEmotionPath,
    audio: EmoformerParams,
    visual: EmoformerParams,
    context: ContextParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub keep: ModalitySet,
    pub training: bool,
    /// Rate for encoder sublayers and capsule dropout; ignored in eval mode.
    pub dropout: f64,
}

impl ForwardOptions {
    pub fn eval(keep: ModalitySet) -> Self {
        Self {
            keep,
            training: false,
            dropout: 0.0,
        }
    }

    pub fn train(keep: ModalitySet, dropout: f64) -> Self {
        Self {
            keep,
            training: true,
            dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DialogueOutput {
    /// `[n × capsule extent]`, after masking and dropout.
    pub capsules: Var,
    pub states: BiLstmStates,
    /// `[n × m]`.
    pub logits: Var,
    /// `[n × m]`.
    pub probs: Var,
    /// Attention weights of every head of every audio/visual encoder call.
    pub attention: Vec<Var>,
}

impl EmoCaps {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let text = TextEmotionPath::new(&mut store, "text", config.d_text, config.d_text_emotion, &mut rng);
        let audio = EmoformerParams::new(&mut store, "audio", &config.audio_emoformer(0.0), &mut rng)?;
        let visual = EmoformerParams::new(&mut store, "visual", &config.visual_emoformer(0.0), &mut rng)?;
        let context = ContextParams::new(
            &mut store,
            "context",
            config.layout().extent(),
            config.d_hidden,
            config.d_mlp(),
            config.n_labels,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            text,
            audio,
            visual,
            context,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> CapsuleLayout {
        self.config.layout()
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.store)
    }

    /// Parameter groups named by [`PARAM_GROUPS`].
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let groups = [
            self.audio.param_ids(),
            self.visual.param_ids(),
            self.text.param_ids(),
            self.context.lstm_ids(),
            self.context.head_ids(),
        ];
        PARAM_GROUPS.into_iter().zip(groups).collect()
    }

    /// Record the forward pass for one dialogue on `g`, which must borrow
    /// this model's parameters (see [`EmoCaps::graph`]).
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        dialogue: &Dialogue,
        opts: &ForwardOptions,
        rng: &mut Rng,
    ) -> Result<DialogueOutput> {
        let n = dialogue.len();
        if n == 0 {
            return Err(Error::Usage(format!("dialogue {} is empty", dialogue.id)));
        }
        if opts.keep.is_empty() {
            return Err(Error::Usage("cannot mask away every modality".into()));
        }
        let cfg = &self.config;
        let layout = self.layout();
        let dropout = if opts.training { opts.dropout } else { 0.0 };
        let mut attention = Vec::new();

        let (sentences, text_emotion) = if opts.keep.text {
            let mut rows = Vec::with_capacity(n * cfg.d_text);
            for u in &dialogue.utterances {
                if u.text.numel() != cfg.d_text {
                    return Err(Error::dim("forward (text)", u.text.shape(), &[cfg.d_text]));
                }
                rows.extend_from_slice(u.text.data());
            }
            let s = g.constant(Tensor::matrix(n, cfg.d_text, rows)?);
            let e = text_emotion_rows(g, s, &self.text)?;
            (s, e)
        } else {
            (
                g.constant(Tensor::zeros(&[n, cfg.d_text])),
                g.constant(Tensor::zeros(&[n, cfg.d_text_emotion])),
            )
        };

        let mut modality = |g: &mut Graph<'_>,
                            kept: bool,
                            params: &EmoformerParams,
                            ecfg: crate::emoformer::EmoformerConfig,
                            pick: fn(&crate::data::Utterance) -> &Tensor,
                            rng: &mut Rng|
         -> Result<Var> {
            if !kept {
                return Ok(g.constant(Tensor::zeros(&[n, ecfg.d_emotion])));
            }
            let mut rows = Vec::with_capacity(n);
            for u in &dialogue.utterances {
                let x = g.constant(pick(u).clone());
                let (e, w) = emoformer_forward_with_weights(g, x, params, &ecfg, rng, opts.training)?;
                attention.extend(w);
                rows.push(e);
            }
            g.stack_rows(&rows)
        };
        let visual_emotion = modality(
            g,
            opts.keep.visual,
            &self.visual,
            cfg.visual_emoformer(dropout),
            |u| &u.visual,
            rng,
        )?;
        let audio_emotion = modality(
            g,
            opts.keep.audio,
            &self.audio,
            cfg.audio_emoformer(dropout),
            |u| &u.audio,
            rng,
        )?;

        let capsules = capsule_rows(
            g,
            [sentences, text_emotion, visual_emotion, audio_emotion],
            layout,
            opts.keep,
        )?;
        let capsules = g.dropout(capsules, dropout, rng, opts.training)?;
        let states = bilstm_context(g, capsules, &self.context)?;
        let cls = classify(g, states.context, &self.context)?;
        Ok(DialogueOutput {
            capsules,
            logits: cls.logits,
            probs: cls.probs,
            states,
            attention,
        })
    }

    /// Summed cross-entropy over the dialogue's utterances.
    pub fn loss(&self, g: &mut Graph<'_>, out: &DialogueOutput, dialogue: &Dialogue) -> Result<Var> {
        let labels = dialogue.labels()?;
        g.cross_entropy(out.logits, &labels)
    }

    /// Per-utterance label distributions in eval mode.
    pub fn predict_proba(&self, dialogue: &Dialogue, keep: ModalitySet) -> Result<Vec<Vec<f64>>> {
        let mut g = self.graph();
        // Eval mode draws nothing from the stream.
        let mut rng = Rng::new(0);
        let out = self.forward(&mut g, dialogue, &ForwardOptions::eval(keep), &mut rng)?;
        let m = self.config.n_labels;
        Ok(g.value(out.probs).chunks(m).map(<[f64]>::to_vec).collect())
    }
}
