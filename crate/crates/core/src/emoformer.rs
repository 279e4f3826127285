//! Emotion-vector extraction for one modality.
//!
//! Audio and visual features run through a post-norm self-attention encoder
//! block; the block output is concatenated with the raw features and reduced
//! to an emotion vector by a five-layer mapping network. Text features come
//! from a pretrained sentence encoder already, so the text path is the mapping
//! network alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Var};

/// Number of fully connected layers in a mapping network.
pub const MAPPING_DEPTH: usize = 5;

/// Which width the attention logits are divided by (its square root).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    #[default]
    DHead,
    DModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmoformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_emotion: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub attention_scale: AttentionScale,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl EmoformerConfig {
    /// Defaults for unspecified sizes: 4 heads, `d_ff = 2 * d_model`.
    pub fn new(d_model: usize, d_emotion: usize) -> Self {
        Self {
            d_model,
            n_heads: 4,
            d_ff: 2 * d_model,
            d_emotion,
            dropout_rate: 0.1,
            attention_scale: AttentionScale::DHead,
            layer_norm_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.d_emotion == 0 {
            return Err(Error::Config(format!("all emoformer dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn scale(&self) -> f64 {
        let d = match self.attention_scale {
            AttentionScale::DHead => self.d_head(),
            AttentionScale::DModel => self.d_model,
        };
        1.0 / (d as f64).sqrt()
    }
}

/// Layer widths of a mapping network, interpolated geometrically from
/// `input` to `output`.
pub fn mapping_widths(input: usize, output: usize) -> [usize; MAPPING_DEPTH + 1] {
    let mut widths = [0; MAPPING_DEPTH + 1];
    let ratio = output as f64 / input as f64;
    for (i, w) in widths.iter_mut().enumerate() {
        let t = i as f64 / MAPPING_DEPTH as f64;
        *w = ((input as f64) * ratio.powf(t)).round().max(1.0) as usize;
    }
    widths[0] = input;
    widths[MAPPING_DEPTH] = output;
    widths
}

/// Five affine layers with ReLU between them and a linear output.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub layers: Vec<(ParamId, ParamId)>,
    pub widths: [usize; MAPPING_DEPTH + 1],
}

impl MappingNetwork {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let widths = mapping_widths(input, output);
        let layers = (0..MAPPING_DEPTH)
            .map(|i| {
                let gain = if i + 1 < MAPPING_DEPTH { std::f64::consts::SQRT_2 } else { 1.0 };
                let w = store.scaled_weight(format!("{prefix}.{i}.weight"), widths[i], widths[i + 1], gain, rng);
                let b = store.bias(format!("{prefix}.{i}.bias"), widths[i + 1]);
                (w, b)
            })
            .collect();
        Self { layers, widths }
    }

    pub fn input_extent(&self) -> usize {
        self.widths[0]
    }

    pub fn output_extent(&self) -> usize {
        self.widths[MAPPING_DEPTH]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Mean-pool `h[T×n]` over rows, then apply the five layers. Returns `[1×d_emotion]`.
pub fn mapping_network(g: &mut Graph<'_>, h: Var, net: &MappingNetwork) -> Result<Var> {
    if g.shape(h).last() != Some(&net.input_extent()) {
        return Err(Error::dim("mapping_network", g.shape(h), &[net.input_extent()]));
    }
    let pooled = g.mean_rows(h)?;
    mapping_layers(g, pooled, net)
}

/// The five layers applied row by row, without pooling.
pub fn mapping_layers(g: &mut Graph<'_>, x: Var, net: &MappingNetwork) -> Result<Var> {
    if g.shape(x).last() != Some(&net.input_extent()) {
        return Err(Error::dim("mapping_layers", g.shape(x), &[net.input_extent()]));
    }
    let mut x = x;
    for (i, &(w, b)) in net.layers.iter().enumerate() {
        let (w, b) = (g.param(w), g.param(b));
        x = g.affine(x, w, b)?;
        if i + 1 < net.layers.len() {
            x = g.relu(x);
        }
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct EmoformerParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    pub mapping: MappingNetwork,
}

impl EmoformerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EmoformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            w_query: store.weight(format!("{prefix}.attn.w_query"), d, d, rng),
            w_key: store.weight(format!("{prefix}.attn.w_key"), d, d, rng),
            w_value: store.weight(format!("{prefix}.attn.w_value"), d, d, rng),
            w_out: store.weight(format!("{prefix}.attn.w_out"), d, d, rng),
            norm1_gamma: store.ones(format!("{prefix}.norm1.gamma"), d),
            norm1_beta: store.bias(format!("{prefix}.norm1.beta"), d),
            ff_w1: store.scaled_weight(format!("{prefix}.ff.w1"), d, cfg.d_ff, std::f64::consts::SQRT_2, rng),
            ff_b1: store.bias(format!("{prefix}.ff.b1"), cfg.d_ff),
            ff_w2: store.weight(format!("{prefix}.ff.w2"), cfg.d_ff, d, rng),
            ff_b2: store.bias(format!("{prefix}.ff.b2"), d),
            norm2_gamma: store.ones(format!("{prefix}.norm2.gamma"), d),
            norm2_beta: store.bias(format!("{prefix}.norm2.beta"), d),
            mapping: MappingNetwork::new(store, &format!("{prefix}.map"), 2 * d, cfg.d_emotion, rng),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.w_query,
            self.w_key,
            self.w_value,
            self.w_out,
            self.norm1_gamma,
            self.norm1_beta,
            self.ff_w1,
            self.ff_b1,
            self.ff_w2,
            self.ff_b2,
            self.norm2_gamma,
            self.norm2_beta,
        ];
        ids.extend(self.mapping.param_ids());
        ids
    }
}

pub fn project_qkv(g: &mut Graph<'_>, u: Var, p: &EmoformerParams) -> Result<(Var, Var, Var)> {
    let wq = g.param(p.w_query);
    let wk = g.param(p.w_key);
    let wv = g.param(p.w_value);
    Ok((g.matmul(u, wq)?, g.matmul(u, wk)?, g.matmul(u, wv)?))
}

/// Output and row-stochastic weight matrix of one attention head.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(q kᵀ · scale) v`.
pub fn scaled_dot_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, scale: f64) -> Result<Attention> {
    if g.shape(q) != g.shape(k) || g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::dim("scaled_dot_attention", g.shape(q), g.shape(k)));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, scale);
    let weights = g.softmax_rows(logits)?;
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

/// Multi-head self-attention; also returns each head's weight matrix.
pub fn multi_head_attention_with_weights(
    g: &mut Graph<'_>,
    u: Var,
    p: &EmoformerParams,
    cfg: &EmoformerConfig,
) -> Result<(Var, Vec<Var>)> {
    cfg.validate()?;
    if g.shape(u).len() != 2 || g.shape(u)[1] != cfg.d_model {
        return Err(Error::dim("multi_head_attention", g.shape(u), &[cfg.d_model]));
    }
    let (q, k, v) = project_qkv(g, u, p)?;
    let dh = cfg.d_head();
    let scale = cfg.scale();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, cols.clone())?,
                g.slice_cols(k, cols.clone())?,
                g.slice_cols(v, cols)?,
            )
        };
        let att = scaled_dot_attention(g, qh, kh, vh, scale)?;
        heads.push(att.output);
        weights.push(att.weights);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let wo = g.param(p.w_out);
    Ok((g.matmul(joined, wo)?, weights))
}

pub fn multi_head_attention(g: &mut Graph<'_>, u: Var, p: &EmoformerParams, cfg: &EmoformerConfig) -> Result<Var> {
    Ok(multi_head_attention_with_weights(g, u, p, cfg)?.0)
}

/// Post-norm encoder: `N = LN(U + drop(MHA(U)))`, `G = LN(N + drop(FFN(N)))`.
pub fn encoder_block(
    g: &mut Graph<'_>,
    u: Var,
    p: &EmoformerParams,
    cfg: &EmoformerConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    Ok(encoder_block_with_weights(g, u, p, cfg, rng, training)?.0)
}

/// [`encoder_block`] that also returns each head's `[T×T]` attention weights.
pub fn encoder_block_with_weights(
    g: &mut Graph<'_>,
    u: Var,
    p: &EmoformerParams,
    cfg: &EmoformerConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<(Var, Vec<Var>)> {
    let (attended, weights) = multi_head_attention_with_weights(g, u, p, cfg)?;
    let attended = g.dropout(attended, cfg.dropout_rate, rng, training)?;
    let res1 = g.add(u, attended)?;
    let (g1, b1) = (g.param(p.norm1_gamma), g.param(p.norm1_beta));
    let n = g.layer_norm(res1, g1, b1, cfg.layer_norm_eps)?;

    let (w1, bias1) = (g.param(p.ff_w1), g.param(p.ff_b1));
    let (w2, bias2) = (g.param(p.ff_w2), g.param(p.ff_b2));
    let hidden = g.affine(n, w1, bias1)?;
    let hidden = g.relu(hidden);
    let ff = g.affine(hidden, w2, bias2)?;
    let ff = g.dropout(ff, cfg.dropout_rate, rng, training)?;
    let res2 = g.add(n, ff)?;
    let (g2, b2) = (g.param(p.norm2_gamma), g.param(p.norm2_beta));
    Ok((g.layer_norm(res2, g2, b2, cfg.layer_norm_eps)?, weights))
}

/// `H = U ⊕ G` along the feature axis.
pub fn residual_concat(g: &mut Graph<'_>, u: Var, encoded: Var) -> Result<Var> {
    if g.shape(u) != g.shape(encoded) {
        return Err(Error::dim("residual_concat", g.shape(u), g.shape(encoded)));
    }
    g.concat_cols(&[u, encoded])
}

/// Emotion vector `[1×d_emotion]` for one utterance's `[T×d_model]` features.
pub fn emoformer_forward(
    g: &mut Graph<'_>,
    u: Var,
    p: &EmoformerParams,
    cfg: &EmoformerConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    Ok(emoformer_forward_with_weights(g, u, p, cfg, rng, training)?.0)
}

/// [`emoformer_forward`] that also returns the attention weights per head.
pub fn emoformer_forward_with_weights(
    g: &mut Graph<'_>,
    u: Var,
    p: &EmoformerParams,
    cfg: &EmoformerConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<(Var, Vec<Var>)> {
    let (encoded, weights) = encoder_block_with_weights(g, u, p, cfg, rng, training)?;
    let h = residual_concat(g, u, encoded)?;
    Ok((mapping_network(g, h, &p.mapping)?, weights))
}

/// Mapping network applied directly to the sentence vector.
#[derive(Clone, Debug)]
pub struct TextEmotionPath {
    pub mapping: MappingNetwork,
}

impl TextEmotionPath {
    pub fn new(store: &mut ParamStore, prefix: &str, d_text: usize, d_emotion: usize, rng: &mut Rng) -> Self {
        Self {
            mapping: MappingNetwork::new(store, &format!("{prefix}.map"), d_text, d_emotion, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.mapping.param_ids()
    }
}

/// Text emotion vector `[1×d_emotion]` from a sentence vector `[d_text]` or `[1×d_text]`.
pub fn text_emotion_path(g: &mut Graph<'_>, u_text: Var, path: &TextEmotionPath) -> Result<Var> {
    let shape = g.shape(u_text);
    let single_row = shape.len() == 1 || shape[0] == 1;
    if !single_row || shape.last() != Some(&path.mapping.input_extent()) {
        return Err(Error::dim("text_emotion_path", shape, &[path.mapping.input_extent()]));
    }
    mapping_network(g, u_text, &path.mapping)
}

/// Text emotion vectors `[n×d_emotion]` for `n` stacked sentence vectors.
pub fn text_emotion_rows(g: &mut Graph<'_>, u_text: Var, path: &TextEmotionPath) -> Result<Var> {
    mapping_layers(g, u_text, &path.mapping)
}
