//! Dialogue-level context: a bidirectional LSTM over the capsule sequence and
//! an MLP head producing per-utterance label distributions.

use crate::error::{Error, Result};
use crate::tensor::lstm::lstm_step;
use crate::tensor::{Graph, LstmParams, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ContextParams {
    /// Reads the dialogue in order.
    pub forward: LstmParams,
    /// Reads the dialogue in reverse.
    pub backward: LstmParams,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub n_labels: usize,
}

impl ContextParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_capsule: usize,
        d_hidden: usize,
        d_mlp: usize,
        n_labels: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            forward: LstmParams::new(store, &format!("{prefix}.lstm_fwd"), d_capsule, d_hidden, rng),
            backward: LstmParams::new(store, &format!("{prefix}.lstm_bwd"), d_capsule, d_hidden, rng),
            w_hidden: store.scaled_weight(format!("{prefix}.head.w_hidden"), 2 * d_hidden, d_mlp, std::f64::consts::SQRT_2, rng),
            b_hidden: store.bias(format!("{prefix}.head.b_hidden"), d_mlp),
            w_out: store.scaled_weight(format!("{prefix}.head.w_out"), d_mlp, n_labels, 1.0, rng),
            b_out: store.bias(format!("{prefix}.head.b_out"), n_labels),
            n_labels,
        }
    }

    pub fn d_hidden(&self) -> usize {
        self.forward.d_hidden
    }

    pub fn lstm_ids(&self) -> Vec<ParamId> {
        self.forward.ids().into_iter().chain(self.backward.ids()).collect()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        vec![self.w_hidden, self.b_hidden, self.w_out, self.b_out]
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmStates {
    /// `h_fwd[i]`, indexed by utterance position.
    pub forward: Vec<Var>,
    /// `h_bwd[i]`, indexed by utterance position.
    pub backward: Vec<Var>,
    /// `[n × 2·d_h]`, row `i` is `h_fwd[i] ⊕ h_bwd[i]`.
    pub context: Var,
}

fn run_direction(
    g: &mut Graph<'_>,
    inputs: Var,
    p: &LstmParams,
    order: impl Iterator<Item = usize>,
    n: usize,
) -> Result<Vec<Var>> {
    let w_in = g.param(p.w_input);
    let projected = g.matmul(inputs, w_in)?;
    let mut h = g.constant(Tensor::zeros(&[1, p.d_hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, p.d_hidden]));
    let mut states = vec![h; n];
    for t in order {
        let x = g.row(projected, t)?;
        (h, c) = lstm_step(g, x, h, c, p)?;
        states[t] = h;
    }
    Ok(states)
}

/// Run both directions over `capsules` (`[n × d_capsule]`, one row per utterance).
pub fn bilstm_context(g: &mut Graph<'_>, capsules: Var, p: &ContextParams) -> Result<BiLstmStates> {
    let shape = g.shape(capsules).to_vec();
    if shape.len() != 2 {
        return Err(Error::Usage(format!("capsule sequence must be a matrix, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if d != p.forward.d_in {
        return Err(Error::dim("bilstm_context", &shape, &[p.forward.d_in]));
    }
    let forward = run_direction(g, capsules, &p.forward, 0..n, n)?;
    let backward = run_direction(g, capsules, &p.backward, (0..n).rev(), n)?;
    let hf = g.stack_rows(&forward)?;
    let hb = g.stack_rows(&backward)?;
    let context = g.concat_cols(&[hf, hb])?;
    Ok(BiLstmStates {
        forward,
        backward,
        context,
    })
}

/// Convenience form taking one `[1 × d_capsule]` row per utterance.
pub fn bilstm_context_rows(g: &mut Graph<'_>, capsules: &[Var], p: &ContextParams) -> Result<BiLstmStates> {
    if capsules.is_empty() {
        return Err(Error::Usage("empty dialogue".into()));
    }
    let stacked = g.stack_rows(capsules)?;
    bilstm_context(g, stacked, p)
}

#[derive(Clone, Copy, Debug)]
pub struct Classification {
    pub logits: Var,
    pub probs: Var,
}

/// `softmax(relu(C W_l + b_l) W_smax + b_smax)` row by row.
pub fn classify(g: &mut Graph<'_>, context: Var, p: &ContextParams) -> Result<Classification> {
    let (w_h, b_h) = (g.param(p.w_hidden), g.param(p.b_hidden));
    let (w_o, b_o) = (g.param(p.w_out), g.param(p.b_out));
    let hidden = g.affine(context, w_h, b_h)?;
    let hidden = g.relu(hidden);
    let logits = g.affine(hidden, w_o, b_o)?;
    let probs = g.softmax_rows(logits)?;
    Ok(Classification { logits, probs })
}

/// Argmax; the lowest index wins ties.
pub fn predict(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
