use super::{Graph, ParamId, ParamStore, Rng, Var};
use crate::error::{Error, Result};

/// Weights of one LSTM direction. Gate blocks are laid out as
/// `[input | forget | candidate | output]` along the last axis.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w_input: store.weight(format!("{prefix}.w_input"), d_in, 4 * d_hidden, rng),
            w_hidden: store.weight(format!("{prefix}.w_hidden"), d_hidden, 4 * d_hidden, rng),
            bias: store.bias(format!("{prefix}.bias"), 4 * d_hidden),
            d_in,
            d_hidden,
        }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_input, self.w_hidden, self.bias]
    }
}

/// One LSTM step on row vectors `x[1×d_in]`, `h[1×d_h]`, `c[1×d_h]`.
pub fn lstm_cell(g: &mut Graph<'_>, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    if g.shape(x).last() != Some(&p.d_in) {
        return Err(Error::dim("lstm_cell", g.shape(x), &[p.d_in]));
    }
    let w_in = g.param(p.w_input);
    let projected = g.matmul(x, w_in)?;
    lstm_step(g, projected, h, c, p)
}

/// LSTM step given the precomputed input projection `x · W_input`.
pub(crate) fn lstm_step(g: &mut Graph<'_>, projected: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let dh = p.d_hidden;
    if g.shape(h).last() != Some(&dh) || g.shape(c).last() != Some(&dh) {
        return Err(Error::dim("lstm_cell", g.shape(h), &[dh]));
    }
    let w_h = g.param(p.w_hidden);
    let b = g.param(p.bias);
    let recurrent = g.matmul(h, w_h)?;
    let pre = g.add(projected, recurrent)?;
    let gates = g.add_bias(pre, b)?;
    let i = g.slice_cols(gates, 0..dh)?;
    let f = g.slice_cols(gates, dh..2 * dh)?;
    let cand = g.slice_cols(gates, 2 * dh..3 * dh)?;
    let o = g.slice_cols(gates, 3 * dh..4 * dh)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}
