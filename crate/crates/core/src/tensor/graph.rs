use std::collections::HashMap;
use std::ops::Range;

use super::{dims2, Gradients, ParamId, ParamStore, Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations for one forward pass, replayed in reverse by
/// [`Graph::backward`]. Nodes are appended in evaluation order, so index order
/// is a topological order.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.expect("parameter node without a store").get(*id).data(),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape invariant")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Hash of which ReLU inputs are positive. Two evaluations with equal
    /// signatures lie on the same smooth piece of the recorded function.
    pub fn activation_signature(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.value(x) {
                    mix(u8::from(v > 0.0));
                }
                mix(2);
            }
        }
        hash
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        dims2(self.shape(v))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    /// Learnable parameter, recorded once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.store.expect("Graph::param requires Graph::with_params");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// `x[m×n] + bias[n]`, bias repeated over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let xv = self.value(x);
        let out = (0..m * n).map(|i| xv[i] + b[i % n]).collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), rg))
    }

    /// `x · weight + bias`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant of the same extent.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", self.shape(x), &[c.len()]));
        }
        let out = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|a| a * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&a| f(a)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |a| 1.0 / (1.0 + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let xv = self.value(x);
        if xv.iter().any(|a| a.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&xv[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), rg))
    }

    /// Normalize each row over the last axis, then apply `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims(x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    /// Concatenate along the last (feature) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let (m, _) = self.dims(first)?;
        let rank1 = self.shape(first).len() == 1;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pm != m || (self.shape(p).len() == 1) != rank1 {
                return Err(Error::dim("concat", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let shape = if rank1 { vec![total] } else { vec![m, total] };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if cols.start >= cols.end || cols.end > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[cols.start, cols.end]));
        }
        let w = cols.len();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + cols.start..i * n + cols.end]);
        }
        let shape = if self.shape(x).len() == 1 { vec![w] } else { vec![m, w] };
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SliceCols(x, cols.start), rg))
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if rows.start >= rows.end || rows.end > m {
            return Err(Error::dim("slice_rows", self.shape(x), &[rows.start, rows.end]));
        }
        let out = self.value(x)[rows.start * n..rows.end * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![rows.len(), n], out, Op::SliceRows(x, rows.start), rg))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i..i + 1)
    }

    /// Stack row blocks `[r_k × n]` into `[Σ r_k × n]`.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("stack of zero tensors".into()))?;
        let (_, n) = self.dims(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pn != n {
                return Err(Error::dim("stack_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, n], out, Op::StackRows(parts.to_vec()), rg))
    }

    /// Mean over rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xv[i * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![1, n], out, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Summed negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits)?;
        if labels.len() != m {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Usage(format!("label {bad} out of range for {n} classes")));
        }
        let lv = self.value(logits);
        if lv.iter().any(|a| a.is_nan()) {
            return Err(Error::Numeric("NaN logits in cross_entropy".into()));
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &lv[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            softmax_into(row, &mut probs[i * n..(i + 1) * n]);
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let store = self.store;
        let grads = &mut self.grads;
        let val = |v: Var| value_of(nodes, store, v);
        let rg = |v: Var| nodes[v.0].requires_grad;
        let shape = |v: Var| nodes[v.0].shape.as_slice();
        let op = &nodes[idx].op;
        let out_shape = &nodes[idx].shape;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(shape(*a)).unwrap();
                let (_, n) = dims2(shape(*b)).unwrap();
                if rg(*a) {
                    let bv = val(*b); 
                    let da = acc(nodes, grads, *a).unwrap();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if rg(*b) {
                    let av = val(*a); 
                    let db = acc(nodes, grads, *b).unwrap();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc(nodes, grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(d) = acc(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(d) = acc(nodes, grads, *bias) {
                    let n = d.len();
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = val(*b); 
                    let d = acc(nodes, grads, *a).unwrap();
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if rg(*b) {
                    let av = val(*a); 
                    let d = acc(nodes, grads, *b).unwrap();
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::MulConst(x, c) => {
                if let Some(d) = acc(nodes, grads, *x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * c[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = acc(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(d) = acc(nodes, grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) | Op::Tanh(x) => {
                let sig = matches!(op, Op::Sigmoid(_));
                let y = val(Var(idx));
                if let Some(d) = acc(nodes, grads, *x) {
                    for i in 0..g.len() {
                        let local = if sig { y[i] * (1.0 - y[i]) } else { 1.0 - y[i] * y[i] };
                        d[i] += g[i] * local;
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = dims2(shape(*x)).unwrap();
                if let Some(d) = acc(nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = dims2(out_shape).unwrap();
                let y = val(Var(idx));
                if let Some(d) = acc(nodes, grads, *x) {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, dim) = dims2(out_shape).unwrap();
                let gv = val(*gamma);
                if let Some(dg) = acc(nodes, grads, *gamma) {
                    for i in 0..m * dim {
                        dg[i % dim] += g[i] * xhat[i];
                    }
                }
                if let Some(db) = acc(nodes, grads, *beta) {
                    for i in 0..m * dim {
                        db[i % dim] += g[i];
                    }
                }
                if let Some(dx) = acc(nodes, grads, *x) {
                    let inv_d = 1.0 / dim as f64;
                    for i in 0..m {
                        let base = i * dim;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..dim {
                            let dh = g[base + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[base + j];
                        }
                        for j in 0..dim {
                            let dh = g[base + j] * gv[j];
                            dx[base + j] += inv_std[i]
                                * (dh - inv_d * sum_dh - xhat[base + j] * inv_d * sum_dh_h);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(out_shape).unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = dims2(shape(p)).unwrap();
                    if let Some(d) = acc(nodes, grads, p) {
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, w) = dims2(out_shape).unwrap();
                let (_, n) = dims2(shape(*x)).unwrap();
                if let Some(d) = acc(nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..w {
                            d[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let (_, n) = dims2(out_shape).unwrap();
                if let Some(d) = acc(nodes, grads, *x) {
                    for (dv, gv) in d[start * n..].iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if let Some(d) = acc(nodes, grads, p) {
                        for (dv, gv) in d.iter_mut().zip(&g[offset..offset + len]) {
                            *dv += gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = dims2(shape(*x)).unwrap();
                if let Some(d) = acc(nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j] / m as f64;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = acc(nodes, grads, *x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = probs.len() / labels.len();
                if let Some(d) = acc(nodes, grads, *logits) {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..n {
                            let target = if j == label { 1.0 } else { 0.0 };
                            d[i * n + j] += g[0] * (probs[i * n + j] - target);
                        }
                    }
                }
            }
        }
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape invariant"))
    }

    /// Gradients of every parameter recorded on this graph; parameters that
    /// were not reached stay empty.
    pub fn param_grads(&self) -> Gradients {
        let store = self.store.expect("param_grads requires Graph::with_params");
        let mut slots = vec![None; store.len()];
        for (id, v) in &self.param_vars {
            slots[id.index()] = Some(
                self.grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(store.get(*id).shape())),
            );
        }
        Gradients::from_slots(slots)
    }
}

fn value_of<'a>(nodes: &'a [Node], store: Option<&'a ParamStore>, v: Var) -> &'a [f64] {
    match &nodes[v.0].value {
        Value::Owned(d) => d,
        Value::Param(id) => store.expect("parameter node without a store").get(*id).data(),
    }
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.shape.iter().product();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &a) in out.iter_mut().zip(row) {
        *o = (a - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
