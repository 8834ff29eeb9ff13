use std::rc::Rc;

use super::param::{ParamId, ParamStore};
use crate::error::{DailError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        w: ParamId,
        b: ParamId,
        x: NodeId,
    },
    /// Dense layer applied to an indicator vector: sum of the selected
    /// weight columns plus bias.
    SparseDense {
        w: ParamId,
        b: ParamId,
        cols: Vec<usize>,
    },
    Embed {
        table: ParamId,
        row: usize,
    },
    RnnStep {
        w_h: ParamId,
        w_x: ParamId,
        b: ParamId,
        h: NodeId,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    /// Per-group softmax dotted with the atom values.
    Expectations {
        logits: NodeId,
        atoms: Rc<[f64]>,
        probs: Vec<f64>,
    },
    Pick {
        x: NodeId,
        index: usize,
    },
    LogSumExp {
        x: NodeId,
        softmax: Vec<f64>,
    },
    KlDiv {
        logits: NodeId,
        offset: usize,
        target: Vec<f64>,
        softmax: Vec<f64>,
    },
    Cosine {
        a: NodeId,
        b: NodeId,
        norm_a: f64,
        norm_b: f64,
    },
    LogSigmoid {
        x: NodeId,
        sign: f64,
    },
    SquaredError {
        x: NodeId,
        target: f64,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Record of one forward pass. Backward walks the nodes in reverse order of
/// creation and accumulates into the parameter gradients of a [`ParamStore`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `out = W x + b` for row-major `W` of shape (out.len(), x.len()).
pub fn matvec_bias(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = b[r] + acc;
    }
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -log(1 + e^{-x}), split for stability
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(what: &str, expected: usize, got: usize) -> DailError {
    DailError::Shape(format!("{what}: expected length {expected}, got {got}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn dense(&mut self, store: &ParamStore, w: ParamId, b: ParamId, x: NodeId) -> Result<NodeId> {
        let (pw, pb) = (store.get(w), store.get(b));
        let xv = &self.nodes[x.0].value;
        if pw.cols != xv.len() {
            return Err(shape_err(&format!("dense `{}` input", pw.name), pw.cols, xv.len()));
        }
        if pb.len() != pw.rows {
            return Err(shape_err(&format!("dense `{}` bias", pb.name), pw.rows, pb.len()));
        }
        let mut out = vec![0.0; pw.rows];
        matvec_bias(&pw.values, &pb.values, xv, &mut out);
        Ok(self.push(out, Op::Dense { w, b, x }))
    }

    pub fn sparse_dense(&mut self, store: &ParamStore, w: ParamId, b: ParamId, cols: &[usize]) -> Result<NodeId> {
        let (pw, pb) = (store.get(w), store.get(b));
        if pb.len() != pw.rows {
            return Err(shape_err(&format!("dense `{}` bias", pb.name), pw.rows, pb.len()));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= pw.cols) {
            return Err(DailError::Index {
                what: "dense input",
                index: c,
                len: pw.cols,
            });
        }
        let mut out = pb.values.clone();
        for (r, o) in out.iter_mut().enumerate() {
            for &c in cols {
                *o += pw.values[r * pw.cols + c];
            }
        }
        Ok(self.push(out, Op::SparseDense { w, b, cols: cols.to_vec() }))
    }

    pub fn embed(&mut self, store: &ParamStore, table: ParamId, row: usize) -> Result<NodeId> {
        let p = store.get(table);
        if row >= p.rows {
            return Err(DailError::Index {
                what: "embedding table",
                index: row,
                len: p.rows,
            });
        }
        let value = p.values[row * p.cols..(row + 1) * p.cols].to_vec();
        Ok(self.push(value, Op::Embed { table, row }))
    }

    /// `tanh(W_h h + W_x x + b)`
    pub fn rnn_step(
        &mut self,
        store: &ParamStore,
        w_h: ParamId,
        w_x: ParamId,
        b: ParamId,
        h: NodeId,
        x: NodeId,
    ) -> Result<NodeId> {
        let (ph, px, pb) = (store.get(w_h), store.get(w_x), store.get(b));
        let hv = &self.nodes[h.0].value;
        let xv = &self.nodes[x.0].value;
        if ph.cols != hv.len() || ph.rows != hv.len() {
            return Err(shape_err("rnn hidden state", ph.cols, hv.len()));
        }
        if px.cols != xv.len() {
            return Err(shape_err("rnn input", px.cols, xv.len()));
        }
        if px.rows != ph.rows || pb.len() != ph.rows {
            return Err(DailError::Shape("rnn cell parameters disagree on width".into()));
        }
        let mut pre = vec![0.0; ph.rows];
        matvec_bias(&ph.values, &pb.values, hv, &mut pre);
        let mut inp = vec![0.0; px.rows];
        let zeros = vec![0.0; px.rows];
        matvec_bias(&px.values, &zeros, xv, &mut inp);
        let out = pre.iter().zip(&inp).map(|(a, b)| (a + b).tanh()).collect();
        Ok(self.push(out, Op::RnnStep { w_h, w_x, b, h, x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.len() != bv.len() {
            return Err(shape_err("add", av.len(), bv.len()));
        }
        let out = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(out, Op::Tanh(x))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut out = Vec::with_capacity(parts.iter().map(|p| self.nodes[p.0].value.len()).sum());
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Splits `logits` into groups of `atoms.len()` and returns the expected
    /// atom value under each group's softmax.
    pub fn expectations(&mut self, logits: NodeId, atoms: Rc<[f64]>) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        let m = atoms.len();
        if m == 0 || lv.len() % m != 0 {
            return Err(shape_err("expectations", m, lv.len()));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut out = Vec::with_capacity(lv.len() / m);
        for (chunk, pchunk) in lv.chunks(m).zip(probs.chunks_mut(m)) {
            softmax_into(chunk, pchunk);
            out.push(pchunk.iter().zip(atoms.iter()).map(|(p, z)| p * z).sum());
        }
        Ok(self.push(out, Op::Expectations { logits, atoms, probs }))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let v = *xv.get(index).ok_or(DailError::Index {
            what: "vector",
            index,
            len: xv.len(),
        })?;
        Ok(self.push(vec![v], Op::Pick { x, index }))
    }

    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(DailError::invalid("logsumexp of an empty vector"));
        }
        let lse = log_sum_exp(xv);
        let mut softmax = vec![0.0; xv.len()];
        softmax_into(xv, &mut softmax);
        Ok(self.push(vec![lse], Op::LogSumExp { x, softmax }))
    }

    /// `KL(target || softmax(logits[offset..offset + target.len()]))`
    pub fn kl_div(&mut self, logits: NodeId, offset: usize, target: &[f64]) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        let m = target.len();
        if offset + m > lv.len() {
            return Err(shape_err("kl logits", offset + m, lv.len()));
        }
        let seg = &lv[offset..offset + m];
        let lse = log_sum_exp(seg);
        let mut softmax = vec![0.0; m];
        softmax_into(seg, &mut softmax);
        let mut kl = 0.0;
        for (t, l) in target.iter().zip(seg) {
            if *t > 0.0 {
                kl += t * (t.ln() - (l - lse));
            }
        }
        Ok(self.push(
            vec![kl],
            Op::KlDiv {
                logits,
                offset,
                target: target.to_vec(),
                softmax,
            },
        ))
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.len() != bv.len() {
            return Err(shape_err("cosine", av.len(), bv.len()));
        }
        let norm_a = av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_b = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_a == 0.0 || norm_b == 0.0 {
            return Err(DailError::DegenerateEmbedding);
        }
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        Ok(self.push(vec![dot / (norm_a * norm_b)], Op::Cosine { a, b, norm_a, norm_b }))
    }

    /// `log σ(sign * x)` for a scalar node.
    pub fn log_sigmoid(&mut self, x: NodeId, sign: f64) -> NodeId {
        let v = log_sigmoid(sign * self.scalar(x));
        self.push(vec![v], Op::LogSigmoid { x, sign })
    }

    /// `(x - target)^2` for a scalar node.
    pub fn squared_error(&mut self, x: NodeId, target: f64) -> NodeId {
        let d = self.scalar(x) - target;
        self.push(vec![d * d], Op::SquaredError { x, target })
    }

    /// `Σ w_i x_i` over scalar nodes, summed in the given order.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut s = 0.0;
        for &(id, w) in terms {
            s += w * self.scalar(id);
        }
        self.push(vec![s], Op::WeightedSum(terms.to_vec()))
    }

    /// Accumulates d(root)/d(param) into `store`'s gradients. `root` must be
    /// a scalar node.
    pub fn backward(&self, root: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(DailError::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        grads[root.0] = vec![1.0];
        for i in (0..=root.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Dense { w, b, x } => {
                    let xv = &self.nodes[x.0].value;
                    let cols = xv.len();
                    let mut gx = vec![0.0; cols];
                    {
                        let p = store.get_mut(*w);
                        let (wv, wg) = (&p.values, &mut p.grad);
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            let row = r * cols;
                            for c in 0..cols {
                                wg[row + c] += gr * xv[c];
                                gx[c] += wv[row + c] * gr;
                            }
                        }
                    }
                    add_into(&mut store.get_mut(*b).grad, &g);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::SparseDense { w, b, cols } => {
                    let p = store.get_mut(*w);
                    let width = p.cols;
                    for (r, &gr) in g.iter().enumerate() {
                        for &c in cols {
                            p.grad[r * width + c] += gr;
                        }
                    }
                    add_into(&mut store.get_mut(*b).grad, &g);
                }
                Op::Embed { table, row } => {
                    let p = store.get_mut(*table);
                    let cols = p.cols;
                    add_into(&mut p.grad[row * cols..(row + 1) * cols], &g);
                }
                Op::RnnStep { w_h, w_x, b, h, x } => {
                    // through tanh: d pre = g * (1 - y^2)
                    let gpre: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect();
                    let hv = &self.nodes[h.0].value;
                    let xv = &self.nodes[x.0].value;
                    let gh = matvec_backward(store, *w_h, hv, &gpre);
                    let gx = matvec_backward(store, *w_x, xv, &gpre);
                    add_into(&mut store.get_mut(*b).grad, &gpre);
                    accumulate(&mut grads, *h, &gh);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Tanh(x) => {
                    let gx: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        accumulate(&mut grads, *p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Expectations { logits, atoms, probs } => {
                    let m = atoms.len();
                    let mut gl = vec![0.0; probs.len()];
                    for (k, &gk) in g.iter().enumerate() {
                        let q = node.value[k];
                        for j in 0..m {
                            let p = probs[k * m + j];
                            gl[k * m + j] = gk * p * (atoms[j] - q);
                        }
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::Pick { x, index } => {
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    gx[*index] = g[0];
                    accumulate(&mut grads, *x, &gx);
                }
                Op::LogSumExp { x, softmax } => {
                    let gx: Vec<f64> = softmax.iter().map(|p| p * g[0]).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::KlDiv {
                    logits,
                    offset,
                    target,
                    softmax,
                } => {
                    let mut gl = vec![0.0; self.nodes[logits.0].value.len()];
                    for j in 0..target.len() {
                        gl[offset + j] = g[0] * (softmax[j] - target[j]);
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::Cosine { a, b, norm_a, norm_b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let cos = node.value[0];
                    let ga: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (y / (norm_a * norm_b) - cos * x / (norm_a * norm_a)))
                        .collect();
                    let gb: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (x / (norm_a * norm_b) - cos * y / (norm_b * norm_b)))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::LogSigmoid { x, sign } => {
                    let v = sign * self.scalar(*x);
                    accumulate(&mut grads, *x, &[g[0] * sign * sigmoid(-v)]);
                }
                Op::SquaredError { x, target } => {
                    let d = self.scalar(*x) - target;
                    accumulate(&mut grads, *x, &[g[0] * 2.0 * d]);
                }
                Op::WeightedSum(terms) => {
                    for &(id, w) in terms {
                        accumulate(&mut grads, id, &[g[0] * w]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Vec<f64>], id: NodeId, g: &[f64]) {
    let slot = &mut grads[id.0];
    if slot.is_empty() {
        slot.extend_from_slice(g);
    } else {
        add_into(slot, g);
    }
}

/// Adds `g x^T` into W's gradient and returns `W^T g`.
fn matvec_backward(store: &mut ParamStore, w: ParamId, x: &[f64], g: &[f64]) -> Vec<f64> {
    let p = store.get_mut(w);
    let cols = p.cols;
    let mut gx = vec![0.0; cols];
    let (wv, wg) = (&p.values, &mut p.grad);
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = r * cols;
        for c in 0..cols {
            wg[row + c] += gr * x[c];
            gx[c] += wv[row + c] * gr;
        }
    }
    gx
}
