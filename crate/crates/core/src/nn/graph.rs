//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! Every node holds a `rows x cols` matrix. Parameters are stored as `f32`
//! tensors but node values and adjoints are kept in `f64`, which keeps
//! central-difference gradient checks meaningful at small step sizes.
//! Operations are appended in evaluation order, so reverse traversal of the
//! node list is a valid topological order for the backward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParameterTree, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

enum Op {
    Input,
    Param {
        path: String,
        shape: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Rows {
        x: NodeId,
        start: usize,
    },
    ReplaceRows {
        x: NodeId,
        fill: NodeId,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    LogSoftmax(NodeId),
    Sum(NodeId),
    Loss {
        input: NodeId,
        grad: Vec<f64>,
    },
}

/// Gradients keyed by parameter path, shaped like the bound parameters.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.grads.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.grads
    }

    /// Gradient tree covering every path of `params`; parameters that did not
    /// take part in the computation get zeros.
    pub fn into_tree(mut self, params: &ParameterTree) -> ParameterTree {
        params
            .iter()
            .map(|(path, t)| {
                let g = self
                    .grads
                    .remove(path)
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (path.to_string(), g)
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn value_f64(&self, id: NodeId) -> &[f64] {
        &self.node(id).value
    }

    /// Node value rounded to `f32`, shaped `rows x cols`.
    pub fn value(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::new(
            vec![n.rows, n.cols],
            n.value.iter().map(|&v| v as f32).collect(),
        )
        .expect("node dims are positive")
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.node(id).value[0]
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.input_f64(
            t.rows(),
            t.cols(),
            t.data().iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn input_f64(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.push(rows, cols, value, Op::Input)
    }

    /// Binds a trainable tensor. Vectors become `1 x n` rows.
    pub fn param(&mut self, path: &str, t: &Tensor) -> NodeId {
        self.push(
            t.rows(),
            t.cols(),
            t.data().iter().map(|&v| v as f64).collect(),
            Op::Param {
                path: path.to_string(),
                shape: t.shape().to_vec(),
            },
        )
    }

    pub fn param_from(&mut self, tree: &ParameterTree, path: &str) -> Result<NodeId> {
        Ok(self.param(path, tree.get(path)?))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = matmul(&self.node(a).value, &self.node(b).value, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `x + b` with `b` a `1 x cols` row broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.dims(b) != (1, c) {
            return Err(Error::Shape(format!("bias {:?} for {r}x{c}", self.dims(b))));
        }
        let bv = &self.node(b).value;
        let mut out = self.node(x).value.clone();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(r, c, out, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let (r, c) = self.dims(a);
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    /// Rows `start..start + count` of `x`.
    pub fn rows(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if count == 0 || start + count > r {
            return Err(Error::Shape(format!(
                "rows {start}..{} of a {r}-row matrix",
                start + count
            )));
        }
        let out = self.node(x).value[start * c..(start + count) * c].to_vec();
        Ok(self.push(count, c, out, Op::Rows { x, start }))
    }

    /// Copy of `x` with each listed row replaced by the `1 x cols` row `fill`.
    pub fn replace_rows(&mut self, x: NodeId, fill: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.dims(fill) != (1, c) || rows.iter().any(|&i| i >= r) {
            return Err(Error::Shape("replace_rows fill/row index".into()));
        }
        let mut out = self.node(x).value.clone();
        let fv = &self.node(fill).value;
        for &i in rows {
            out[i * c..(i + 1) * c].copy_from_slice(fv);
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::ReplaceRows {
                x,
                fill,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::Shape("layer norm gain/bias".into()));
        }
        let xv = &self.node(x).value;
        let g = &self.node(gain).value;
        let b = &self.node(bias).value;
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let out = self.node(x).value.iter().map(|&v| gelu(v)).collect();
        self.push(r, c, out, Op::Gelu(x))
    }

    /// Bidirectional scaled dot-product attention over `heads` column groups.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (t, d) = self.dims(q);
        if self.dims(k) != (t, d) || self.dims(v) != (t, d) || heads == 0 || d % heads != 0 {
            return Err(Error::Shape("attention q/k/v or head split".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            &self.node(q).value,
            &self.node(k).value,
            &self.node(v).value,
        );
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &qv[i * d + off..i * d + off + dh];
                let row = &mut p[i * t..(i + 1) * t];
                for j in 0..t {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    row[j] = dot(qi, kj) * scale;
                }
                softmax_in_place(row);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..t {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    let pij = row[j];
                    oi.iter_mut().zip(vj).for_each(|(o, v)| *o += pij * v);
                }
            }
        }
        Ok(self.push(
            t,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let mut out = self.node(x).value.clone();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(r, c, out, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.node(x).value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Scalar loss node whose derivative with respect to `input` was computed
    /// externally (for example by the CTC forward-backward recursion).
    pub fn loss(&mut self, input: NodeId, value: f64, grad: Vec<f64>) -> Result<NodeId> {
        let (r, c) = self.dims(input);
        if grad.len() != r * c {
            return Err(Error::Shape(format!(
                "loss gradient has {} entries for a {r}x{c} input",
                grad.len()
            )));
        }
        Ok(self.push(1, 1, vec![value], Op::Loss { input, grad }))
    }

    /// Reverse-mode accumulation from the scalar node `loss`. A graph can be
    /// differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.dims(loss) != (1, 1) {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Input => {}
                Op::Param { path, shape } => {
                    let t = Tensor::new(shape.clone(), g.iter().map(|&v| v as f32).collect())?;
                    match grads.get_mut(path) {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(path.clone(), t);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = c;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = matmul_nt(&g, bv, m, n, k);
                    let db = matmul_tn(av, &g, m, k, n);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddBias(x, b) => {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut adj, *b, db);
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Rows { x, start } => {
                    let (xr, _) = self.dims(*x);
                    let mut dx = vec![0.0; xr * c];
                    dx[start * c..(start + r) * c].copy_from_slice(&g);
                    accumulate(&mut adj, *x, dx);
                }
                Op::ReplaceRows { x, fill, rows } => {
                    let mut dx = g;
                    let mut dfill = vec![0.0; c];
                    for &i in rows {
                        let row = &mut dx[i * c..(i + 1) * c];
                        dfill.iter_mut().zip(row.iter()).for_each(|(d, v)| *d += v);
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                    accumulate(&mut adj, *fill, dfill);
                    accumulate(&mut adj, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.nodes[gain.0].value;
                    let mut dx = vec![0.0; r * c];
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    let n = c as f64;
                    for i in 0..r {
                        let gy = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let d = gy[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                            dgain[j] += gy[j] * xh[j];
                            dbias[j] += gy[j];
                        }
                        let is = inv_std[i];
                        for j in 0..c {
                            let d = gy[j] * gv[j];
                            dx[i * c + j] = is / n * (n * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    accumulate(&mut adj, *gain, dgain);
                    accumulate(&mut adj, *bias, dbias);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g.iter().zip(xv).map(|(d, &v)| d * gelu_grad(v)).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (t, d) = (r, c);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let qv = &self.nodes[q.0].value;
                    let kv = &self.nodes[k.0].value;
                    let vv = &self.nodes[v.0].value;
                    let mut dq = vec![0.0; t * d];
                    let mut dk = vec![0.0; t * d];
                    let mut dv = vec![0.0; t * d];
                    let mut ds = vec![0.0; t];
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[h * t * t..(h + 1) * t * t];
                        for i in 0..t {
                            let go = &g[i * d + off..i * d + off + dh];
                            let prow = &p[i * t..(i + 1) * t];
                            let mut dot_sum = 0.0;
                            for j in 0..t {
                                let vj = &vv[j * d + off..j * d + off + dh];
                                let dp = dot(go, vj);
                                ds[j] = dp;
                                dot_sum += dp * prow[j];
                                let pij = prow[j];
                                dv[j * d + off..j * d + off + dh]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(a, b)| *a += pij * b);
                            }
                            for j in 0..t {
                                let s = prow[j] * (ds[j] - dot_sum) * scale;
                                if s == 0.0 {
                                    continue;
                                }
                                for e in 0..dh {
                                    dq[i * d + off + e] += s * kv[j * d + off + e];
                                    dk[j * d + off + e] += s * qv[i * d + off + e];
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *q, dq);
                    accumulate(&mut adj, *k, dk);
                    accumulate(&mut adj, *v, dv);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gy = &g[i * c..(i + 1) * c];
                        let s: f64 = gy.iter().sum();
                        for j in 0..c {
                            dx[i * c + j] = gy[j] - y[i * c + j].exp() * s;
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Sum(x) => {
                    let (xr, xc) = self.dims(*x);
                    accumulate(&mut adj, *x, vec![g[0]; xr * xc]);
                }
                Op::Loss { input, grad } => {
                    let dx = grad.iter().map(|v| v * g[0]).collect();
                    accumulate(&mut adj, *input, dx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `a[m x k] * b[k x n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
        }
    }
    out
}

/// `a[m x n] * b[k x n]^T`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `a[m x k]^T * b[m x n]`
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n]
                .iter_mut()
                .zip(brow)
                .for_each(|(o, b)| *o += aip * b);
        }
    }
    out
}
