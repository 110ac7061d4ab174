//! Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Values are 64-bit floats stored row-major. A [`Graph`] records every
//! executed operation; [`Graph::backward`] replays the tape in reverse and
//! accumulates gradients into leaf nodes. Shapes are explicit everywhere and
//! there is no broadcasting beyond row-vector bias addition.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for node produced by {op}")]
    NonFiniteGrad { op: &'static str },
    #[error("cross_entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("non-deterministic function: two forward passes differ ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
    },
    Gelu(usize),
    Sum(usize),
    AssembleRows(Vec<(usize, usize)>),
    NarrowCols {
        a: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    CrossEntropyRows {
        logits: usize,
        labels: Vec<usize>,
    },
    WeightedSumSq {
        a: usize,
        weights: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::AssembleRows(..) => "assemble_rows",
            Op::NarrowCols { .. } => "narrow_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::CrossEntropyRows { .. } => "cross_entropy",
            Op::WeightedSumSq { .. } => "weighted_sum_sq",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations. One reverse sweep computes every
/// gradient; leaves created with `requires_grad` accumulate into `grad`.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            requires_grad: requires,
            op,
        });
        Ok(Tensor {
            id: self.nodes.len() - 1,
        })
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NumericsError::InvalidArgument {
                op: "leaf",
                msg: format!("shape {:?} does not match data length {}", shape, data.len()),
            });
        }
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.constant(&[1, 1], vec![v])
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn grad(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].grad
    }

    pub fn value(&self, t: Tensor) -> f64 {
        self.nodes[t.id].data[0]
    }

    fn dims2(&self, t: Tensor) -> (usize, usize) {
        let s = &self.nodes[t.id].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("expected rank-2 tensor, got {:?}", s),
        }
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.id].shape.clone(),
                rhs: self.nodes[b.id].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.id].data, &self.nodes[b.id].data, &mut out, m, k, n);
        let req = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        self.push(vec![m, n], out, req, Op::Matmul(a.id, b.id))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.id].shape.clone(),
                rhs: self.nodes[b.id].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x + y)
            .collect();
        let req = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        let shape = self.nodes[a.id].shape.clone();
        self.push(shape, data, req, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.id].shape.clone(),
                rhs: self.nodes[b.id].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x * y)
            .collect();
        let req = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        let shape = self.nodes[a.id].shape.clone();
        self.push(shape, data, req, Op::Mul(a.id, b.id))
    }

    /// `[r, c] + [1, c]` row-broadcast bias addition.
    pub fn add_row(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2(a);
        let (br, bc) = self.dims2(bias);
        if br != 1 || bc != c {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[a.id].shape.clone(),
                rhs: self.nodes[bias.id].shape.clone(),
            });
        }
        let mut data = self.nodes[a.id].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[bias.id].data[j];
            }
        }
        let req = self.nodes[a.id].requires_grad || self.nodes[bias.id].requires_grad;
        self.push(vec![r, c], data, req, Op::AddRow(a.id, bias.id))
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|x| x * s).collect();
        let req = self.nodes[a.id].requires_grad;
        let shape = self.nodes[a.id].shape.clone();
        self.push(shape, data, req, Op::Scale(a.id, s))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2(a);
        let src = &self.nodes[a.id].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let req = self.nodes[a.id].requires_grad;
        self.push(vec![c, r], data, req, Op::Transpose(a.id))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2(a);
        let src = &self.nodes[a.id].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let req = self.nodes[a.id].requires_grad;
        let shape = self.nodes[a.id].shape.clone();
        self.push(shape, data, req, Op::SoftmaxRows(a.id))
    }

    /// Row-wise layer normalization with affine transform. Population (1/d)
    /// variance, eps inside the square root.
    pub fn layer_norm_rows(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let (r, d) = self.dims2(x);
        let (_, gd) = self.dims2(gamma);
        let (_, bd) = self.dims2(beta);
        if gd != d || bd != d {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.id].shape.clone(),
                rhs: self.nodes[gamma.id].shape.clone(),
            });
        }
        let src = &self.nodes[x.id].data;
        let g = &self.nodes[gamma.id].data;
        let b = &self.nodes[beta.id].data;
        let mut data = vec![0.0; r * d];
        let mut means = vec![0.0; r];
        let mut inv_stds = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let req = self.nodes[x.id].requires_grad
            || self.nodes[gamma.id].requires_grad
            || self.nodes[beta.id].requires_grad;
        self.push(
            vec![r, d],
            data,
            req,
            Op::LayerNormRows {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                inv_std: inv_stds,
                mean: means,
            },
        )
    }

    pub fn gelu(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|&x| gelu_scalar(x)).collect();
        let req = self.nodes[a.id].requires_grad;
        let shape = self.nodes[a.id].shape.clone();
        self.push(shape, data, req, Op::Gelu(a.id))
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let s: f64 = self.nodes[a.id].data.iter().sum();
        let req = self.nodes[a.id].requires_grad;
        self.push(vec![1, 1], vec![s], req, Op::Sum(a.id))
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let n = self.nodes[a.id].data.len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Builds a matrix from rows of other tensors: output row `i` is row
    /// `sources[i].1` of tensor `sources[i].0`. All sources must share the
    /// same column count. Backward scatters gradient rows to the sources.
    pub fn assemble_rows(&mut self, sources: &[(Tensor, usize)]) -> Result<Tensor> {
        if sources.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "assemble_rows",
                msg: "no source rows".into(),
            });
        }
        let (_, c) = self.dims2(sources[0].0);
        let mut data = Vec::with_capacity(sources.len() * c);
        let mut req = false;
        let mut ids = Vec::with_capacity(sources.len());
        for &(t, row) in sources {
            let (r, tc) = self.dims2(t);
            if tc != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "assemble_rows",
                    lhs: vec![1, c],
                    rhs: self.nodes[t.id].shape.clone(),
                });
            }
            if row >= r {
                return Err(NumericsError::InvalidArgument {
                    op: "assemble_rows",
                    msg: format!("row {row} out of range for {r} rows"),
                });
            }
            data.extend_from_slice(&self.nodes[t.id].data[row * c..(row + 1) * c]);
            req |= self.nodes[t.id].requires_grad;
            ids.push((t.id, row));
        }
        self.push(vec![sources.len(), c], data, req, Op::AssembleRows(ids))
    }

    /// Gathers whole rows of one tensor, preserving order.
    pub fn gather_rows(&mut self, a: Tensor, rows: &[usize]) -> Result<Tensor> {
        let sources: Vec<(Tensor, usize)> = rows.iter().map(|&r| (a, r)).collect();
        self.assemble_rows(&sources)
    }

    pub fn narrow_cols(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2(a);
        if start + len > c {
            return Err(NumericsError::InvalidArgument {
                op: "narrow_cols",
                msg: format!("columns {start}..{} out of range for {c}", start + len),
            });
        }
        let src = &self.nodes[a.id].data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let req = self.nodes[a.id].requires_grad;
        self.push(vec![r, len], data, req, Op::NarrowCols { a: a.id, start })
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "concat_cols",
                msg: "no parts".into(),
            });
        }
        let (r, _) = self.dims2(parts[0]);
        let mut total = 0;
        let mut req = false;
        for &p in parts {
            let (pr, pc) = self.dims2(p);
            if pr != r {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].id].shape.clone(),
                    rhs: self.nodes[p.id].shape.clone(),
                });
            }
            total += pc;
            req |= self.nodes[p.id].requires_grad;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let (_, pc) = self.dims2(p);
                data.extend_from_slice(&self.nodes[p.id].data[i * pc..(i + 1) * pc]);
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(vec![r, total], data, req, Op::ConcatCols(ids))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, computed with
    /// log-sum-exp stabilization.
    pub fn cross_entropy_from_logits(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let (r, k) = self.dims2(logits);
        if labels.len() != r {
            return Err(NumericsError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{} labels for {} rows", labels.len(), r),
            });
        }
        let src = &self.nodes[logits.id].data;
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(NumericsError::LabelOutOfRange { label, classes: k });
            }
            let row = &src[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let req = self.nodes[logits.id].requires_grad;
        self.push(
            vec![1, 1],
            vec![total / r as f64],
            req,
            Op::CrossEntropyRows {
                logits: logits.id,
                labels: labels.to_vec(),
            },
        )
    }

    /// `sum_i weights[i] * a[i]^2` over the flattened tensor.
    pub fn weighted_sum_sq(&mut self, a: Tensor, weights: &[f64]) -> Result<Tensor> {
        if weights.len() != self.nodes[a.id].data.len() {
            return Err(NumericsError::InvalidArgument {
                op: "weighted_sum_sq",
                msg: format!(
                    "{} weights for {} elements",
                    weights.len(),
                    self.nodes[a.id].data.len()
                ),
            });
        }
        let s: f64 = self.nodes[a.id]
            .data
            .iter()
            .zip(weights)
            .map(|(x, w)| w * x * x)
            .sum();
        let req = self.nodes[a.id].requires_grad;
        self.push(
            vec![1, 1],
            vec![s],
            req,
            Op::WeightedSumSq {
                a: a.id,
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar node. Gradients accumulate into every
    /// node with `requires_grad`; safe to call once per graph.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.id].data.len() != 1 {
            return Err(NumericsError::InvalidArgument {
                op: "backward",
                msg: "loss must be scalar".into(),
            });
        }
        self.nodes[loss.id].grad[0] = 1.0;
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    if self.nodes[a].requires_grad {
                        // dA = G * B^T
                        let mut da = vec![0.0; m * k];
                        let g = &self.nodes[id].grad;
                        let bd = &self.nodes[b].data;
                        for i in 0..m {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for l in 0..n {
                                    acc += g[i * n + l] * bd[j * n + l];
                                }
                                da[i * k + j] = acc;
                            }
                        }
                        add_assign(&mut self.nodes[a].grad, &da);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = A^T * G
                        let mut db = vec![0.0; k * n];
                        let g = &self.nodes[id].grad;
                        let ad = &self.nodes[a].data;
                        for i in 0..k {
                            for l in 0..m {
                                let av = ad[l * k + i];
                                if av != 0.0 {
                                    for j in 0..n {
                                        db[i * n + j] += av * g[l * n + j];
                                    }
                                }
                            }
                        }
                        add_assign(&mut self.nodes[b].grad, &db);
                    }
                }
                Op::Add(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    if self.nodes[a].requires_grad {
                        add_assign(&mut self.nodes[a].grad, &g);
                    }
                    if self.nodes[b].requires_grad {
                        add_assign(&mut self.nodes[b].grad, &g);
                    }
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    if self.nodes[a].requires_grad {
                        let bd = self.nodes[b].data.clone();
                        for (i, gi) in g.iter().enumerate() {
                            self.nodes[a].grad[i] += gi * bd[i];
                        }
                    }
                    if self.nodes[b].requires_grad {
                        let ad = self.nodes[a].data.clone();
                        for (i, gi) in g.iter().enumerate() {
                            self.nodes[b].grad[i] += gi * ad[i];
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    let g = self.nodes[id].grad.clone();
                    let (r, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                    if self.nodes[a].requires_grad {
                        add_assign(&mut self.nodes[a].grad, &g);
                    }
                    if self.nodes[bias].requires_grad {
                        for i in 0..r {
                            for j in 0..c {
                                self.nodes[bias].grad[j] += g[i * c + j];
                            }
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if self.nodes[a].requires_grad {
                        let g = self.nodes[id].grad.clone();
                        for (i, gi) in g.iter().enumerate() {
                            self.nodes[a].grad[i] += gi * s;
                        }
                    }
                }
                Op::Transpose(a) => {
                    if self.nodes[a].requires_grad {
                        let (c, r) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                        let g = self.nodes[id].grad.clone();
                        for i in 0..c {
                            for j in 0..r {
                                self.nodes[a].grad[j * c + i] += g[i * r + j];
                            }
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.nodes[a].requires_grad {
                        let (r, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                        let y = self.nodes[id].data.clone();
                        let g = self.nodes[id].grad.clone();
                        for i in 0..r {
                            let mut dot = 0.0;
                            for j in 0..c {
                                dot += g[i * c + j] * y[i * c + j];
                            }
                            for j in 0..c {
                                self.nodes[a].grad[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNormRows {
                    x,
                    gamma,
                    beta,
                    inv_std,
                    mean,
                } => {
                    let (r, d) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                    let g = self.nodes[id].grad.clone();
                    let xd = self.nodes[x].data.clone();
                    let gd = self.nodes[gamma].data.clone();
                    for i in 0..r {
                        let is = inv_std[i];
                        let mu = mean[i];
                        // xhat_j = (x_j - mu) * is
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xd[i * d + j] - mu) * is;
                            let dy = g[i * d + j] * gd[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                        if self.nodes[x].requires_grad {
                            for j in 0..d {
                                let xhat = (xd[i * d + j] - mu) * is;
                                let dy = g[i * d + j] * gd[j];
                                self.nodes[x].grad[i * d + j] +=
                                    is * (dy - sum_dy / d as f64 - xhat * sum_dy_xhat / d as f64);
                            }
                        }
                        if self.nodes[gamma].requires_grad {
                            for j in 0..d {
                                let xhat = (xd[i * d + j] - mu) * is;
                                self.nodes[gamma].grad[j] += g[i * d + j] * xhat;
                            }
                        }
                        if self.nodes[beta].requires_grad {
                            for j in 0..d {
                                self.nodes[beta].grad[j] += g[i * d + j];
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    if self.nodes[a].requires_grad {
                        let g = self.nodes[id].grad.clone();
                        let xd = self.nodes[a].data.clone();
                        for (i, gi) in g.iter().enumerate() {
                            self.nodes[a].grad[i] += gi * gelu_grad_scalar(xd[i]);
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.nodes[a].requires_grad {
                        let g = self.nodes[id].grad[0];
                        for v in self.nodes[a].grad.iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::AssembleRows(sources) => {
                    let c = self.nodes[id].shape[1];
                    let g = self.nodes[id].grad.clone();
                    for (out_row, &(src, src_row)) in sources.iter().enumerate() {
                        if self.nodes[src].requires_grad {
                            for j in 0..c {
                                self.nodes[src].grad[src_row * c + j] += g[out_row * c + j];
                            }
                        }
                    }
                }
                Op::NarrowCols { a, start } => {
                    if self.nodes[a].requires_grad {
                        let (r, len) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                        let c = self.nodes[a].shape[1];
                        let g = self.nodes[id].grad.clone();
                        for i in 0..r {
                            for j in 0..len {
                                self.nodes[a].grad[i * c + start + j] += g[i * len + j];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let r = self.nodes[id].shape[0];
                    let total = self.nodes[id].shape[1];
                    let g = self.nodes[id].grad.clone();
                    let mut col = 0;
                    for &p in &parts {
                        let pc = self.nodes[p].shape[1];
                        if self.nodes[p].requires_grad {
                            for i in 0..r {
                                for j in 0..pc {
                                    self.nodes[p].grad[i * pc + j] += g[i * total + col + j];
                                }
                            }
                        }
                        col += pc;
                    }
                }
                Op::CrossEntropyRows { logits, labels } => {
                    if self.nodes[logits].requires_grad {
                        let (r, k) = (self.nodes[logits].shape[0], self.nodes[logits].shape[1]);
                        let g = self.nodes[id].grad[0] / r as f64;
                        let src = self.nodes[logits].data.clone();
                        for (i, &label) in labels.iter().enumerate() {
                            let row = &src[i * k..(i + 1) * k];
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                            for j in 0..k {
                                let p = (row[j] - m).exp() / sum;
                                let indicator = if j == label { 1.0 } else { 0.0 };
                                self.nodes[logits].grad[i * k + j] += g * (p - indicator);
                            }
                        }
                    }
                }
                Op::WeightedSumSq { a, weights } => {
                    if self.nodes[a].requires_grad {
                        let g = self.nodes[id].grad[0];
                        let ad = self.nodes[a].data.clone();
                        for (i, w) in weights.iter().enumerate() {
                            self.nodes[a].grad[i] += g * 2.0 * w * ad[i];
                        }
                    }
                }
            }
        }
        for node in &self.nodes {
            if node.requires_grad && !node.grad.iter().all(|v| v.is_finite()) {
                return Err(NumericsError::NonFiniteGrad { op: node.op.name() });
            }
        }
        Ok(())
    }
}

/// Row-major `[m,k] x [k,n]` product with fixed left-to-right accumulation
/// over `k`, so results are bitwise deterministic.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Named learnable tensors living outside any graph. Bound into a fresh
/// graph per forward pass; gradients are read back out after backward.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}");
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
            trainable: true,
        });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Marks parameters trainable or frozen by name prefix.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    /// Inserts every entry into `graph` as a leaf. Trainable entries get
    /// gradient accumulators.
    pub fn bind(&self, graph: &mut Graph) -> Result<Bound> {
        let mut map = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let t = graph.leaf(&e.shape, e.data.clone(), e.trainable)?;
            map.insert(e.name.clone(), t);
        }
        Ok(Bound { map })
    }
}

/// Name-to-tensor mapping for one graph binding of a [`ParamSet`].
pub struct Bound {
    map: HashMap<String, Tensor>,
}

impl Bound {
    pub fn t(&self, name: &str) -> Tensor {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn try_t(&self, name: &str) -> Result<Tensor> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }
}

/// One offending entry from a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    /// Worst offenders, largest error first (up to 10).
    pub worst: Vec<GradCheckEntry>,
}

/// Compares reverse-mode gradients against central finite differences for
/// every trainable parameter entry. `build` must be deterministic; it is
/// re-run with perturbed parameters. Error metric:
/// `|a - n| / max(1, |a|, |n|)`, i.e. absolute below magnitude one.
pub fn check_gradients<F>(params: &ParamSet, build: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Tensor>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g)?;
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss))
    };

    let l1 = eval(params)?;
    let l2 = eval(params)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(NumericsError::NonDeterministic { a: l1, b: l2 });
    }

    // Analytic gradients.
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let loss = build(&mut g, &bound)?;
    g.backward(loss)?;
    let mut analytic: HashMap<String, Vec<f64>> = HashMap::new();
    for e in params.entries() {
        if e.trainable {
            analytic.insert(e.name.clone(), g.grad(bound.t(&e.name)).to_vec());
        }
    }

    let mut work = params.clone();
    let mut entries: Vec<GradCheckEntry> = Vec::new();
    let mut n_checked = 0;
    let names: Vec<String> = params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.name.clone())
        .collect();
    for name in &names {
        let len = work.get(name).unwrap().data.len();
        for i in 0..len {
            let orig = work.get(name).unwrap().data[i];
            work.get_mut(name).unwrap().data[i] = orig + h;
            let lp = eval(&work)?;
            work.get_mut(name).unwrap().data[i] = orig - h;
            let lm = eval(&work)?;
            work.get_mut(name).unwrap().data[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[name][i];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            n_checked += 1;
            entries.push(GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }
    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = entries.first().map(|e| e.rel_err).unwrap_or(0.0);
    Ok(GradCheckReport {
        n_checked,
        max_rel_err,
        passed: max_rel_err <= tol,
        worst: entries.into_iter().take(10).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn g() -> Graph {
        Graph::new()
    }

    #[test]
    fn matmul_identity() {
        let mut graph = g();
        let i2 = graph.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = graph.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = graph.matmul(i2, a).unwrap();
        assert_eq!(graph.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_by_col() {
        let mut graph = g();
        let a = graph.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = graph.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let out = graph.matmul(a, b).unwrap();
        assert_eq!(graph.data(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut graph = g();
        let a = graph.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = graph.constant(&[3, 1], vec![3.0, 4.0, 5.0]).unwrap();
        let err = graph.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_frozen_value() {
        // d sum(a*b) / da at a=[[1,1]], b=[[2],[5]] must be [[2,5]].
        let mut graph = g();
        let a = graph.leaf(&[1, 2], vec![1.0, 1.0], true).unwrap();
        let b = graph.constant(&[2, 1], vec![2.0, 5.0]).unwrap();
        let prod = graph.matmul(a, b).unwrap();
        let loss = graph.sum(prod).unwrap();
        graph.backward(loss).unwrap();
        let ga = graph.grad(a);
        assert!((ga[0] - 2.0).abs() < 1e-10 && (ga[1] - 5.0).abs() < 1e-10);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut graph = g();
        let a = graph.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let out = graph.softmax_rows(a).unwrap();
        assert_eq!(graph.data(out), &[0.5, 0.5]);

        let b = graph.constant(&[1, 2], vec![1000.0, 1000.0]).unwrap();
        let out = graph.softmax_rows(b).unwrap();
        assert_eq!(graph.data(out), &[0.5, 0.5]);

        let c = graph.constant(&[1, 2], vec![0.0, 3.0_f64.ln()]).unwrap();
        let out = graph.softmax_rows(c).unwrap();
        let d = graph.data(out);
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut graph = g();
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let a = graph.constant(&[8, 5], data).unwrap();
        let out = graph.softmax_rows(a).unwrap();
        for i in 0..8 {
            let s: f64 = graph.data(out)[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut graph = g();
        let gamma = graph.constant(&[1, 3], vec![1.0; 3]).unwrap();
        let beta = graph.constant(&[1, 3], vec![0.0; 3]).unwrap();
        let x = graph.constant(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let out = graph.layer_norm_rows(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(graph.data(out), &[0.0, 0.0, 0.0]);

        let gamma2 = graph.constant(&[1, 2], vec![1.0; 2]).unwrap();
        let beta2 = graph.constant(&[1, 2], vec![0.0; 2]).unwrap();
        let x2 = graph.constant(&[1, 2], vec![-1.0, 1.0]).unwrap();
        let out2 = graph.layer_norm_rows(x2, gamma2, beta2, 1e-5).unwrap();
        let d = graph.data(out2);
        assert!((d[0] + 1.0).abs() < 1e-4 && (d[1] - 1.0).abs() < 1e-4);

        let beta5 = graph.constant(&[1, 2], vec![5.0; 2]).unwrap();
        let x3 = graph.constant(&[1, 2], vec![0.0, 2.0]).unwrap();
        let out3 = graph.layer_norm_rows(x3, gamma2, beta5, 1e-5).unwrap();
        let d = graph.data(out3);
        assert!((d[0] - 4.0).abs() < 1e-4 && (d[1] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut graph = g();
        let d = 16;
        let data: Vec<f64> = (0..4 * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let gamma = graph.constant(&[1, d], vec![1.0; d]).unwrap();
        let beta = graph.constant(&[1, d], vec![0.0; d]).unwrap();
        let x = graph.constant(&[4, d], data).unwrap();
        let out = graph.layer_norm_rows(x, gamma, beta, 0.0).unwrap();
        for i in 0..4 {
            let row = &graph.data(out)[i * d..(i + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut graph = g();
        let a = graph.constant(&[1, 4], vec![0.0; 4]).unwrap();
        let l = graph.cross_entropy_from_logits(a, &[0]).unwrap();
        assert!((graph.value(l) - 4.0_f64.ln()).abs() < 1e-12);

        let b = graph.constant(&[1, 2], vec![10.0, -10.0]).unwrap();
        let l = graph.cross_entropy_from_logits(b, &[0]).unwrap();
        assert!(graph.value(l) < 1e-8);

        let c = graph.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let l = graph.cross_entropy_from_logits(c, &[1]).unwrap();
        let expected = (1.0 + std::f64::consts::E).ln();
        assert!((graph.value(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut graph = g();
        let a = graph.constant(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            graph.cross_entropy_from_logits(a, &[3]),
            Err(NumericsError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn nonfinite_forward_is_error() {
        let mut graph = g();
        assert!(graph.constant(&[1, 1], vec![f64::NAN]).is_err());
        let big = graph.constant(&[1, 1], vec![1e308]).unwrap();
        assert!(graph.mul(big, big).is_err());
    }

    #[test]
    fn gradcheck_sum_of_squares() {
        let mut params = ParamSet::new();
        params.insert("x", vec![1, 3], vec![1.0, 2.0, 3.0]);
        let report = check_gradients(
            &params,
            |graph, bound| {
                let x = bound.t("x");
                graph.weighted_sum_sq(x, &[1.0; 3])
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        // grads are [2, 4, 6]
        let mut graph = g();
        let bound = params.bind(&mut graph).unwrap();
        let loss = graph.weighted_sum_sq(bound.t("x"), &[1.0; 3]).unwrap();
        graph.backward(loss).unwrap();
        assert_eq!(graph.grad(bound.t("x")), &[2.0, 4.0, 6.0]);
    }

    /// Central finite differences against backward for every primitive, over
    /// randomized shapes.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(2024);
        let n_trials = 100;
        for trial in 0..n_trials {
            let r = rng.gen_range(1..5usize);
            let c = rng.gen_range(1..6usize);
            let k = rng.gen_range(1..5usize);
            let rand_vec = |rng: &mut StdRng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
            };

            let mut params = ParamSet::new();
            params.insert("a", vec![r, c], rand_vec(&mut rng, r * c));
            params.insert("b", vec![c, k], rand_vec(&mut rng, c * k));
            params.insert("e", vec![r, c], rand_vec(&mut rng, r * c));
            params.insert("bias", vec![1, c], rand_vec(&mut rng, c));
            params.insert("gamma", vec![1, c], rand_vec(&mut rng, c));
            params.insert("beta", vec![1, c], rand_vec(&mut rng, c));
            let weights = rand_vec(&mut rng, r * c);
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let which = trial % 10;

            let report = check_gradients(
                &params,
                move |graph, bound| {
                    let a = bound.t("a");
                    let b = bound.t("b");
                    let e = bound.t("e");
                    let bias = bound.t("bias");
                    let t = match which {
                        0 => graph.matmul(a, b)?,
                        1 => graph.add(a, e)?,
                        2 => graph.mul(a, e)?,
                        3 => graph.add_row(a, bias)?,
                        4 => graph.transpose(a)?,
                        5 => graph.softmax_rows(a)?,
                        6 => {
                            let gamma = bound.t("gamma");
                            let beta = bound.t("beta");
                            graph.layer_norm_rows(a, gamma, beta, 1e-5)?
                        }
                        7 => graph.gelu(a)?,
                        8 => return graph.cross_entropy_from_logits(a, &labels),
                        _ => return graph.weighted_sum_sq(a, &weights),
                    };
                    let sq = graph.mul(t, t)?;
                    graph.sum(sq)
                },
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed,
                "trial {trial} op {which}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst.first()
            );
        }
    }

    #[test]
    fn assemble_and_narrow_and_concat_grads() {
        let mut params = ParamSet::new();
        params.insert("a", vec![3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        params.insert("b", vec![2, 4], (0..8).map(|i| i as f64 * 0.21 - 0.7).collect());
        let report = check_gradients(
            &params,
            |graph, bound| {
                let a = bound.t("a");
                let b = bound.t("b");
                let asm = graph.assemble_rows(&[(a, 2), (b, 0), (a, 2), (b, 1)])?;
                let left = graph.narrow_cols(asm, 0, 2)?;
                let right = graph.narrow_cols(asm, 2, 2)?;
                let cat = graph.concat_cols(&[right, left])?;
                let sq = graph.mul(cat, cat)?;
                graph.sum(sq)
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut graph = g();
            let a = graph
                .constant(&[3, 3], (0..9).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let b = graph.matmul(a, a).unwrap();
            let s = graph.softmax_rows(b).unwrap();
            let l = graph.sum(s).unwrap();
            graph.value(l).to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradcheck_detects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let mut params = ParamSet::new();
        params.insert("x", vec![1, 1], vec![1.0]);
        let err = check_gradients(
            &params,
            move |graph, bound| {
                counter.set(counter.get() + 1.0);
                let c = graph.constant(&[1, 1], vec![counter.get()])?;
                let x = bound.t("x");
                let p = graph.mul(x, c)?;
                graph.sum(p)
            },
            1e-6,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonDeterministic { .. }));
    }
}
