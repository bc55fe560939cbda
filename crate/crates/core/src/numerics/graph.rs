//! Reverse-mode tape. Operations are recorded in execution order, so the
//! recording order is already a topological order and backward is a single
//! reverse sweep.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use super::EPS;
use crate::error::{Error, Result};

static LOG_CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

const LN_EPS: f64 = 1e-5;
const SIGMOID_LO: f64 = 2.0 * EPS;
const SIGMOID_HI: f64 = 1.0 - 2.0 * EPS;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    SoftmaxRows(Var),
    Sum(Var),
    RowSum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Reshape(Var),
    BceMasked {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        batch: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by the recorded [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient or zeros of the given length when nothing flowed into `v`.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x);
    (y, dy)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Learnable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-learnable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product over a leading group axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 3 || tb.shape().len() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (bk, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if bk != k {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ad = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let bd = &tb.data()[gi * k * n..(gi + 1) * k * n];
            let od = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt(ad, bd, od, m, k, n);
            } else {
                gemm_nn(ad, bd, od, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of `a` (last axis `n`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if tb.len() != n {
            return Err(shape_err("add_row", ta, tb));
        }
        let bd = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + bd[i % n]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| gelu(x).0);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Logistic function, clamped strictly inside `(EPS, 1 - EPS)`.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self
            .value(a)
            .map(|x| (1.0 / (1.0 + (-x).exp())).clamp(SIGMOID_LO, SIGMOID_HI));
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Natural log; non-positive inputs are clamped at `EPS` with a one-time warning.
    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| {
            if x < EPS {
                if !LOG_CLAMP_WARNED.swap(true, Ordering::Relaxed) {
                    log::warn!("log input {x} below {EPS}; clamping");
                }
                EPS.ln()
            } else {
                x.ln()
            }
        });
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sin);
        let rg = self.rg(a);
        self.push(t, Op::Sin(a), rg)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::cos);
        let rg = self.rg(a);
        self.push(t, Op::Cos(a), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sums the last axis away.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let data: Vec<f64> = ta.data().chunks(n).map(|r| r.iter().sum()).collect();
        let mut shape = ta.shape().to_vec();
        shape.pop();
        let t = Tensor::new(shape, data).expect("row count");
        let rg = self.rg(a);
        self.push(t, Op::RowSum(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Element gather: `out.flat[i] = src.flat[index[i]]`, reshaped to `shape`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= ts.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} elements",
                ts.len()
            )));
        }
        let data = index.iter().map(|&i| ts.data()[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(src);
        Ok(self.push(t, Op::Gather { src, index }, rg))
    }

    /// Selects whole rows of a 2-D tensor.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let n = self.value(src).cols();
        let index = rows.iter().flat_map(|&r| (r * n)..(r + 1) * n).collect::<Vec<_>>();
        self.gather(src, index, &[rows.len(), n])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(shape_err("concat_rows", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let t = Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatRows(a, b), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (na, nb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let t = Tensor::new(vec![ta.rows(), na + nb], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatCols(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, m)
    }

    /// Masked binary cross-entropy: summed over entries where `mask` holds,
    /// averaged over the `B` rows of `pred`.
    pub fn bce_masked(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape().len() != 2 || target.len() != tp.len() || mask.len() != tp.len() {
            return Err(Error::Shape {
                op: "bce_masked",
                left: tp.shape().to_vec(),
                right: vec![target.len(), mask.len()],
            });
        }
        let batch = tp.shape()[0];
        let mut loss = 0.0;
        for ((&p, &y), &m) in tp.data().iter().zip(target).zip(mask) {
            if m {
                let p = p.clamp(EPS, 1.0 - EPS);
                loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        let loss = if batch > 0 { loss / batch as f64 } else { 0.0 };
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceMasked {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                batch,
            },
            rg,
        ))
    }

    /// Runs the reverse sweep from scalar `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let len = nodes[v.0].value.len();
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(g);
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    acc(*a, &mut |g| gemm_nt(&gout, tb.data(), g, m, n, k));
                    acc(*b, &mut |g| gemm_tn(ta.data(), &gout, g, m, k, n));
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (g_n, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let n = node.value.shape()[2];
                    acc(*a, &mut |ga| {
                        for gi in 0..g_n {
                            let go = &gout[gi * m * n..(gi + 1) * m * n];
                            let bd = &tb.data()[gi * k * n..(gi + 1) * k * n];
                            let gad = &mut ga[gi * m * k..(gi + 1) * m * k];
                            if *trans_b {
                                // C = A Bᵀ, B: n×k → dA = dC B
                                gemm_nn(go, bd, gad, m, n, k);
                            } else {
                                gemm_nt(go, bd, gad, m, n, k);
                            }
                        }
                    });
                    acc(*b, &mut |gb| {
                        for gi in 0..g_n {
                            let go = &gout[gi * m * n..(gi + 1) * m * n];
                            let ad = &ta.data()[gi * m * k..(gi + 1) * m * k];
                            let gbd = &mut gb[gi * k * n..(gi + 1) * k * n];
                            if *trans_b {
                                // dB (n×k) = dCᵀ A
                                gemm_tn(go, ad, gbd, m, n, k);
                            } else {
                                gemm_tn(ad, go, gbd, m, k, n);
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |g| add_into(g, &gout));
                    acc(*b, &mut |g| add_into(g, &gout));
                }
                Op::AddRow(a, b) => {
                    acc(*a, &mut |g| add_into(g, &gout));
                    acc(*b, &mut |g| {
                        let n = g.len();
                        for (j, v) in gout.iter().enumerate() {
                            g[j % n] += v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &mut |g| {
                        for ((g, d), y) in g.iter_mut().zip(&gout).zip(tb.data()) {
                            *g += d * y;
                        }
                    });
                    acc(*b, &mut |g| {
                        for ((g, d), x) in g.iter_mut().zip(&gout).zip(ta.data()) {
                            *g += d * x;
                        }
                    });
                }
                Op::Scale(a, s) => acc(*a, &mut |g| {
                    for (g, d) in g.iter_mut().zip(&gout) {
                        *g += d * s;
                    }
                }),
                Op::Relu(a) => {
                    let x = &nodes[a.0].value;
                    acc(*a, &mut |g| {
                        for ((g, d), x) in g.iter_mut().zip(&gout).zip(x.data()) {
                            if *x > 0.0 {
                                *g += d;
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let x = &nodes[a.0].value;
                    acc(*a, &mut |g| {
                        for ((g, d), x) in g.iter_mut().zip(&gout).zip(x.data()) {
                            *g += d * gelu(*x).1;
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, &mut |g| {
                        for ((g, d), s) in g.iter_mut().zip(&gout).zip(y.data()) {
                            *g += d * s * (1.0 - s);
                        }
                    });
                }
                Op::Log(a) => {
                    let x = &nodes[a.0].value;
                    acc(*a, &mut |g| {
                        for ((g, d), x) in g.iter_mut().zip(&gout).zip(x.data()) {
                            if *x >= EPS {
                                *g += d / x;
                            }
                        }
                    });
                }
                Op::Sin(a) => {
                    let x = &nodes[a.0].value;
                    acc(*a, &mut |g| {
                        for ((g, d), x) in g.iter_mut().zip(&gout).zip(x.data()) {
                            *g += d * x.cos();
                        }
                    });
                }
                Op::Cos(a) => {
                    let x = &nodes[a.0].value;
                    acc(*a, &mut |g| {
                        for ((g, d), x) in g.iter_mut().zip(&gout).zip(x.data()) {
                            *g -= d * x.sin();
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    acc(*a, &mut |g| {
                        for ((gr, dr), yr) in g.chunks_mut(n).zip(gout.chunks(n)).zip(y.data().chunks(n)) {
                            let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                            for ((g, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                                *g += y * (d - dot);
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let d = gout[0];
                    acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += d));
                }
                Op::RowSum(a) => {
                    let n = nodes[a.0].value.cols();
                    acc(*a, &mut |g| {
                        for (gr, d) in g.chunks_mut(n).zip(&gout) {
                            gr.iter_mut().for_each(|g| *g += d);
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = node.value.cols();
                    let gam = nodes[gamma.0].value.data();
                    acc(*gamma, &mut |g| {
                        for (dr, hr) in gout.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                g[j] += dr[j] * hr[j];
                            }
                        }
                    });
                    acc(*beta, &mut |g| {
                        for dr in gout.chunks(n) {
                            for j in 0..n {
                                g[j] += dr[j];
                            }
                        }
                    });
                    acc(*x, &mut |g| {
                        let nf = n as f64;
                        for (r, ((gr, dr), hr)) in g.chunks_mut(n).zip(gout.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..n {
                                let dh = dr[j] * gam[j];
                                s1 += dh;
                                s2 += dh * hr[j];
                            }
                            let inv = inv_std[r];
                            for j in 0..n {
                                let dh = dr[j] * gam[j];
                                gr[j] += inv / nf * (nf * dh - s1 - hr[j] * s2);
                            }
                        }
                    });
                }
                Op::Gather { src, index } => acc(*src, &mut |g| {
                    for (d, &ix) in gout.iter().zip(index) {
                        g[ix] += d;
                    }
                }),
                Op::ConcatRows(a, b) => {
                    let na = nodes[a.0].value.len();
                    acc(*a, &mut |g| add_into(g, &gout[..na]));
                    acc(*b, &mut |g| add_into(g, &gout[na..]));
                }
                Op::ConcatCols(a, b) => {
                    let na = nodes[a.0].value.cols();
                    let nb = nodes[b.0].value.cols();
                    acc(*a, &mut |g| {
                        for (gr, dr) in g.chunks_mut(na).zip(gout.chunks(na + nb)) {
                            add_into(gr, &dr[..na]);
                        }
                    });
                    acc(*b, &mut |g| {
                        for (gr, dr) in g.chunks_mut(nb).zip(gout.chunks(na + nb)) {
                            add_into(gr, &dr[na..]);
                        }
                    });
                }
                Op::Reshape(a) => acc(*a, &mut |g| add_into(g, &gout)),
                Op::BceMasked {
                    pred,
                    target,
                    mask,
                    batch,
                } => {
                    let p = &nodes[pred.0].value;
                    let scale = gout[0] / *batch as f64;
                    acc(*pred, &mut |g| {
                        for (((g, &p), &y), &m) in g.iter_mut().zip(p.data()).zip(target).zip(mask) {
                            if m {
                                let p = p.clamp(EPS, 1.0 - EPS);
                                *g += scale * (-y / p + (1.0 - y) / (1.0 - p));
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
