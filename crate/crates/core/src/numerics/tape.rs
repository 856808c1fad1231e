//! Tape-based reverse-mode differentiation over a fixed set of 2-D ops.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably, so any number of tapes can
//! evaluate the same frozen model concurrently. Gradients come back as a
//! [`Gradients`] value and are folded into the store by the caller.

use crate::error::{Error, Result};

use super::kernels;
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
    },
    MaskedSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    L1 {
        a: Var,
        b: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a recorded node, if the node was reachable.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.node_grads[var.0].as_deref()
    }

    /// Per-parameter gradients, summed over every use of the parameter on the tape.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.value(id).clone();
        self.push(value, Op::Param(id))
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.iter().product::<usize>() != sb.iter().product::<usize>() || self.value(a).cols() != self.value(b).cols() {
            return Err(Error::ShapeMismatch {
                expected: sa.to_vec(),
                actual: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = as_matrix(self.value(a));
        let (k2, m) = as_matrix(self.value(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![k, m],
                actual: self.value(b).shape().to_vec(),
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = as_matrix(self.value(a));
        let (m, k2) = as_matrix(self.value(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                expected: vec![m, k],
                actual: self.value(b).shape().to_vec(),
            });
        }
        let out = kernels::matmul_t(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    /// Adds a `[cols]` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(Error::ShapeMismatch {
                expected: vec![cols],
                actual: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant (no gradient flows into `c`).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                expected: self.value(a).shape().to_vec(),
                actual: c.shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::MulConst(a, c.data().to_vec())))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(a));
        if start + len > cols {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                size: cols,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols(a, start)))
    }

    /// Row lookup: `out[i] = table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(table));
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, size: rows });
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], out)?,
            Op::Gather(table, indices.to_vec()),
        ))
    }

    /// Layer normalisation over the last dimension with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if cols < 2 {
            return Err(Error::InvalidShape(format!(
                "layer norm needs a last dimension of at least 2, got {cols}"
            )));
        }
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::ShapeMismatch {
                expected: vec![cols],
                actual: self.value(gain).shape().to_vec(),
            });
        }
        let (xhat, inv_std) = kernels::normalize_rows(self.value(x).data(), cols);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat
            .chunks(cols)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b))
            .collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| kernels::silu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Silu(x))
    }

    /// Rotary embedding on every `head_dim` block; row `i` is rotated by `positions[i]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(x));
        if positions.len() != rows || head_dim % 2 != 0 || cols % head_dim != 0 {
            return Err(Error::InvalidShape(format!(
                "rope over [{rows}, {cols}] with {} positions and head_dim {head_dim}",
                positions.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        kernels::rope_in_place(&mut out, cols, positions, head_dim, 1.0);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
            },
        ))
    }

    /// Row softmax over the entries where `allowed` is true; others are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(x));
        if allowed.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, cols],
                actual: vec![allowed.len()],
            });
        }
        let out = kernels::masked_softmax_rows(self.value(x).data(), allowed, cols);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::MaskedSoftmax(x)))
    }

    /// `Σ_i weights[i] · (−log softmax(logits[i])[targets[i]])` as a scalar.
    /// Rows with zero weight are skipped and contribute exactly zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(logits));
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::ShapeMismatch {
                expected: vec![rows],
                actual: vec![targets.len(), weights.len()],
            });
        }
        if cols < 2 {
            return Err(Error::InvalidShape(format!(
                "cross entropy needs at least 2 classes, got {cols}"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            if targets[r] >= cols {
                return Err(Error::IndexOutOfRange {
                    index: targets[r],
                    size: cols,
                });
            }
            if weights[r] == 0.0 {
                continue;
            }
            let row = &data[r * cols..(r + 1) * cols];
            let lsm = kernels::log_softmax(row);
            loss += weights[r] * -lsm[targets[r]];
            for (p, l) in probs[r * cols..(r + 1) * cols].iter_mut().zip(&lsm) {
                *p = l.exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ_i weights[i] · mean_j |a_ij − b_ij|` as a scalar.
    pub fn l1(&mut self, a: Var, b: Var, weights: &[f64]) -> Result<Var> {
        self.check_same(a, b)?;
        let (rows, cols) = as_matrix(self.value(a));
        if weights.len() != rows {
            return Err(Error::ShapeMismatch {
                expected: vec![rows],
                actual: vec![weights.len()],
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let span = r * cols..(r + 1) * cols;
            let s: f64 = da[span.clone()]
                .iter()
                .zip(&db[span])
                .map(|(x, y)| (x - y).abs())
                .sum();
            loss += weights[r] * s / cols as f64;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                a,
                b,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (n, k) = as_matrix(self.value(*a));
                    let m = self.value(*b).cols();
                    let da = kernels::matmul_t(&g, self.value(*b).data(), n, m, k);
                    add_into(&mut grads[a.0], &da);
                    let mut db = vec![0.0; k * m];
                    kernels::t_matmul_acc(self.value(*a).data(), &g, n, k, m, &mut db);
                    add_into(&mut grads[b.0], &db);
                }
                Op::MatMulT(a, b) => {
                    let (n, k) = as_matrix(self.value(*a));
                    let m = self.value(*b).rows();
                    let da = kernels::matmul(&g, self.value(*b).data(), n, m, k);
                    add_into(&mut grads[a.0], &da);
                    let mut db = vec![0.0; m * k];
                    kernels::t_matmul_acc(&g, self.value(*a).data(), n, m, k, &mut db);
                    add_into(&mut grads[b.0], &db);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                }
                Op::AddRow(a, bias) => {
                    add_into(&mut grads[a.0], &g);
                    let cols = self.value(*bias).len();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads[bias.0], &db);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::MulConst(a, c) => {
                    let da: Vec<f64> = g.iter().zip(c).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                    add_into(&mut grads[a.0], &da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut da = Vec::with_capacity(self.value(*a).len());
                    let mut db = Vec::with_capacity(self.value(*b).len());
                    for row in g.chunks(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = as_matrix(self.value(*a));
                    let len = node.value.cols();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    add_into(&mut grads[a.0], &da);
                }
                Op::Gather(table, indices) => {
                    let cols = self.value(*table).cols();
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, v) in dt[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads[table.0], &dt);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let cols = self.value(*gain).len();
                    let gv = self.value(*gain).data();
                    let mut dx = vec![0.0; g.len()];
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    let n = cols as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (gy, xh) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..cols {
                            dgain[j] += gy[j] * xh[j];
                            dbias[j] += gy[j];
                            let d = gy[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        for j in 0..cols {
                            let d = gy[j] * gv[j];
                            dx[r * cols + j] = is / n * (n * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                    add_into(&mut grads[gain.0], &dgain);
                    add_into(&mut grads[bias.0], &dbias);
                }
                Op::Silu(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gy, &v)| gy * kernels::silu_grad(v))
                        .collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Rope {
                    x,
                    positions,
                    head_dim,
                } => {
                    let mut dx = g.clone();
                    kernels::rope_in_place(&mut dx, self.value(*x).cols(), positions, *head_dim, -1.0);
                    add_into(&mut grads[x.0], &dx);
                }
                Op::MaskedSoftmax(x) => {
                    let cols = node.value.cols();
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            dx[j] = y[j] * (g[j] - dot);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let cols = self.value(*logits).cols();
                    let mut dl = vec![0.0; probs.len()];
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w;
                        for j in 0..cols {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * cols + j] = scale * (probs[r * cols + j] - onehot);
                        }
                    }
                    add_into(&mut grads[logits.0], &dl);
                }
                Op::L1 { a, b, weights } => {
                    let cols = self.value(*a).cols();
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let mut da = vec![0.0; va.len()];
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w / cols as f64;
                        for j in r * cols..(r + 1) * cols {
                            let diff = va[j] - vb[j];
                            da[j] = if diff > 0.0 {
                                scale
                            } else if diff < 0.0 {
                                -scale
                            } else {
                                0.0
                            };
                        }
                    }
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; self.value(*x).len()];
                    add_into(&mut grads[x.0], &dx);
                }
            }
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[idx]) {
                let shape = node.value.shape().to_vec();
                match params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => params.push((*id, Tensor::new(shape, g.clone())?)),
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            node_grads: grads,
            params,
        })
    }
}
