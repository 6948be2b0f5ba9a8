//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node. Nodes only
//! ever reference earlier nodes, so walking the node list backwards is a reverse
//! topological order and each node is visited exactly once by [`Tape::backward`].
//! Parameters are leaves registered by name; the gradient map is keyed by those
//! names. Leaves registered with [`Tape::constant`] never receive gradients, which
//! is how stop-gradient inputs are expressed.

use std::collections::BTreeMap;

use super::ops::{self, axis_split, normal_cdf, normal_pdf, softmax_slice, LAYER_NORM_EPS};
use super::tensor::{gemm_acc, transpose_raw, Scalar, Tensor};
use crate::error::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        axis: usize,
        gain: Option<usize>,
        bias: Option<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        height: usize,
        width: usize,
        kernel: usize,
        cols: Vec<T>,
    },
    Reshape(usize),
    GatherRows {
        x: usize,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    Mse(usize, usize),
    BceWithLogits {
        logits: usize,
        targets: Tensor<T>,
    },
    SoftCrossEntropy {
        logits: usize,
        targets: Tensor<T>,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one forward pass.
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f64> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a named parameter. Parameters the loss does not depend on have an
    /// all-zero entry.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Gradient with respect to any node, `None` if no gradient reached it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_node.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node handle, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Names of the parameters registered on this tape, in registration order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var, TensorError> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let var = self.leaf(value, true);
        self.params.push((name, var.0));
        Ok(var)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// An unnamed leaf; with `requires_grad` its gradient is available via [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(value, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a.0, factor), &[a.0])
    }

    /// Adds a row vector (`[m]` or `[1, m]`) to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (n, m) = self.value(x).dims2("add_row")?;
        let r = self.value(row);
        if r.numel() != m {
            return Err(mismatch("add_row", self.value(x).shape(), r.shape()));
        }
        let rd = r.data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(rd) {
                *o = *o + b;
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, Op::AddRow(x.0, row.0), &[x.0, row.0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a · bᵀ` with `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = self.value(a).dims2("matmul_nt")?;
        let (m, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let bt = transpose_raw(self.value(b).data(), m, k);
        let mut out = vec![T::zero(); n * m];
        gemm_acc(self.value(a).data(), &bt, &mut out, n, k, m);
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, Op::MatMulNt(a.0, b.0), &[a.0, b.0]))
    }

    /// `x · wᵀ + b`, with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = ops::gelu(self.value(x));
        self.push(v, Op::Gelu(x.0), &[x.0])
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        axis: usize,
        gain: Option<Var>,
        bias: Option<Var>,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (_, n, _) = axis_split(xv.shape(), axis, "layer_norm")?;
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).numel() != n {
                return Err(TensorError::Invalid {
                    op: "layer_norm",
                    msg: format!(
                        "affine parameter has {} elements, normalized extent is {n}",
                        self.value(p).numel()
                    ),
                });
            }
        }
        let norm = ops::standardize_along(xv, axis, LAYER_NORM_EPS, "layer_norm")?;
        let out = ops::apply_affine(
            &norm.xhat,
            xv.shape(),
            axis,
            gain.map(|g| self.value(g)),
            bias.map(|b| self.value(b)),
        );
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let mut inputs = vec![x.0];
        inputs.extend(gain.map(|g| g.0));
        inputs.extend(bias.map(|b| b.0));
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                axis,
                gain: gain.map(|g| g.0),
                bias: bias.map(|b| b.0),
                xhat: norm.xhat,
                inv_std: norm.inv_std,
            },
            &inputs,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let v = ops::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax { x: x.0, axis }, &[x.0]))
    }

    /// Multi-head scaled dot-product attention over `[n, E]` projections. Head `h`
    /// owns columns `h·d .. (h+1)·d` with `d = E / heads`; the per-head outputs are
    /// concatenated back into `[n, E]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
        let (n, e) = self.value(q).dims2("attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [n, e] {
                return Err(mismatch("attention", &[n, e], self.value(other).shape()));
            }
        }
        if heads == 0 || e % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("embedding width {e} not divisible by {heads} heads"),
            });
        }
        let d = e / heads;
        let scale = T::c(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * e];
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let qi = &qd[i * e + h * d..i * e + (h + 1) * d];
                let row = &mut p[i * n..(i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kd[j * e + h * d..j * e + (h + 1) * d];
                    *s = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale;
                }
                softmax_slice(row);
                let o = &mut out[i * e + h * d..i * e + (h + 1) * d];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vd[j * e + h * d..j * e + (h + 1) * d];
                    for (ov, &vv) in o.iter_mut().zip(vj) {
                        *ov = *ov + pij * vv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, e], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            &[q.0, k.0, v.0],
        ))
    }

    /// Zero-padded "same" 2D convolution of a channels-last grid.
    ///
    /// `x` is `[height·width, c_in]` (row-major cells), `w` is `[c_out, c_in, k, k]`
    /// with odd `k`, `b` is `[c_out]`. Output is `[height·width, c_out]`.
    pub fn conv2d_same(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        height: usize,
        width: usize,
    ) -> Result<Var, TensorError> {
        let (cells, c_in) = self.value(x).dims2("conv2d_same")?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, wc_in, kh, kw] = ws[..] else {
            return Err(TensorError::Invalid {
                op: "conv2d_same",
                msg: format!("kernel must be rank 4, got {ws:?}"),
            });
        };
        if cells != height * width || wc_in != c_in || kh != kw || kh % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d_same",
                msg: format!(
                    "input {:?} on grid {height}x{width} incompatible with kernel {ws:?}",
                    self.value(x).shape()
                ),
            });
        }
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(mismatch("conv2d_same", &[c_out], self.value(b).shape()));
            }
        }
        let k = kh;
        let cols = im2col(self.value(x).data(), height, width, c_in, k);
        let wt = transpose_raw(self.value(w).data(), c_out, c_in * k * k);
        let mut out = vec![T::zero(); cells * c_out];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bd);
            }
        }
        gemm_acc(&cols, &wt, &mut out, cells, c_in * k * k, c_out);
        let value = Tensor::new(vec![cells, c_out], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                height,
                width,
                kernel: k,
                cols,
            },
            &inputs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x.0), &[x.0]))
    }

    /// Selects rows of a matrix; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x).gather_rows(indices)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x: x.0,
                indices: indices.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "nothing to concatenate".into(),
            });
        };
        let (_, m) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = self.value(*p).dims2("concat_rows")?;
            if c != m {
                return Err(mismatch("concat_rows", self.value(*first).shape(), self.value(*p).shape()));
            }
            rows += r;
            out.extend_from_slice(self.value(*p).data());
        }
        let v = Tensor::new(vec![rows, m], out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(v, Op::ConcatRows(idx.clone()), &idx))
    }

    /// Column means of an `[n, m]` matrix as `[1, m]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, m) = self.value(x).dims2("mean_rows")?;
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean_rows",
                msg: "no rows".into(),
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); m];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(&xd[i * m..(i + 1) * m]) {
                *o = *o + v;
            }
        }
        let nf = T::c(n as f64);
        out.iter_mut().for_each(|o| *o = *o / nf);
        let v = Tensor::new(vec![1, m], out)?;
        Ok(self.push(v, Op::MeanRows(x.0), &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x.0), &[x.0])
    }

    /// Mean squared error over all elements; an empty pair gives 0.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "mse")?;
        let n = av.numel();
        let total = av
            .data()
            .iter()
            .zip(bv.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let value = if n == 0 {
            T::zero()
        } else {
            total / T::c(n as f64)
        };
        Ok(self.push(Tensor::scalar(value), Op::Mse(a.0, b.0), &[a.0, b.0]))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against (possibly soft) targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var, TensorError> {
        let z = self.value(logits);
        z.same_shape(&targets, "bce_with_logits")?;
        let n = z.numel().max(1);
        let total = z.data().iter().zip(targets.data()).fold(T::zero(), |acc, (&z, &t)| {
            acc + z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln()
        });
        let v = Tensor::scalar(total / T::c(n as f64));
        Ok(self.push(
            v,
            Op::BceWithLogits {
                logits: logits.0,
                targets,
            },
            &[logits.0],
        ))
    }

    /// Mean over rows of `-Σ t·log softmax(z)` with target distributions per row.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var, TensorError> {
        let z = self.value(logits);
        z.same_shape(&targets, "soft_cross_entropy")?;
        let (n, c) = z.dims2("soft_cross_entropy")?;
        let mut probs = z.data().to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let zr = &z.data()[i * c..(i + 1) * c];
            let max = zr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = zr.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            let tr = &targets.data()[i * c..(i + 1) * c];
            total = total - zr.iter().zip(tr).fold(T::zero(), |acc, (&zv, &tv)| acc + tv * (zv - lse));
            softmax_slice(row);
        }
        let v = Tensor::scalar(total / T::c(n.max(1) as f64));
        Ok(self.push(
            v,
            Op::SoftCrossEntropy {
                logits: logits.0,
                targets,
                probs,
            },
            &[logits.0],
        ))
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(name, idx)| {
                let g = grads[*idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[*idx].value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), TensorError> {
        let val = |j: usize| &self.nodes[j].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || Ok(g.clone()))?;
                self.accumulate(grads, *b, || Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || Ok(g.clone()))?;
                self.accumulate(grads, *b, || Ok(g.scale(-T::one())))?;
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, || g.zip_map(val(*b), "mul", |x, y| x * y))?;
                self.accumulate(grads, *b, || g.zip_map(val(*a), "mul", |x, y| x * y))?;
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, || Ok(g.scale(*s)))?,
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, || Ok(g.clone()))?;
                self.accumulate(grads, *row, || {
                    let (n, m) = g.dims2("add_row")?;
                    let mut out = vec![T::zero(); m];
                    for r in 0..n {
                        for (o, &v) in out.iter_mut().zip(&gd[r * m..(r + 1) * m]) {
                            *o = *o + v;
                        }
                    }
                    Tensor::new(val(*row).shape().to_vec(), out)
                })?;
            }
            Op::MatMul(a, b) => {
                let (n, k) = val(*a).dims2("matmul")?;
                let (_, m) = val(*b).dims2("matmul")?;
                self.accumulate(grads, *a, || {
                    let bt = transpose_raw(val(*b).data(), k, m);
                    let mut out = vec![T::zero(); n * k];
                    gemm_acc(gd, &bt, &mut out, n, m, k);
                    Tensor::new(vec![n, k], out)
                })?;
                self.accumulate(grads, *b, || {
                    let at = transpose_raw(val(*a).data(), n, k);
                    let mut out = vec![T::zero(); k * m];
                    gemm_acc(&at, gd, &mut out, k, n, m);
                    Tensor::new(vec![k, m], out)
                })?;
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = val(*a).dims2("matmul_nt")?;
                let (m, _) = val(*b).dims2("matmul_nt")?;
                self.accumulate(grads, *a, || {
                    let mut out = vec![T::zero(); n * k];
                    gemm_acc(gd, val(*b).data(), &mut out, n, m, k);
                    Tensor::new(vec![n, k], out)
                })?;
                self.accumulate(grads, *b, || {
                    let gt = transpose_raw(gd, n, m);
                    let mut out = vec![T::zero(); m * k];
                    gemm_acc(&gt, val(*a).data(), &mut out, m, n, k);
                    Tensor::new(vec![m, k], out)
                })?;
            }
            Op::Gelu(x) => self.accumulate(grads, *x, || {
                g.zip_map(val(*x), "gelu", |gv, xv| {
                    let x = xv.f64();
                    gv * T::c(normal_cdf(x) + x * normal_pdf(x))
                })
            })?,
            Op::LayerNorm {
                x,
                axis,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let shape = val(*x).shape();
                let (outer, n, inner) = axis_split(shape, *axis, "layer_norm")?;
                let gain_d = gain.map(|gi| val(gi).data());
                if let Some(gi) = gain {
                    self.accumulate(grads, *gi, || {
                        let mut out = vec![T::zero(); n];
                        for o in 0..outer {
                            for (j, acc) in out.iter_mut().enumerate() {
                                let base = o * n * inner + j * inner;
                                for t in base..base + inner {
                                    *acc = *acc + gd[t] * xhat[t];
                                }
                            }
                        }
                        Tensor::new(val(*gi).shape().to_vec(), out)
                    })?;
                }
                if let Some(bi) = bias {
                    self.accumulate(grads, *bi, || {
                        let mut out = vec![T::zero(); n];
                        for o in 0..outer {
                            for (j, acc) in out.iter_mut().enumerate() {
                                let base = o * n * inner + j * inner;
                                for t in base..base + inner {
                                    *acc = *acc + gd[t];
                                }
                            }
                        }
                        Tensor::new(val(*bi).shape().to_vec(), out)
                    })?;
                }
                self.accumulate(grads, *x, || {
                    let mut dx = vec![T::zero(); gd.len()];
                    let nf = T::c(n as f64);
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + ii;
                            let dxhat = |j: usize| gd[at(j)] * gain_d.map_or(T::one(), |gv| gv[j]);
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..n {
                                let d = dxhat(j);
                                s1 = s1 + d;
                                s2 = s2 + d * xhat[at(j)];
                            }
                            let (m1, m2) = (s1 / nf, s2 / nf);
                            let inv = inv_std[o * inner + ii];
                            for j in 0..n {
                                dx[at(j)] = inv * (dxhat(j) - m1 - xhat[at(j)] * m2);
                            }
                        }
                    }
                    Tensor::new(shape.to_vec(), dx)
                })?;
            }
            Op::Softmax { x, axis } => self.accumulate(grads, *x, || {
                let y = self.nodes[i].value.data();
                let (outer, n, inner) = axis_split(g.shape(), *axis, "softmax")?;
                let mut dx = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + ii;
                        let dot = (0..n).fold(T::zero(), |acc, j| acc + gd[at(j)] * y[at(j)]);
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                Tensor::new(g.shape().to_vec(), dx)
            })?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, e) = val(*q).dims2("attention")?;
                let d = e / heads;
                let scale = T::c(1.0 / (d as f64).sqrt());
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![T::zero(); n * e];
                let mut dk = vec![T::zero(); n * e];
                let mut dv = vec![T::zero(); n * e];
                let mut ds = vec![T::zero(); n];
                for h in 0..*heads {
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    let cols = h * d..(h + 1) * d;
                    for i2 in 0..n {
                        let go = &gd[i2 * e + cols.start..i2 * e + cols.end];
                        let prow = &p[i2 * n..(i2 + 1) * n];
                        // dP[i, j] = dO_i · V_j, then softmax backward into dS
                        let mut dot = T::zero();
                        for j in 0..n {
                            let vj = &vd[j * e + cols.start..j * e + cols.end];
                            let dp = go.iter().zip(vj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                            ds[j] = dp;
                            dot = dot + dp * prow[j];
                        }
                        for j in 0..n {
                            ds[j] = prow[j] * (ds[j] - dot) * scale;
                        }
                        for j in 0..n {
                            let (pij, dsij) = (prow[j], ds[j]);
                            for c in cols.clone() {
                                dv[j * e + c] = dv[j * e + c] + pij * gd[i2 * e + c];
                                dq[i2 * e + c] = dq[i2 * e + c] + dsij * kd[j * e + c];
                                dk[j * e + c] = dk[j * e + c] + dsij * qd[i2 * e + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, || Tensor::new(vec![n, e], dq))?;
                self.accumulate(grads, *k, || Tensor::new(vec![n, e], dk))?;
                self.accumulate(grads, *v, || Tensor::new(vec![n, e], dv))?;
            }
            Op::Conv2d {
                x,
                w,
                b,
                height,
                width,
                kernel,
                cols,
            } => {
                let (cells, c_in) = val(*x).dims2("conv2d_same")?;
                let c_out = val(*w).shape()[0];
                let kk = c_in * kernel * kernel;
                if let Some(bi) = b {
                    self.accumulate(grads, *bi, || {
                        let mut out = vec![T::zero(); c_out];
                        for row in gd.chunks(c_out) {
                            for (o, &v) in out.iter_mut().zip(row) {
                                *o = *o + v;
                            }
                        }
                        Tensor::new(val(*bi).shape().to_vec(), out)
                    })?;
                }
                self.accumulate(grads, *w, || {
                    let gt = transpose_raw(gd, cells, c_out);
                    let mut out = vec![T::zero(); c_out * kk];
                    gemm_acc(&gt, cols, &mut out, c_out, cells, kk);
                    Tensor::new(val(*w).shape().to_vec(), out)
                })?;
                self.accumulate(grads, *x, || {
                    let mut dcols = vec![T::zero(); cells * kk];
                    gemm_acc(gd, val(*w).data(), &mut dcols, cells, c_out, kk);
                    let dx = col2im(&dcols, *height, *width, c_in, *kernel);
                    Tensor::new(vec![cells, c_in], dx)
                })?;
            }
            Op::Reshape(x) => self.accumulate(grads, *x, || g.reshape(val(*x).shape().to_vec()))?,
            Op::GatherRows { x, indices } => self.accumulate(grads, *x, || {
                let (r, c) = val(*x).dims2("gather_rows")?;
                let mut out = vec![T::zero(); r * c];
                for (k, &src) in indices.iter().enumerate() {
                    for (o, &v) in out[src * c..(src + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *o = *o + v;
                    }
                }
                Tensor::new(vec![r, c], out)
            })?,
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    let start = offset;
                    self.accumulate(grads, p, || {
                        Tensor::new(val(p).shape().to_vec(), gd[start..start + len].to_vec())
                    })?;
                    offset += len;
                }
            }
            Op::MeanRows(x) => self.accumulate(grads, *x, || {
                let (n, m) = val(*x).dims2("mean_rows")?;
                let nf = T::c(n as f64);
                Ok(Tensor::from_fn(vec![n, m], |t| gd[t % m] / nf))
            })?,
            Op::Sum(x) => self.accumulate(grads, *x, || Ok(Tensor::full(val(*x).shape().to_vec(), gd[0])))?,
            Op::Mse(a, b) => {
                let n = val(*a).numel();
                if n > 0 {
                    let f = T::c(2.0 / n as f64) * gd[0];
                    let diff = || val(*a).zip_map(val(*b), "mse", |x, y| (x - y) * f);
                    self.accumulate(grads, *a, diff)?;
                    self.accumulate(grads, *b, || Ok(diff()?.scale(-T::one())))?;
                }
            }
            Op::BceWithLogits { logits, targets } => self.accumulate(grads, *logits, || {
                let n = T::c(targets.numel().max(1) as f64);
                val(*logits).zip_map(targets, "bce", |z, t| {
                    (T::one() / (T::one() + (-z).exp()) - t) / n * gd[0]
                })
            })?,
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => self.accumulate(grads, *logits, || {
                let (n, _) = targets.dims2("soft_cross_entropy")?;
                let nf = T::c(n.max(1) as f64);
                let out = probs
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &t)| (p - t) / nf * gd[0])
                    .collect();
                Tensor::new(targets.shape().to_vec(), out)
            })?,
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: usize,
        make: impl FnOnce() -> Result<Tensor<T>, TensorError>,
    ) -> Result<(), TensorError> {
        if !self.nodes[target].requires_grad {
            return Ok(());
        }
        let contribution = make()?;
        match &mut grads[target] {
            Some(existing) => existing.add_assign(&contribution)?,
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }
}

/// Unfolds `k×k` zero-padded neighbourhoods into rows of `c_in·k·k` columns,
/// column order (channel, dy, dx) to match a `[c_out, c_in, k, k]` kernel.
fn im2col<T: Scalar>(x: &[T], height: usize, width: usize, c_in: usize, k: usize) -> Vec<T> {
    let half = (k / 2) as isize;
    let kk = c_in * k * k;
    let mut cols = vec![T::zero(); height * width * kk];
    for r in 0..height {
        for c in 0..width {
            let row = &mut cols[(r * width + c) * kk..(r * width + c + 1) * kk];
            for dy in 0..k {
                let sr = r as isize + dy as isize - half;
                if sr < 0 || sr >= height as isize {
                    continue;
                }
                for dx in 0..k {
                    let sc = c as isize + dx as isize - half;
                    if sc < 0 || sc >= width as isize {
                        continue;
                    }
                    let src = &x[(sr as usize * width + sc as usize) * c_in..][..c_in];
                    for (ch, &v) in src.iter().enumerate() {
                        row[(ch * k + dy) * k + dx] = v;
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], height: usize, width: usize, c_in: usize, k: usize) -> Vec<T> {
    let half = (k / 2) as isize;
    let kk = c_in * k * k;
    let mut x = vec![T::zero(); height * width * c_in];
    for r in 0..height {
        for c in 0..width {
            let row = &cols[(r * width + c) * kk..(r * width + c + 1) * kk];
            for dy in 0..k {
                let sr = r as isize + dy as isize - half;
                if sr < 0 || sr >= height as isize {
                    continue;
                }
                for dx in 0..k {
                    let sc = c as isize + dx as isize - half;
                    if sc < 0 || sc >= width as isize {
                        continue;
                    }
                    let dst = &mut x[(sr as usize * width + sc as usize) * c_in..][..c_in];
                    for (ch, d) in dst.iter_mut().enumerate() {
                        *d = *d + row[(ch * k + dy) * k + dx];
                    }
                }
            }
        }
    }
    x
}
