use std::collections::HashMap;

use super::kernels::{broadcast_shape, for_each_broadcast, gemm, split_axis, MatRef};
use super::nn::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    BatchTrain,
    BatchEval,
    Layer,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        kind: NormKind,
    },
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Extremum {
        x: Var,
        axis: usize,
        arg: Vec<usize>,
    },
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Broadcast(Var),
    PairwiseSqDist(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A differentiation tape. Values are computed eagerly as operations are
/// recorded; [`Graph::backward`] walks the tape in reverse.
///
/// One graph belongs to one worker. Build a fresh graph per step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    pending_buffers: HashMap<ParamId, Tensor>,
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

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same var.
    /// Non-trainable parameters are bound as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub(crate) fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.param_order
    }

    /// Current value of a buffer, including updates staged on this graph.
    pub(crate) fn buffer(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.pending_buffers
            .get(&id)
            .cloned()
            .unwrap_or_else(|| store.get(id).tensor.clone())
    }

    pub(crate) fn stage_buffer(&mut self, id: ParamId, value: Tensor) {
        self.pending_buffers.insert(id, value);
    }

    pub(crate) fn take_buffers(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self.pending_buffers.drain().collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }

    /// Same value, cut from the tape: nothing upstream receives gradient
    /// through the returned var.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- element-wise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_broadcast(&out_shape, &sa, &sb, |k, i, j| out[k] = f(va[i], vb[j]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(out_shape, data), op(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Square root. The derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---- linear algebra ---------------------------------------------------

    /// Matrix product `[m, k] · [k, n]`, or batched `[B, m, k] · [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let dims = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => Some((1, sa[0], sa[1], sb[1])),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => Some((sa[0], sa[1], sa[2], sb[2])),
            _ => None,
        };
        let Some((batch, m, k, n)) = dims else {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bt in 0..batch {
            gemm(
                MatRef::new(&va[bt * m * k..(bt + 1) * m * k], m, k),
                MatRef::new(&vb[bt * k * n..(bt + 1) * k * n], k, n),
                0.0,
                &mut out[bt * m * n..(bt + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!("permutation {axes:?} invalid for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src = permute_index(&shape, axes);
        let v = self.value(x).data();
        let out = src.iter().map(|&i| v[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute(x, src), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    /// Shared per-row affine map: `x[n, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, k, m) = (sx[0], sx[1], sw[1]);
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [m] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![m],
                    rhs: sb.to_vec(),
                });
            }
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), n, k),
            MatRef::new(self.value(w).data(), k, m),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Linear { x, w, b }, rg))
    }

    // ---- normalization ------------------------------------------------------

    fn check_norm_shapes(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::invalid(format!("{op} needs rank 2, got {s:?}")));
        }
        let c = s[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: s.to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((s[0], c))
    }

    /// Batch normalization over rows with batch statistics. Returns the
    /// output together with the per-column mean and biased variance.
    pub(crate) fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c) = self.check_norm_shapes("batch_norm", x, gamma, beta)?;
        if n < 2 {
            return Err(Error::BatchNormSingleRow);
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.affine_norm(x, gamma, beta, n, c, |_, j| (mean[j], inv_std[j]));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind: NormKind::BatchTrain,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub(crate) fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c) = self.check_norm_shapes("batch_norm", x, gamma, beta)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.affine_norm(x, gamma, beta, n, c, |_, j| (mean[j], inv_std[j]));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind: NormKind::BatchEval,
            },
            rg,
        ))
    }

    /// Per-row normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.check_norm_shapes("layer_norm", x, gamma, beta)?;
        let xv = self.value(x).data();
        let mut stats = Vec::with_capacity(n);
        for row in xv.chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            stats.push((mean, 1.0 / (var + eps).sqrt()));
        }
        let (out, xhat) = self.affine_norm(x, gamma, beta, n, c, |i, _| stats[i]);
        let inv_std = stats.iter().map(|s| s.1).collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind: NormKind::Layer,
            },
            rg,
        ))
    }

    fn affine_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        c: usize,
        stat: impl Fn(usize, usize) -> (f64, f64),
    ) -> (Tensor, Vec<f64>) {
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let (m, s) = stat(i, j);
                let h = (xv[i * c + j] - m) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = gv[j] * h + bv[j];
            }
        }
        (Tensor::from_parts(vec![n, c], out), xhat)
    }

    // ---- softmax ------------------------------------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let out = softmax_values(self.value(x), axis, false);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let out = softmax_values(self.value(x), axis, true);
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x, axis), rg))
    }

    // ---- reductions ---------------------------------------------------------

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let len = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, 1.0 / len))
    }

    /// Minimum over `axis`, removing it. Ties go to the lowest index.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.extremum(x, axis, |a, b| a < b)
    }

    /// Maximum over `axis`, removing it. Ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.extremum(x, axis, |a, b| a > b)
    }

    fn extremum(&mut self, x: Var, axis: usize, better: fn(f64, f64) -> bool) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(Error::invalid("reduction over an empty axis"));
        }
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            let (dst, idx) = (&mut out[o * inner..(o + 1) * inner], &mut arg[o * inner..(o + 1) * inner]);
            dst.copy_from_slice(&v[o * len * inner..o * len * inner + inner]);
            for l in 1..len {
                let row = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                for i in 0..inner {
                    if better(row[i], dst[i]) {
                        dst[i] = row[i];
                        idx[i] = l;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Extremum { x, axis, arg },
            rg,
        ))
    }

    // ---- structural ---------------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let v = self.value(x).data();
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Rows (slices along axis 0) picked by index; indices may repeat.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("gather on a rank-0 tensor"));
        }
        let rows = shape[0];
        let row = shape[1..].iter().product::<usize>();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather index {bad} out of range {rows}")));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Gather(x, indices.to_vec()),
            rg,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow {start}..{} past extent {} of axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&v[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        match broadcast_shape(&src, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: src,
                    rhs: shape.to_vec(),
                })
            }
        }
        let v = self.value(x).data();
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(shape, &src, shape, |k, i, _| out[k] = v[i]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Broadcast(x), rg))
    }

    /// Squared Euclidean distances between the rows of `a` and `b`:
    /// `[n, d] x [m, d] -> [n, m]`, or batched `[B, n, d] x [B, m, d] -> [B, n, m]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, n, m, d) = pair_dims(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: "pairwise_sq_dist",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * n * m];
        for bt in 0..batch {
            for i in 0..n {
                let pa = &va[(bt * n + i) * d..(bt * n + i + 1) * d];
                let row = &mut out[(bt * n + i) * m..(bt * n + i + 1) * m];
                if d == 3 {
                    let pts = &vb[bt * m * 3..(bt + 1) * m * 3];
                    for (o, pb) in row.iter_mut().zip(pts.chunks_exact(3)) {
                        let (x, y, z) = (pa[0] - pb[0], pa[1] - pb[1], pa[2] - pb[2]);
                        *o = x * x + y * y + z * z;
                    }
                    continue;
                }
                for j in 0..m {
                    let pb = &vb[(bt * m + j) * d..(bt * m + j + 1) * d];
                    row[j] = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
                }
            }
        }
        let shape = if sa.len() == 3 {
            vec![batch, n, m]
        } else {
            vec![n, m]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::PairwiseSqDist(a, b), rg))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Materializes gradients of the scalar `loss` on every reachable leaf
    /// that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let Graph { nodes, grads, .. } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            propagate(nodes, grads, node, &g);
        }
        Ok(())
    }
}

/// Flat source index for each output element of an axis permutation.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    for _ in 0..n {
        idx.push(coord.iter().zip(axes).map(|(&c, &a)| c * strides[a]).sum());
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            if coord[ax] < out_shape[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    idx
}

fn pair_dims(sa: &[usize], sb: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (sa.len(), sb.len()) {
        (2, 2) if sa[1] == sb[1] => Some((1, sa[0], sb[0], sa[1])),
        (3, 3) if sa[0] == sb[0] && sa[2] == sb[2] => Some((sa[0], sa[1], sb[1], sa[2])),
        _ => None,
    }
}

fn softmax_values(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = split_axis(t.shape(), axis);
    let v = t.data();
    let mut out = vec![0.0; v.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| v[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|l| (v[idx(l)] - max).exp()).sum();
            for l in 0..len {
                out[idx(l)] = if log {
                    v[idx(l)] - max - z.ln()
                } else {
                    (v[idx(l)] - max).exp() / z
                };
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn val(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (sa, sb) = (val(nodes, *a).shape(), val(nodes, *b).shape());
            if let Some(ga) = slot(nodes, grads, *a) {
                if sa == out_shape {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                } else {
                    for_each_broadcast(out_shape, sa, sb, |k, i, _| ga[i] += g[k]);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                if sb == out_shape {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                } else {
                    for_each_broadcast(out_shape, sa, sb, |k, _, j| gb[j] += sign * g[k]);
                }
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let div = matches!(node.op, Op::Div(..));
            let (sa, sb) = (val(nodes, *a).shape(), val(nodes, *b).shape());
            let (va, vb) = (val(nodes, *a).data(), val(nodes, *b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for_each_broadcast(out_shape, sa, sb, |k, i, j| {
                    let y = vb[j];
                    ga[i] += if div { g[k] / y } else { g[k] * y };
                });
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for_each_broadcast(out_shape, sa, sb, |k, i, j| {
                    let (x, y) = (va[i], vb[j]);
                    gb[j] += if div { -g[k] * x / (y * y) } else { g[k] * x };
                });
            }
        }
        Op::AddScalar(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::MulScalar(x, c) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(nodes, *a).shape(), val(nodes, *b).shape());
            let r = sa.len();
            let batch = if r == 3 { sa[0] } else { 1 };
            let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
            let (va, vb) = (val(nodes, *a).data(), val(nodes, *b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for bt in 0..batch {
                    let gm = MatRef::new(&g[bt * m * n..(bt + 1) * m * n], m, n);
                    let bm = MatRef::new(&vb[bt * k * n..(bt + 1) * k * n], k, n);
                    gemm(gm, bm.t(), 1.0, &mut ga[bt * m * k..(bt + 1) * m * k]);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for bt in 0..batch {
                    let gm = MatRef::new(&g[bt * m * n..(bt + 1) * m * n], m, n);
                    let am = MatRef::new(&va[bt * m * k..(bt + 1) * m * k], m, k);
                    gemm(am.t(), gm, 1.0, &mut gb[bt * k * n..(bt + 1) * k * n]);
                }
            }
        }
        Op::Permute(x, src) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (k, &i) in src.iter().enumerate() {
                    gx[i] += g[k];
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out_shape[1], out_shape[0]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let sw = val(nodes, *w).shape();
            let (k, m) = (sw[0], sw[1]);
            let n = out_shape[0];
            let gm = MatRef::new(g, n, m);
            if let Some(gx) = slot(nodes, grads, *x) {
                gemm(gm, MatRef::new(val(nodes, *w).data(), k, m).t(), 1.0, gx);
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                gemm(MatRef::new(val(nodes, *x).data(), n, k).t(), gm, 1.0, gw);
            }
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in g.chunks_exact(m) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
        }
        Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            kind,
        } => {
            let (n, c) = (out_shape[0], out_shape[1]);
            let gv = val(nodes, *gamma).data();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for i in 0..n {
                    for j in 0..c {
                        gg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for row in g.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                match kind {
                    NormKind::BatchEval => {
                        for i in 0..n {
                            for j in 0..c {
                                gx[i * c + j] += g[i * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    NormKind::BatchTrain => {
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for i in 0..n {
                            for j in 0..c {
                                let d = g[i * c + j] * gv[j];
                                s1[j] += d;
                                s2[j] += d * xhat[i * c + j];
                            }
                        }
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..c {
                                let d = g[i * c + j] * gv[j];
                                gx[i * c + j] += inv_std[j] / nf
                                    * (nf * d - s1[j] - xhat[i * c + j] * s2[j]);
                            }
                        }
                    }
                    NormKind::Layer => {
                        let cf = c as f64;
                        for i in 0..n {
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for j in 0..c {
                                let d = g[i * c + j] * gv[j];
                                s1 += d;
                                s2 += d * xhat[i * c + j];
                            }
                            for j in 0..c {
                                let d = g[i * c + j] * gv[j];
                                gx[i * c + j] +=
                                    inv_std[i] / cf * (cf * d - s1 - xhat[i * c + j] * s2);
                            }
                        }
                    }
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(nodes, *x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for k in 0..g.len() {
                    if xv[k] > 0.0 {
                        gx[k] += g[k];
                    }
                }
            }
        }
        Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
            let log = matches!(node.op, Op::LogSoftmax(..));
            let y = node.value.data();
            let (outer, len, inner) = split_axis(out_shape, *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        if log {
                            let s: f64 = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += g[idx(l)] - y[idx(l)].exp() * s;
                            }
                        } else {
                            let s: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += y[idx(l)] * (g[idx(l)] - s);
                            }
                        }
                    }
                }
            }
        }
        Op::Log(x) => {
            let xv = val(nodes, *x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for k in 0..g.len() {
                    gx[k] += g[k] / xv[k];
                }
            }
        }
        Op::Exp(x) => {
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k];
                }
            }
        }
        Op::Sqrt(x) => {
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for k in 0..g.len() {
                    if y[k] > 0.0 {
                        gx[k] += g[k] * 0.5 / y[k];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::SumAxis(x, axis) => {
            let (outer, len, inner) = split_axis(val(nodes, *x).shape(), *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Extremum { x, axis, arg } => {
            let (_, len, inner) = split_axis(val(nodes, *x).shape(), *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (k, &l) in arg.iter().enumerate() {
                    let (o, i) = (k / inner, k % inner);
                    gx[(o * len + l) * inner + i] += g[k];
                }
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &x in xs {
                let len = val(nodes, x).shape()[*axis];
                if let Some(gx) = slot(nodes, grads, x) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for k in 0..len * inner {
                            gx[dst + k] += g[src + k];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Gather(x, indices) => {
            let row = if indices.is_empty() { 0 } else { g.len() / indices.len() };
            if let Some(gx) = slot(nodes, grads, *x) {
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..row {
                        gx[i * row + c] += g[k * row + c];
                    }
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, full, inner) = split_axis(val(nodes, *x).shape(), *axis);
            let len = out_shape[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let d = (o * full + start) * inner;
                    for k in 0..len * inner {
                        gx[d + k] += g[o * len * inner + k];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Broadcast(x) => {
            let sx = val(nodes, *x).shape();
            if let Some(gx) = slot(nodes, grads, *x) {
                for_each_broadcast(out_shape, sx, out_shape, |k, i, _| gx[i] += g[k]);
            }
        }
        Op::PairwiseSqDist(a, b) => {
            let (sa, sb) = (val(nodes, *a).shape(), val(nodes, *b).shape());
            let (batch, n, m, d) = pair_dims(sa, sb).expect("checked at forward");
            let (va, vb) = (val(nodes, *a).data(), val(nodes, *b).data());
            let mut acc = |target: Var, sign: f64| {
                if let Some(gt) = slot(nodes, grads, target) {
                    for bt in 0..batch {
                        for i in 0..n {
                            for j in 0..m {
                                let gij = g[(bt * n + i) * m + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let (ra, rb) = ((bt * n + i) * d, (bt * m + j) * d);
                                let dst = if sign > 0.0 { ra } else { rb };
                                for c in 0..d {
                                    gt[dst + c] += sign * 2.0 * gij * (va[ra + c] - vb[rb + c]);
                                }
                            }
                        }
                    }
                }
            };
            acc(*a, 1.0);
            acc(*b, -1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[0.0, 0.0]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_of_ones_is_dot_product() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[1, 3], 1.0));
        let b = g.input(Tensor::full(&[3, 1], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.value(c).item(), 3.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let xd = g.detach(x);
        let p = g.mul(xd, y).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
        let c = g.input(Tensor::zeros(&[4, 2]));
        assert!(g.matmul(a, c).is_err());
    }

    #[test]
    fn batch_norm_rejects_single_row() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2]));
        let ga = g.input(Tensor::full(&[2], 1.0));
        let be = g.input(Tensor::zeros(&[2]));
        assert!(matches!(
            g.batch_norm_train(x, ga, be, 1e-5),
            Err(Error::BatchNormSingleRow)
        ));
    }

    #[test]
    fn broadcast_add_gradient_sums_over_rows() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3, 2]));
        let b = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.add(x, b).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn min_axis_picks_lowest_index_on_ties() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 0.0, 0.0, 5.0, 4.0, 6.0]));
        let m = g.min_axis(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[0.0, 4.0]);
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = g.narrow(x, 1, 0, 1).unwrap();
        let b = g.narrow(x, 1, 1, 2).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
    }
}
