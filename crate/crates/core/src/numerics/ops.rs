//! Differentiable tensor operations.

use std::rc::Rc;

use super::counters;
use super::gemm::{gemm, MatRef};
use super::tensor::Storage;
use super::{NumericsError, Result, Tensor};

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn shape_mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat output indices onto a broadcast source.
enum IndexMap {
    Same,
    Scalar,
    /// Source is a trailing suffix of the output shape.
    Modulo(usize),
    /// Source equals a leading prefix of the output shape followed by ones.
    Divide(usize),
    General(Vec<usize>),
}

impl IndexMap {
    fn new(src: &[usize], out: &[usize]) -> IndexMap {
        let n_src = numel(src);
        let n_out = numel(out);
        if src == out {
            return IndexMap::Same;
        }
        if n_src == 1 {
            return IndexMap::Scalar;
        }
        let src_trim: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if out.ends_with(&src_trim) && numel(&src_trim) == n_src {
            return IndexMap::Modulo(n_src);
        }
        let pad = out.len() - src.len();
        let aligned: Vec<usize> = std::iter::repeat(1)
            .take(pad)
            .chain(src.iter().copied())
            .collect();
        if let Some(k) = (0..=out.len())
            .rev()
            .find(|&k| aligned[..k] == out[..k] && aligned[k..].iter().all(|&d| d == 1))
        {
            if numel(&out[..k]) == n_src {
                return IndexMap::Divide(numel(&out[k..]));
            }
        }
        let src_strides = strides(&aligned);
        let eff: Vec<usize> = aligned
            .iter()
            .zip(&src_strides)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let mut map = vec![0usize; n_out];
        let mut idx = vec![0usize; out.len()];
        let mut offset = 0usize;
        for slot in map.iter_mut() {
            *slot = offset;
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                offset += eff[d];
                if idx[d] < out[d] {
                    break;
                }
                offset -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        IndexMap::General(map)
    }

    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Same => i,
            IndexMap::Scalar => 0,
            IndexMap::Modulo(n) => i % n,
            IndexMap::Divide(n) => i / n,
            IndexMap::General(m) => m[i],
        }
    }

    /// Sums an output-shaped buffer down to the source shape.
    fn reduce(&self, values: Vec<f64>, src_len: usize) -> Vec<f64> {
        if let IndexMap::Same = self {
            return values;
        }
        let mut out = vec![0.0; src_len];
        for (i, v) in values.iter().enumerate() {
            out[self.get(i)] += v;
        }
        out
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape = broadcast_shapes(self.shape(), other.shape())
            .ok_or_else(|| shape_mismatch(op, self, other))?;
        let n = numel(&out_shape);
        let ma = IndexMap::new(self.shape(), &out_shape);
        let mb = IndexMap::new(other.shape(), &out_shape);
        let (a, b) = (self.data(), other.data());
        let data: Vec<f64> = match (&ma, &mb, kind) {
            (IndexMap::Same, IndexMap::Same, BinaryKind::Add) => {
                a.iter().zip(b).map(|(x, y)| x + y).collect()
            }
            (IndexMap::Same, IndexMap::Same, BinaryKind::Mul) => {
                a.iter().zip(b).map(|(x, y)| x * y).collect()
            }
            _ => (0..n)
                .map(|i| {
                    let (x, y) = (a[ma.get(i)], b[mb.get(i)]);
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => x / y,
                    }
                })
                .collect(),
        };
        if matches!(kind, BinaryKind::Mul | BinaryKind::Div) {
            counters::add_madds(n as u64);
        }
        let (ta, tb) = (self.clone(), other.clone());
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Tensor::from_op(
            op,
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (a, b) = (ta.data(), tb.data());
                let ga = need_a.then(|| {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * b[mb.get(i)])
                            .collect(),
                        BinaryKind::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi / b[mb.get(i)])
                            .collect(),
                    };
                    ma.reduce(full, a.len())
                });
                let gb = need_b.then(|| {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add => g.to_vec(),
                        BinaryKind::Sub => g.iter().map(|v| -v).collect(),
                        BinaryKind::Mul => g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * a[ma.get(i)])
                            .collect(),
                        BinaryKind::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| {
                                let y = b[mb.get(i)];
                                -gi * a[ma.get(i)] / (y * y)
                            })
                            .collect(),
                    };
                    mb.reduce(full, b.len())
                });
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Div)
    }

    /// Elementwise map whose derivative is expressed through the input `x`
    /// and output `y`.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let storage = Rc::new(Storage::new(self.data().iter().map(|&x| f(x)).collect()));
        let out = storage.clone();
        let input = self.clone();
        Tensor::from_op_shared(
            op,
            self.shape().to_vec(),
            storage,
            vec![self.clone()],
            Box::new(move |g| {
                let grad = g
                    .iter()
                    .zip(input.data())
                    .zip(out.data())
                    .map(|((gi, &x), &y)| gi * df(x, y))
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Result<Tensor> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Result<Tensor> {
        counters::add_madds(self.len() as u64);
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x·σ(x)`.
    pub fn silu(&self) -> Result<Tensor> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        counters::add_madds(self.len() as u64);
        self.unary("scale", move |x| x * factor, move |_, _| factor)
    }

    pub fn add_scalar(&self, value: f64) -> Result<Tensor> {
        self.unary("add_scalar", move |x| x + value, |_, _| 1.0)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let n = self.len();
        Tensor::from_op(
            "sum",
            vec![],
            vec![self.data().iter().sum()],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.len().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    fn axis_split(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.ndim() {
            return Err(NumericsError::InvalidAxis {
                op,
                axis,
                ndim: self.ndim(),
            });
        }
        let shape = self.shape();
        Ok((
            numel(&shape[..axis]),
            shape[axis],
            numel(&shape[axis + 1..]),
        ))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = self.axis_split("sum_axis", axis)?;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::from_op(
            "sum_axis",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut grad = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        grad[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(grad)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.axis_split("mean_axis", axis)?.1.max(1);
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    /// Same values under a new shape of equal size (storage is shared).
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.len() {
            return Err(NumericsError::InvalidShape {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape()),
            });
        }
        Ok(Tensor::view_op(
            "reshape",
            self,
            shape,
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `dims[i]`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if dims.len() != nd
            || dims
                .iter()
                .any(|&d| d >= nd || std::mem::replace(&mut seen[d], true))
        {
            return Err(NumericsError::InvalidShape {
                op: "permute",
                detail: format!("{dims:?} is not a permutation of {nd} axes"),
            });
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = dims.iter().map(|&d| self.shape()[d]).collect();
        let gather = permutation_map(
            &out_shape,
            &dims.iter().map(|&d| in_strides[d]).collect::<Vec<_>>(),
        );
        let x = self.data();
        let data: Vec<f64> = gather.iter().map(|&i| x[i]).collect();
        Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut grad = vec![0.0; g.len()];
                for (o, &i) in gather.iter().enumerate() {
                    grad[i] = g[o];
                }
                vec![Some(grad)]
            }),
        )
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let nd = self.ndim();
        if a >= nd || b >= nd {
            return Err(NumericsError::InvalidAxis {
                op: "transpose",
                axis: a.max(b),
                ndim: nd,
            });
        }
        let mut dims: Vec<usize> = (0..nd).collect();
        dims.swap(a, b);
        self.permute(&dims)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (outer, n, inner) = self.axis_split("slice", axis)?;
        if start > end || end > n {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice",
                detail: format!("{start}..{end} on axis {axis} of extent {n}"),
            });
        }
        let width = end - start;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = width;
        Tensor::from_op(
            "slice",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut grad = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    grad[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(grad)]
            }),
        )
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| NumericsError::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let (outer, _, inner) = first.axis_split("concat", axis)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let same = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(shape_mismatch("concat", first, p));
            }
            widths.push(p.shape()[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> = widths
                    .iter()
                    .map(|w| Vec::with_capacity(outer * w * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (grad, &w) in grads.iter_mut().zip(&widths) {
                        grad.extend_from_slice(&g[pos..pos + w * inner]);
                        pos += w * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// Overwrites entries above the causal diagonal of the trailing `[q, k]`
    /// matrices: entry `(i, j)` is replaced by `value` when `j > i + offset`.
    /// A `value` of −∞ is stored as the most negative finite `f64`.
    pub fn causal_mask_fill(&self, offset: usize, value: f64) -> Result<Tensor> {
        let value = if value == f64::NEG_INFINITY {
            f64::MIN
        } else {
            value
        };
        if self.ndim() < 2 {
            return Err(NumericsError::InvalidShape {
                op: "causal_mask_fill",
                detail: "needs at least 2 axes".into(),
            });
        }
        let nd = self.ndim();
        let (q, k) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let masked = move |flat: usize| {
            let j = flat % k;
            let i = (flat / k) % q;
            j > i + offset
        };
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(f, &x)| if masked(f) { value } else { x })
            .collect();
        Tensor::from_op(
            "causal_mask_fill",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let grad = g
                    .iter()
                    .enumerate()
                    .map(|(f, &v)| if masked(f) { 0.0 } else { v })
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = self.axis_split("softmax", axis)?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    y[at(j)] /= total;
                }
            }
        }
        let storage = Rc::new(Storage::new(y));
        let out = storage.clone();
        Tensor::from_op_shared(
            "softmax",
            self.shape().to_vec(),
            storage,
            vec![self.clone()],
            Box::new(move |g| {
                let y = out.data();
                let mut grad = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            grad[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(grad)]
            }),
        )
    }

    /// `x − logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = self.axis_split("log_softmax", axis)?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (x[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    y[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let storage = Rc::new(Storage::new(y));
        let out = storage.clone();
        Tensor::from_op_shared(
            "log_softmax",
            self.shape().to_vec(),
            storage,
            vec![self.clone()],
            Box::new(move |g| {
                let y = out.data();
                let mut grad = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            grad[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                vec![Some(grad)]
            }),
        )
    }

    /// Batched matrix product over the trailing two axes; leading (batch)
    /// axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        if a.ndim() < 2 || b.ndim() < 2 {
            return Err(shape_mismatch("matmul", a, b));
        }
        let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
        let (k2, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
        if k != k2 {
            return Err(shape_mismatch("matmul", a, b));
        }
        let a_batch = &a.shape()[..a.ndim() - 2];
        let b_batch = &b.shape()[..b.ndim() - 2];
        let batch =
            broadcast_shapes(a_batch, b_batch).ok_or_else(|| shape_mismatch("matmul", a, b))?;
        let nb = numel(&batch);
        let amap = IndexMap::new(a_batch, &batch);
        let bmap = IndexMap::new(b_batch, &batch);
        let mut out = vec![0.0; nb * m * n];
        // A 2-D right operand against a stacked left operand collapses to one product.
        if b_batch.is_empty() && matches!(amap, IndexMap::Same) {
            gemm(
                nb * m,
                k,
                n,
                1.0,
                MatRef::rows(a.data(), k),
                MatRef::rows(b.data(), n),
                0.0,
                &mut out,
            );
        } else {
            for bi in 0..nb {
                let (ia, ib) = (amap.get(bi), bmap.get(bi));
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    MatRef::rows(&a.data()[ia * m * k..(ia + 1) * m * k], k),
                    MatRef::rows(&b.data()[ib * k * n..(ib + 1) * k * n], n),
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let (ta, tb) = (a.clone(), b.clone());
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        Tensor::from_op(
            "matmul",
            shape,
            out,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let (a, b) = (ta.data(), tb.data());
                let ga = need_a.then(|| {
                    let mut ga = vec![0.0; a.len()];
                    if matches!(amap, IndexMap::Same) && matches!(bmap, IndexMap::Scalar) {
                        gemm(
                            nb * m,
                            n,
                            k,
                            1.0,
                            MatRef::rows(g, n),
                            MatRef::transposed(b, n),
                            0.0,
                            &mut ga,
                        );
                    } else {
                        for bi in 0..nb {
                            let (ia, ib) = (amap.get(bi), bmap.get(bi));
                            gemm(
                                m,
                                n,
                                k,
                                1.0,
                                MatRef::rows(&g[bi * m * n..(bi + 1) * m * n], n),
                                MatRef::transposed(&b[ib * k * n..(ib + 1) * k * n], n),
                                1.0,
                                &mut ga[ia * m * k..(ia + 1) * m * k],
                            );
                        }
                    }
                    ga
                });
                let gb = need_b.then(|| {
                    let mut gb = vec![0.0; b.len()];
                    if matches!(amap, IndexMap::Same) && matches!(bmap, IndexMap::Scalar) {
                        gemm(
                            k,
                            nb * m,
                            n,
                            1.0,
                            MatRef::transposed(a, k),
                            MatRef::rows(g, n),
                            0.0,
                            &mut gb,
                        );
                    } else {
                        for bi in 0..nb {
                            let (ia, ib) = (amap.get(bi), bmap.get(bi));
                            gemm(
                                k,
                                m,
                                n,
                                1.0,
                                MatRef::transposed(&a[ia * m * k..(ia + 1) * m * k], k),
                                MatRef::rows(&g[bi * m * n..(bi + 1) * m * n], n),
                                1.0,
                                &mut gb[ib * k * n..(ib + 1) * k * n],
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Row gather from a `[vocab, d]` table; the gradient scatter-adds back.
    pub fn embedding(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
        if table.ndim() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "embedding",
                detail: "table must be 2-D".into(),
            });
        }
        let (vocab, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(NumericsError::IndexOutOfRange {
                op: "embedding",
                detail: format!("id {bad} with vocabulary {vocab}"),
            });
        }
        let t = table.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i as usize * d..(i as usize + 1) * d]);
        }
        let ids = ids.to_vec();
        Tensor::from_op(
            "embedding",
            vec![ids.len(), d],
            data,
            vec![table.clone()],
            Box::new(move |g| {
                let mut grad = vec![0.0; vocab * d];
                for (row, &i) in ids.iter().enumerate() {
                    grad[i as usize * d..(i as usize + 1) * d]
                        .iter_mut()
                        .zip(&g[row * d..(row + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(grad)]
            }),
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [n, vocab]`. Rows whose target is `None` are ignored.
    pub fn cross_entropy(logits: &Tensor, targets: &[Option<u32>]) -> Result<Tensor> {
        if logits.ndim() != 2 || logits.shape()[0] != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, vocab) = (logits.shape()[0], logits.shape()[1]);
        if let Some(bad) = targets.iter().flatten().find(|&&t| t as usize >= vocab) {
            return Err(NumericsError::IndexOutOfRange {
                op: "cross_entropy",
                detail: format!("target {bad} with vocabulary {vocab}"),
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(NumericsError::InvalidShape {
                op: "cross_entropy",
                detail: "no targets".into(),
            });
        }
        let x = logits.data();
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = target else { continue };
            let row = &x[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[*t as usize];
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - max).exp() / sum;
            }
        }
        let targets = targets.to_vec();
        let inv = 1.0 / count as f64;
        Tensor::from_op(
            "cross_entropy",
            vec![],
            vec![total * inv],
            vec![logits.clone()],
            Box::new(move |g| {
                let scale = g[0] * inv;
                let mut grad = probs;
                for (r, target) in targets.iter().enumerate() {
                    let row = &mut grad[r * vocab..(r + 1) * vocab];
                    match target {
                        Some(t) => {
                            row[*t as usize] -= 1.0;
                            row.iter_mut().for_each(|v| *v *= scale);
                        }
                        None => row.iter_mut().for_each(|v| *v = 0.0),
                    }
                }
                vec![Some(grad)]
            }),
        )
    }
}

/// Flat source offsets for each element of an output of `out_shape` whose
/// axis `i` advances the source by `src_strides[i]`.
fn permutation_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(i.matmul(&v).unwrap().data(), &[3.0, 4.0]);
        let row = t(&[1, 2], &[1.0, 2.0]);
        assert_eq!(row.matmul(&v).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = t(&[3], &[0.0, 0.0, 0.0]).softmax(0).unwrap();
        s.data()
            .iter()
            .for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-15));
        let s = t(&[2], &[1000.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
        let s = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])
            .softmax(0)
            .unwrap();
        for (v, e) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
        let empty = t(&[0], &[]).softmax(0).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn backward_sum_and_square() {
        let w = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        w.sum().unwrap().backward().unwrap();
        assert_eq!(w.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
        w.zero_grad();
        w.mul(&w).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let w = Tensor::param(vec![2], vec![1.0, -1.0]).unwrap();
        let y = w.add(&w).unwrap().add(&w.scale(3.0).unwrap()).unwrap();
        y.sum().unwrap().backward().unwrap();
        assert_eq!(w.grad().unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn broadcast_patterns() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bias = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(
            a.add(&bias).unwrap().data(),
            &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
        );
        let col = t(&[2, 1], &[1.0, 2.0]);
        assert_eq!(
            a.mul(&col).unwrap().data(),
            &[1.0, 2.0, 3.0, 8.0, 10.0, 12.0]
        );
        let mid = t(&[1, 3], &[1.0, 1.0, 1.0]);
        assert_eq!(a.sub(&mid).unwrap().data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(a.add(&t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn causal_mask() {
        let s = t(&[2, 3], &[1.0; 6]).causal_mask_fill(1, -9.0).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, -9.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_finite_names_op() {
        let x = t(&[1], &[1000.0]);
        let err = x.exp().unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { op: "exp" }));
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = t(&[2, 8], &[0.0; 16]);
        let loss = Tensor::cross_entropy(&logits, &[Some(3), None]).unwrap();
        assert!((loss.item().unwrap() - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn embedding_scatter_add() {
        let table = Tensor::param(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let e = Tensor::embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(e.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        e.sum().unwrap().backward().unwrap();
        assert_eq!(
            table.grad().unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn slice_concat_roundtrip() {
        let a = t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let l = a.slice(1, 0, 1).unwrap();
        let r = a.slice(1, 1, 4).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let back = Tensor::concat(&[l, r], 1).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            a.transpose(0, 1).unwrap().data(),
            &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }
}
