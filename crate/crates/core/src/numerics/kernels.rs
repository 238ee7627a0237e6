//! Fused differentiable kernels: RMS normalisation, depthwise causal
//! convolution and causal scaled dot-product attention.

use std::rc::Rc;

use super::counters::{self, ScratchGuard};
use super::gemm::{gemm, MatRef};
use super::tensor::Storage;
use super::{NumericsError, Result, Tensor};

/// Query rows processed together by the attention kernel.
const ATTENTION_ROW_BLOCK: usize = 64;

impl Tensor {
    /// `x / sqrt(mean(x²) + eps) ⊙ gain` over the last axis.
    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| NumericsError::InvalidShape {
                op: "rms_norm",
                detail: "scalar input".into(),
            })?;
        if gain.shape() != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "rms_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = if d == 0 { 0 } else { self.len() / d };
        let (x, g) = (self.data(), gain.data());
        let mut inv_rms = vec![0.0; rows];
        let mut y = vec![0.0; self.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms[r] = inv;
            for ((o, xi), gi) in y[r * d..(r + 1) * d].iter_mut().zip(row).zip(g) {
                *o = xi * inv * gi;
            }
        }
        counters::add_madds(3 * self.len() as u64);
        let (tx, tg) = (self.clone(), gain.clone());
        Tensor::from_op(
            "rms_norm",
            self.shape().to_vec(),
            y,
            vec![self.clone(), gain.clone()],
            Box::new(move |dy| {
                let (x, g) = (tx.data(), tg.data());
                let mut dx = vec![0.0; x.len()];
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    let inv = inv_rms[r];
                    let row = &x[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let mut proj = 0.0;
                    for j in 0..d {
                        let xhat = row[j] * inv;
                        dg[j] += dyr[j] * xhat;
                        proj += dyr[j] * g[j] * xhat;
                    }
                    proj /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * (dyr[j] * g[j] - row[j] * inv * proj);
                    }
                }
                vec![Some(dx), Some(dg)]
            }),
        )
    }

    /// Depthwise causal convolution of `self: [L, C]` with `weight: [C, K]`
    /// and `bias: [C]`. Output row `t` sees input rows `t−K+1..=t`; rows
    /// before the start come from `history` (`(K−1)·C` values, oldest row
    /// first) or are zero. Also returns the last `K−1` input rows for the
    /// next call.
    pub fn causal_conv1d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        history: Option<&[f64]>,
    ) -> Result<(Tensor, Vec<f64>)> {
        if self.ndim() != 2
            || weight.ndim() != 2
            || weight.shape()[0] != self.shape()[1]
            || bias.shape() != [self.shape()[1]]
        {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_conv1d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (len, ch) = (self.shape()[0], self.shape()[1]);
        let width = weight.shape()[1];
        let pad = width.saturating_sub(1);
        let mut padded = match history {
            Some(h) if h.len() == pad * ch => h.to_vec(),
            Some(h) => {
                return Err(NumericsError::InvalidShape {
                    op: "causal_conv1d",
                    detail: format!("history has {} values, expected {}", h.len(), pad * ch),
                })
            }
            None => vec![0.0; pad * ch],
        };
        padded.extend_from_slice(self.data());
        let (w, b) = (weight.data(), bias.data());
        let mut y = vec![0.0; len * ch];
        for t in 0..len {
            let out = &mut y[t * ch..(t + 1) * ch];
            out.copy_from_slice(b);
            for j in 0..width {
                let src = &padded[(t + j) * ch..(t + j + 1) * ch];
                for c in 0..ch {
                    out[c] += w[c * width + j] * src[c];
                }
            }
        }
        counters::add_madds((len * ch * width) as u64);
        let tail = padded[len * ch..].to_vec();
        let tw = weight.clone();
        let out = Tensor::from_op(
            "causal_conv1d",
            vec![len, ch],
            y,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |dy| {
                let w = tw.data();
                let mut dx = vec![0.0; len * ch];
                let mut dw = vec![0.0; ch * width];
                let mut db = vec![0.0; ch];
                for t in 0..len {
                    let g = &dy[t * ch..(t + 1) * ch];
                    db.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    for j in 0..width {
                        let s = t + j;
                        let src = &padded[s * ch..(s + 1) * ch];
                        for c in 0..ch {
                            dw[c * width + j] += g[c] * src[c];
                        }
                        if s >= pad {
                            let row = &mut dx[(s - pad) * ch..(s - pad + 1) * ch];
                            for c in 0..ch {
                                row[c] += w[c * width + j] * g[c];
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dw), Some(db)]
            }),
        )?;
        Ok((out, tail))
    }

    /// Causal scaled dot-product attention, `softmax(QKᵀ/√d)·V` per head.
    ///
    /// `q: [H, Lq, D]`, `k: [H, Lk, D]`, `v: [H, Lk, Dv]` with `Lk ≥ Lq`;
    /// query row `i` is at absolute position `Lk − Lq + i` and attends keys
    /// `0..=Lk−Lq+i`. Score rows are formed one block at a time, so memory
    /// is `O(block·Lk)` rather than `O(Lq·Lk)`.
    pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let bad = || NumericsError::ShapeMismatch {
            op: "causal_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        };
        if q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3 {
            return Err(bad());
        }
        let (heads, lq, dim) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let (lk, dv) = (k.shape()[1], v.shape()[2]);
        if k.shape()[0] != heads
            || k.shape()[2] != dim
            || v.shape()[0] != heads
            || v.shape()[1] != lk
            || lk < lq
        {
            return Err(bad());
        }
        let offset = lk - lq;
        let scale = 1.0 / (dim as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut out = vec![0.0; heads * lq * dv];
        let mut lse = vec![0.0; heads * lq];
        let block = ATTENTION_ROW_BLOCK.min(lq.max(1));
        let _scratch = ScratchGuard::new(block * lk);
        let mut scores = vec![0.0; block * lk];
        for h in 0..heads {
            let qh = &qd[h * lq * dim..(h + 1) * lq * dim];
            let kh = &kd[h * lk * dim..(h + 1) * lk * dim];
            let vh = &vd[h * lk * dv..(h + 1) * lk * dv];
            for r0 in (0..lq).step_by(block) {
                let r1 = (r0 + block).min(lq);
                let br = r1 - r0;
                let kmax = offset + r1;
                let s = &mut scores[..br * kmax];
                gemm(
                    br,
                    dim,
                    kmax,
                    scale,
                    MatRef::rows(&qh[r0 * dim..r1 * dim], dim),
                    MatRef::transposed(&kh[..kmax * dim], dim),
                    0.0,
                    s,
                );
                for i in 0..br {
                    let visible = offset + r0 + i + 1;
                    let row = &mut s[i * kmax..(i + 1) * kmax];
                    let max = row[..visible]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row[..visible].iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    row[..visible].iter_mut().for_each(|v| *v /= total);
                    row[visible..].iter_mut().for_each(|v| *v = 0.0);
                    lse[h * lq + r0 + i] = max + total.ln();
                }
                gemm(
                    br,
                    kmax,
                    dv,
                    1.0,
                    MatRef::rows(s, kmax),
                    MatRef::rows(&vh[..kmax * dv], dv),
                    0.0,
                    &mut out[(h * lq + r0) * dv..(h * lq + r1) * dv],
                );
            }
        }
        drop(scores);
        let storage = Rc::new(Storage::new(out));
        let saved_out = storage.clone();
        let (tq, tk, tv) = (q.clone(), k.clone(), v.clone());
        Tensor::from_op_shared(
            "causal_attention",
            vec![heads, lq, dv],
            storage,
            vec![q.clone(), k.clone(), v.clone()],
            Box::new(move |dout| {
                let (qd, kd, vd, od) = (tq.data(), tk.data(), tv.data(), saved_out.data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dvv = vec![0.0; vd.len()];
                let _scratch = ScratchGuard::new(2 * block * lk);
                let mut p = vec![0.0; block * lk];
                let mut dp = vec![0.0; block * lk];
                for h in 0..heads {
                    let qh = &qd[h * lq * dim..(h + 1) * lq * dim];
                    let kh = &kd[h * lk * dim..(h + 1) * lk * dim];
                    let vh = &vd[h * lk * dv..(h + 1) * lk * dv];
                    for r0 in (0..lq).step_by(block) {
                        let r1 = (r0 + block).min(lq);
                        let br = r1 - r0;
                        let kmax = offset + r1;
                        let pb = &mut p[..br * kmax];
                        gemm(
                            br,
                            dim,
                            kmax,
                            scale,
                            MatRef::rows(&qh[r0 * dim..r1 * dim], dim),
                            MatRef::transposed(&kh[..kmax * dim], dim),
                            0.0,
                            pb,
                        );
                        for i in 0..br {
                            let visible = offset + r0 + i + 1;
                            let l = lse[h * lq + r0 + i];
                            let row = &mut pb[i * kmax..(i + 1) * kmax];
                            row[..visible].iter_mut().for_each(|v| *v = (*v - l).exp());
                            row[visible..].iter_mut().for_each(|v| *v = 0.0);
                        }
                        let go = &dout[(h * lq + r0) * dv..(h * lq + r1) * dv];
                        let oo = &od[(h * lq + r0) * dv..(h * lq + r1) * dv];
                        gemm(
                            kmax,
                            br,
                            dv,
                            1.0,
                            MatRef::transposed(pb, kmax),
                            MatRef::rows(go, dv),
                            1.0,
                            &mut dvv[h * lk * dv..(h * lk + kmax) * dv],
                        );
                        let dpb = &mut dp[..br * kmax];
                        gemm(
                            br,
                            dv,
                            kmax,
                            1.0,
                            MatRef::rows(go, dv),
                            MatRef::transposed(&vh[..kmax * dv], dv),
                            0.0,
                            dpb,
                        );
                        for i in 0..br {
                            let di: f64 = go[i * dv..(i + 1) * dv]
                                .iter()
                                .zip(&oo[i * dv..(i + 1) * dv])
                                .map(|(a, b)| a * b)
                                .sum();
                            for (dpv, pv) in dpb[i * kmax..(i + 1) * kmax]
                                .iter_mut()
                                .zip(&pb[i * kmax..(i + 1) * kmax])
                            {
                                *dpv = pv * (*dpv - di);
                            }
                        }
                        gemm(
                            br,
                            kmax,
                            dim,
                            scale,
                            MatRef::rows(dpb, kmax),
                            MatRef::rows(&kh[..kmax * dim], dim),
                            0.0,
                            &mut dq[(h * lq + r0) * dim..(h * lq + r1) * dim],
                        );
                        gemm(
                            kmax,
                            br,
                            dim,
                            scale,
                            MatRef::transposed(dpb, kmax),
                            MatRef::rows(&qh[r0 * dim..r1 * dim], dim),
                            1.0,
                            &mut dk[h * lk * dim..(h * lk + kmax) * dim],
                        );
                    }
                }
                vec![Some(dq), Some(dk), Some(dvv)]
            }),
        )
    }
}
