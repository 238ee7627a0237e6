//! Chunked scan over the selective SSD: dense intra-chunk products plus a
//! carried state between chunks, and its reverse-mode adjoint.

use crate::numerics::counters::{self, ScratchGuard};
use crate::numerics::{gemm, MatRef};

use super::SsdDims;

/// Decay factors of one chunk for one head: `l[i*q+j] = a_{j+1}·…·a_i`
/// (lower triangle), `d[i] = a_0·…·a_i`, `e[j] = a_{j+1}·…·a_{q-1}`.
struct Decay {
    l: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
}

fn decay(a: &[f64], start: usize, q: usize, heads: usize, head: usize) -> Decay {
    let at = |i: usize| a[(start + i) * heads + head];
    let mut l = vec![0.0; q * q];
    for i in 0..q {
        let mut prod = 1.0;
        l[i * q + i] = 1.0;
        for j in (0..i).rev() {
            prod *= at(j + 1);
            l[i * q + j] = prod;
        }
    }
    let mut d = vec![0.0; q];
    let mut prod = 1.0;
    for (i, di) in d.iter_mut().enumerate() {
        prod *= at(i);
        *di = prod;
    }
    let mut e = vec![0.0; q];
    let mut prod = 1.0;
    for j in (0..q).rev() {
        e[j] = prod;
        prod *= at(j);
    }
    counters::add_madds((q * q / 2 + 2 * q) as u64);
    Decay { l, d, e }
}

/// Row-major view starting at row `t` of an `[L, heads, width]` tensor slot.
fn rows_of(data: &[f64], t: usize, slot: usize, slots: usize, width: usize) -> MatRef<'_> {
    MatRef {
        data: &data[(t * slots + slot) * width..],
        row_stride: slots * width,
        col_stride: 1,
    }
}

/// Transposed view of the same rows (`width × q`).
fn cols_of(data: &[f64], t: usize, slot: usize, slots: usize, width: usize) -> MatRef<'_> {
    MatRef {
        data: &data[(t * slots + slot) * width..],
        row_stride: 1,
        col_stride: slots * width,
    }
}

fn scatter_add(
    dst: &mut [f64],
    src: &[f64],
    t: usize,
    slot: usize,
    slots: usize,
    width: usize,
    q: usize,
) {
    for i in 0..q {
        let base = ((t + i) * slots + slot) * width;
        for (o, v) in dst[base..base + width]
            .iter_mut()
            .zip(&src[i * width..(i + 1) * width])
        {
            *o += v;
        }
    }
}

/// Intra-chunk score matrix `S = C Bᵀ` for one group.
fn scores(dims: &SsdDims, b: &[f64], c: &[f64], start: usize, q: usize, group: usize) -> Vec<f64> {
    let (g, n) = (dims.groups, dims.state);
    let mut s = vec![0.0; q * q];
    gemm(
        q,
        n,
        q,
        1.0,
        rows_of(c, start, group, g, n),
        cols_of(b, start, group, g, n),
        0.0,
        &mut s,
    );
    s
}

/// Runs the chunked scan from state `h` (updated in place to the final
/// state). When `checkpoints` is given, the state entering each chunk is
/// appended to it.
pub(crate) fn forward(
    dims: &SsdDims,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    x: &[f64],
    h: &mut [f64],
    chunk: usize,
    mut checkpoints: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let SsdDims {
        len,
        heads,
        head_dim: p,
        state: n,
        ..
    } = *dims;
    let mut y = vec![0.0; len * heads * p];
    let _scratch = ScratchGuard::new(chunk * chunk * 3 + chunk * (p + n));
    let mut tmp = vec![0.0; chunk * p.max(n)];
    let mut start = 0;
    while start < len {
        let q = chunk.min(len - start);
        if let Some(cp) = checkpoints.as_deref_mut() {
            cp.extend_from_slice(h);
        }
        for group in 0..dims.groups {
            let s = scores(dims, b, c, start, q, group);
            for head in dims.heads_of(group) {
                let dec = decay(a, start, q, heads, head);
                let w: Vec<f64> = s.iter().zip(&dec.l).map(|(s, l)| s * l).collect();
                let hh = &mut h[head * p * n..(head + 1) * p * n];
                // inter-chunk: diag(D)·C·h_inᵀ, then intra-chunk W·X
                gemm(
                    q,
                    n,
                    p,
                    1.0,
                    rows_of(c, start, group, dims.groups, n),
                    MatRef::transposed(hh, n),
                    0.0,
                    &mut tmp,
                );
                for i in 0..q {
                    tmp[i * p..(i + 1) * p]
                        .iter_mut()
                        .for_each(|v| *v *= dec.d[i]);
                }
                gemm(
                    q,
                    q,
                    p,
                    1.0,
                    MatRef::rows(&w, q),
                    rows_of(x, start, head, heads, p),
                    1.0,
                    &mut tmp,
                );
                scatter_add(&mut y, &tmp[..q * p], start, head, heads, p, q);
                // h_out = D_end·h_in + Xᵀ·diag(E)·B
                let mut eb = vec![0.0; q * n];
                for j in 0..q {
                    let row = ((start + j) * dims.groups + group) * n;
                    for (o, v) in eb[j * n..(j + 1) * n].iter_mut().zip(&b[row..row + n]) {
                        *o = v * dec.e[j];
                    }
                }
                counters::add_madds((q * q + q * n + p * n) as u64);
                let d_end = dec.d[q - 1];
                gemm(
                    p,
                    q,
                    n,
                    1.0,
                    cols_of(x, start, head, heads, p),
                    MatRef::rows(&eb, n),
                    d_end,
                    hh,
                );
            }
        }
        start += q;
    }
    y
}

pub(crate) struct Gradients {
    pub log_a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub x: Vec<f64>,
}

/// Adjoint of [`forward`] given the per-chunk entry states it recorded.
/// The gradient with respect to `a` is returned as `∂/∂ln a`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    dims: &SsdDims,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    x: &[f64],
    dy: &[f64],
    checkpoints: &[f64],
    chunk: usize,
) -> Gradients {
    let SsdDims {
        len,
        heads,
        head_dim: p,
        state: n,
        groups,
    } = *dims;
    let hpn = heads * p * n;
    let mut grads = Gradients {
        log_a: vec![0.0; len * heads],
        b: vec![0.0; b.len()],
        c: vec![0.0; c.len()],
        x: vec![0.0; x.len()],
    };
    let _scratch = ScratchGuard::new(hpn + chunk * chunk * 4 + chunk * (4 * p + 4 * n));
    let mut g_state = vec![0.0; hpn];
    let n_chunks = len.div_ceil(chunk);
    for ci in (0..n_chunks).rev() {
        let start = ci * chunk;
        let q = chunk.min(len - start);
        let h_in_all = &checkpoints[ci * hpn..(ci + 1) * hpn];
        for group in 0..groups {
            let s = scores(dims, b, c, start, q, group);
            let c_rows = rows_of(c, start, group, groups, n);
            let b_rows = rows_of(b, start, group, groups, n);
            let mut dc = vec![0.0; q * n];
            let mut db = vec![0.0; q * n];
            for head in dims.heads_of(group) {
                let dec = decay(a, start, q, heads, head);
                let h_in = &h_in_all[head * p * n..(head + 1) * p * n];
                let g_out = &mut g_state[head * p * n..(head + 1) * p * n];
                let x_rows = rows_of(x, start, head, heads, p);
                let dy_rows = rows_of(dy, start, head, heads, p);
                let w: Vec<f64> = s.iter().zip(&dec.l).map(|(s, l)| s * l).collect();

                let mut r = vec![0.0; q * q];
                gemm(
                    q,
                    p,
                    q,
                    1.0,
                    dy_rows,
                    cols_of(x, start, head, heads, p),
                    0.0,
                    &mut r,
                );
                let rl: Vec<f64> = r.iter().zip(&dec.l).map(|(r, l)| r * l).collect();

                // dX = Wᵀ·dY + diag(E)·B·G_outᵀ
                let mut v = vec![0.0; q * p];
                gemm(
                    q,
                    n,
                    p,
                    1.0,
                    b_rows,
                    MatRef::transposed(g_out, n),
                    0.0,
                    &mut v,
                );
                let mut dx = vec![0.0; q * p];
                for j in 0..q {
                    for k in 0..p {
                        dx[j * p + k] = dec.e[j] * v[j * p + k];
                    }
                }
                gemm(
                    q,
                    q,
                    p,
                    1.0,
                    MatRef::transposed(&w, q),
                    dy_rows,
                    1.0,
                    &mut dx,
                );
                scatter_add(&mut grads.x, &dx, start, head, heads, p, q);

                // dC = (R∘L)·B + diag(D)·dY·h_in
                let mut tmp = vec![0.0; q * n];
                gemm(q, p, n, 1.0, dy_rows, MatRef::rows(h_in, n), 0.0, &mut tmp);
                for i in 0..q {
                    for k in 0..n {
                        dc[i * n + k] += dec.d[i] * tmp[i * n + k];
                    }
                }
                gemm(q, q, n, 1.0, MatRef::rows(&rl, q), b_rows, 1.0, &mut dc);

                // dB = (R∘L)ᵀ·C + diag(E)·X·G_out
                gemm(q, p, n, 1.0, x_rows, MatRef::rows(g_out, n), 0.0, &mut tmp);
                for j in 0..q {
                    for k in 0..n {
                        db[j * n + k] += dec.e[j] * tmp[j * n + k];
                    }
                }
                gemm(
                    q,
                    q,
                    n,
                    1.0,
                    MatRef::transposed(&rl, q),
                    c_rows,
                    1.0,
                    &mut db,
                );

                // ∂/∂ln a_k
                let mut z = vec![0.0; q * p];
                gemm(
                    q,
                    n,
                    p,
                    1.0,
                    c_rows,
                    MatRef::transposed(h_in, n),
                    0.0,
                    &mut z,
                );
                let row = |data: &[f64], i: usize| -> Vec<f64> {
                    let base = ((start + i) * heads + head) * p;
                    data[base..base + p].to_vec()
                };
                let u: Vec<f64> = (0..q)
                    .map(|i| {
                        dec.d[i]
                            * row(dy, i)
                                .iter()
                                .zip(&z[i * p..(i + 1) * p])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                    })
                    .collect();
                let wj: Vec<f64> = (0..q)
                    .map(|j| {
                        dec.e[j]
                            * row(x, j)
                                .iter()
                                .zip(&v[j * p..(j + 1) * p])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                    })
                    .collect();
                let d_end = dec.d[q - 1];
                let vv = d_end * g_out.iter().zip(h_in).map(|(g, h)| g * h).sum::<f64>();
                let m = |i: usize, j: usize| rl[i * q + j] * s[i * q + j];
                let mut intra = 0.0;
                let mut suffix_u: f64 = u.iter().sum();
                let mut prefix_w = 0.0;
                for k in 0..q {
                    grads.log_a[(start + k) * heads + head] = intra + suffix_u + vv + prefix_w;
                    intra -= (0..k).map(|j| m(k, j)).sum::<f64>();
                    intra += (k + 1..q).map(|i| m(i, k)).sum::<f64>();
                    suffix_u -= u[k];
                    prefix_w += wj[k];
                }
                counters::add_madds((3 * q * q + 4 * q * p + 2 * q * n + p * n) as u64);

                // G_in = dYᵀ·diag(D)·C + D_end·G_out
                for i in 0..q {
                    let base = ((start + i) * groups + group) * n;
                    for k in 0..n {
                        tmp[i * n + k] = dec.d[i] * c[base + k];
                    }
                }
                gemm(
                    p,
                    q,
                    n,
                    1.0,
                    cols_of(dy, start, head, heads, p),
                    MatRef::rows(&tmp, n),
                    d_end,
                    g_out,
                );
            }
            scatter_add(&mut grads.c, &dc, start, group, groups, n, q);
            scatter_add(&mut grads.b, &db, start, group, groups, n, q);
        }
    }
    grads
}
