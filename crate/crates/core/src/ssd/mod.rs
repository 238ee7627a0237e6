//! State-space layers: ZOH discretization, the time-invariant recurrence and
//! convolution modes, and three equivalent evaluations of the selective
//! scalar-decay SSD (recurrence, semiseparable matrix, chunked scan).

mod chunked;
mod lti;
mod selective;

pub use lti::{discretize_zoh, lti_convolution, lti_recurrence, LtiSsm};
pub use selective::{
    discretize_selective, selective_params_from_input, SelectiveParams, SelectiveProjection,
};

use crate::numerics::counters;
use crate::numerics::NumericsError;
use thiserror::Error;

pub const DEFAULT_CHUNK: usize = 64;
pub const DEFAULT_MATRIX_CAP: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsdError {
    #[error("timescale must be positive, got {0}")]
    NonPositiveTimescale(f64),
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("state shape {got:?} does not match layer shape {expected:?}")]
    StateShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("sequence length {len} exceeds the matrix-path cap {cap}")]
    CapExceeded { len: usize, cap: usize },
    #[error("chunk length must be at least 1")]
    InvalidChunk,
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = SsdError> = std::result::Result<T, E>;

/// Sizes of a multi-head SSD call: `len` steps, `heads` heads of width
/// `head_dim`, state size `state`, and `groups` B/C groups shared by
/// consecutive heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsdDims {
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state: usize,
    pub groups: usize,
}

impl SsdDims {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 {
            return Err(SsdError::EmptyInput);
        }
        if self.heads == 0 || self.head_dim == 0 || self.state == 0 || self.groups == 0 {
            return Err(SsdError::Shape(format!("zero-sized dimension in {self:?}")));
        }
        if self.heads % self.groups != 0 {
            return Err(SsdError::Shape(format!(
                "{} groups do not divide {} heads",
                self.groups, self.heads
            )));
        }
        Ok(())
    }

    pub fn group_of(&self, head: usize) -> usize {
        head / (self.heads / self.groups)
    }

    pub fn heads_of(&self, group: usize) -> std::ops::Range<usize> {
        let per = self.heads / self.groups;
        group * per..(group + 1) * per
    }

    pub fn state_len(&self) -> usize {
        self.heads * self.head_dim * self.state
    }

    fn check(&self, a: usize, b: usize, c: usize, x: usize) -> Result<()> {
        self.validate()?;
        let want = [
            ("a", self.len * self.heads, a),
            ("B", self.len * self.groups * self.state, b),
            ("C", self.len * self.groups * self.state, c),
            ("x", self.len * self.heads * self.head_dim, x),
        ];
        for (name, expected, got) in want {
            if expected != got {
                return Err(SsdError::Shape(format!(
                    "{name} has {got} values, expected {expected} for {self:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-step selective parameters: `a` is `[L, H]` in `(0, 1]`, `b` and `c`
/// are `[L, G, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsdParams {
    pub dims: SsdDims,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Recurrent state `h` of shape `[H, P, N]` and the number of steps consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct SsdState {
    pub h: Vec<f64>,
    pub heads: usize,
    pub head_dim: usize,
    pub state: usize,
    pub position: usize,
}

impl SsdState {
    pub fn zeros(heads: usize, head_dim: usize, state: usize) -> Self {
        SsdState {
            h: vec![0.0; heads * head_dim * state],
            heads,
            head_dim,
            state,
            position: 0,
        }
    }

    pub fn for_dims(dims: &SsdDims) -> Self {
        SsdState::zeros(dims.heads, dims.head_dim, dims.state)
    }

    fn check(&self, dims: &SsdDims) -> Result<()> {
        let expected = (dims.heads, dims.head_dim, dims.state);
        let got = (self.heads, self.head_dim, self.state);
        if expected != got || self.h.len() != dims.state_len() {
            return Err(SsdError::StateShapeMismatch { expected, got });
        }
        Ok(())
    }
}

fn initial_state(params: &SsdParams, state: Option<&SsdState>) -> Result<SsdState> {
    match state {
        Some(s) => {
            s.check(&params.dims)?;
            Ok(s.clone())
        }
        None => Ok(SsdState::for_dims(&params.dims)),
    }
}

/// `h_t = a_t·h_{t−1} + x_t B_tᵀ`, `y_t = h_t C_t`, per head. `x` and the
/// returned `y` are `[L, H, P]`.
pub fn ssd_recurrence(
    params: &SsdParams,
    x: &[f64],
    state: Option<&SsdState>,
) -> Result<(Vec<f64>, SsdState)> {
    let d = params.dims;
    d.check(params.a.len(), params.b.len(), params.c.len(), x.len())?;
    let mut st = initial_state(params, state)?;
    let (h_, p, n, g) = (d.heads, d.head_dim, d.state, d.groups);
    let mut y = vec![0.0; x.len()];
    for t in 0..d.len {
        for head in 0..h_ {
            let at = params.a[t * h_ + head];
            let gb = (t * g + d.group_of(head)) * n;
            let (bt, ct) = (&params.b[gb..gb + n], &params.c[gb..gb + n]);
            let hh = &mut st.h[head * p * n..(head + 1) * p * n];
            for k in 0..p {
                let xk = x[(t * h_ + head) * p + k];
                let row = &mut hh[k * n..(k + 1) * n];
                let mut acc = 0.0;
                for i in 0..n {
                    row[i] = at * row[i] + xk * bt[i];
                    acc += row[i] * ct[i];
                }
                y[(t * h_ + head) * p + k] = acc;
            }
        }
    }
    counters::add_madds((d.len * h_ * p * n * 2) as u64);
    st.position += d.len;
    Ok((y, st))
}

/// The `L × L` lower-triangular matrix `M_ij = C_iᵀ (a_{j+1}⋯a_i) B_j` of one head.
pub fn semiseparable_matrix(params: &SsdParams, head: usize) -> Result<Vec<f64>> {
    let d = params.dims;
    d.validate()?;
    let (l, h_, n, g) = (d.len, d.heads, d.state, d.groups);
    let grp = d.group_of(head);
    let mut m = vec![0.0; l * l];
    for i in 0..l {
        let ci = &params.c[(i * g + grp) * n..(i * g + grp + 1) * n];
        let mut decay = 1.0;
        for j in (0..=i).rev() {
            if j < i {
                decay *= params.a[(j + 1) * h_ + head];
            }
            let bj = &params.b[(j * g + grp) * n..(j * g + grp + 1) * n];
            m[i * l + j] = decay * ci.iter().zip(bj).map(|(c, b)| c * b).sum::<f64>();
        }
    }
    counters::add_madds((l * (l + 1) / 2 * (n + 1)) as u64);
    Ok(m)
}

/// `y = M x` with the materialized semiseparable matrix, zero initial state.
pub fn ssd_matrix(params: &SsdParams, x: &[f64], cap: usize) -> Result<Vec<f64>> {
    let d = params.dims;
    d.check(params.a.len(), params.b.len(), params.c.len(), x.len())?;
    if d.len > cap {
        return Err(SsdError::CapExceeded { len: d.len, cap });
    }
    let (l, h_, p) = (d.len, d.heads, d.head_dim);
    let mut y = vec![0.0; x.len()];
    for head in 0..h_ {
        let m = semiseparable_matrix(params, head)?;
        let _guard = counters::ScratchGuard::new(m.len());
        let xs = crate::numerics::MatRef {
            data: &x[head * p..],
            row_stride: h_ * p,
            col_stride: 1,
        };
        let mut out = vec![0.0; l * p];
        crate::numerics::gemm(
            l,
            l,
            p,
            1.0,
            crate::numerics::MatRef::rows(&m, l),
            xs,
            0.0,
            &mut out,
        );
        for t in 0..l {
            y[(t * h_ + head) * p..(t * h_ + head + 1) * p]
                .copy_from_slice(&out[t * p..(t + 1) * p]);
        }
    }
    Ok(y)
}

/// Chunked scan: dense products inside chunks of `chunk` steps, state
/// carried between them.
pub fn ssd_chunked(
    params: &SsdParams,
    x: &[f64],
    chunk: usize,
    state: Option<&SsdState>,
) -> Result<(Vec<f64>, SsdState)> {
    let d = params.dims;
    d.check(params.a.len(), params.b.len(), params.c.len(), x.len())?;
    if chunk == 0 {
        return Err(SsdError::InvalidChunk);
    }
    let mut st = initial_state(params, state)?;
    let y = chunked::forward(
        &d, &params.a, &params.b, &params.c, x, &mut st.h, chunk, None,
    );
    st.position += d.len;
    Ok((y, st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rng: &mut Rng, dims: SsdDims) -> (SsdParams, Vec<f64>) {
        let a = (0..dims.len * dims.heads)
            .map(|_| rng.uniform_range(0.5, 1.0))
            .collect();
        let gn = dims.len * dims.groups * dims.state;
        let params = SsdParams {
            dims,
            a,
            b: rng.normal_vec(gn, 1.0),
            c: rng.normal_vec(gn, 1.0),
        };
        let x = rng.normal_vec(dims.len * dims.heads * dims.head_dim, 1.0);
        (params, x)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn hand_example() {
        let dims = SsdDims {
            len: 2,
            heads: 1,
            head_dim: 1,
            state: 1,
            groups: 1,
        };
        let params = SsdParams {
            dims,
            a: vec![1.0, 0.5],
            b: vec![1.0, 1.0],
            c: vec![1.0, 1.0],
        };
        let (y, st) = ssd_recurrence(&params, &[1.0, 2.0], None).unwrap();
        assert_eq!(y, vec![1.0, 2.5]);
        assert_eq!(st.h, vec![2.5]);
        assert_eq!(
            semiseparable_matrix(&params, 0).unwrap(),
            vec![1.0, 0.0, 0.5, 1.0]
        );
        assert_eq!(
            ssd_matrix(&params, &[1.0, 2.0], 1024).unwrap(),
            vec![1.0, 2.5]
        );
        assert_eq!(
            ssd_chunked(&params, &[1.0, 2.0], 1, None).unwrap().0,
            vec![1.0, 2.5]
        );
        assert_eq!(
            ssd_matrix(&params, &[1.0, 2.0], 1),
            Err(SsdError::CapExceeded { len: 2, cap: 1 })
        );
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let mut rng = Rng::new(3);
        let dims = SsdDims {
            len: 6,
            heads: 2,
            head_dim: 3,
            state: 2,
            groups: 1,
        };
        let (mut params, x) = random(&mut rng, dims);
        params.a.iter_mut().for_each(|a| *a = 0.0);
        let (y, _) = ssd_recurrence(&params, &x, None).unwrap();
        for t in 0..6 {
            let cb: f64 = (0..2)
                .map(|i| params.b[t * 2 + i] * params.c[t * 2 + i])
                .sum();
            for k in 0..6 {
                assert!((y[t * 6 + k] - cb * x[t * 6 + k]).abs() < 1e-14);
            }
        }
        let (yc, _) = ssd_chunked(&params, &x, 4, None).unwrap();
        assert!(close(&y, &yc, 1e-12));
    }

    #[test]
    fn paths_agree() {
        let mut rng = Rng::new(17);
        let dims = SsdDims {
            len: 64,
            heads: 4,
            head_dim: 3,
            state: 5,
            groups: 2,
        };
        let (params, x) = random(&mut rng, dims);
        let (yr, sr) = ssd_recurrence(&params, &x, None).unwrap();
        assert!(close(&yr, &ssd_matrix(&params, &x, 1024).unwrap(), 1e-10));
        for chunk in [1, 4, 8, 16, 64, 100] {
            let (yc, sc) = ssd_chunked(&params, &x, chunk, None).unwrap();
            assert!(close(&yr, &yc, 1e-10), "chunk {chunk}");
            assert!(close(&sr.h, &sc.h, 1e-10));
        }
    }

    #[test]
    fn carried_state_matches_single_call() {
        let mut rng = Rng::new(5);
        let dims = SsdDims {
            len: 6,
            heads: 2,
            head_dim: 2,
            state: 3,
            groups: 2,
        };
        let (params, x) = random(&mut rng, dims);
        let (full, _) = ssd_recurrence(&params, &x, None).unwrap();
        let half = |lo: usize, hi: usize| {
            let d3 = SsdDims {
                len: hi - lo,
                ..dims
            };
            let gn = dims.groups * dims.state;
            let p = SsdParams {
                dims: d3,
                a: params.a[lo * 2..hi * 2].to_vec(),
                b: params.b[lo * gn..hi * gn].to_vec(),
                c: params.c[lo * gn..hi * gn].to_vec(),
            };
            (p, x[lo * 4..hi * 4].to_vec())
        };
        let (p1, x1) = half(0, 3);
        let (p2, x2) = half(3, 6);
        let (y1, s1) = ssd_recurrence(&p1, &x1, None).unwrap();
        let (y2, s2) = ssd_chunked(&p2, &x2, 2, Some(&s1)).unwrap();
        assert_eq!(s2.position, 6);
        let joined: Vec<f64> = y1.into_iter().chain(y2).collect();
        assert!(close(&full, &joined, 1e-12));
        let bad = SsdState::zeros(3, 2, 3);
        assert!(matches!(
            ssd_recurrence(&p2, &x2, Some(&bad)),
            Err(SsdError::StateShapeMismatch { .. })
        ));
    }
}
