use crate::numerics::{Result as TensorResult, Tensor};

use super::{chunked, Result, SsdDims, SsdError, SsdState};

/// Weights mapping an input `[L, d]` to selective parameters.
#[derive(Clone, Debug)]
pub struct SelectiveProjection {
    /// `[d, H]`
    pub w_dt: Tensor,
    /// `[H]`
    pub dt_bias: Tensor,
    /// `[H]`, continuous decay rate is `−exp(a_log)`.
    pub a_log: Tensor,
    /// `[d, G·N]`
    pub w_b: Tensor,
    /// `[d, G·N]`
    pub w_c: Tensor,
    pub groups: usize,
}

/// Per-step `Δ` and `ln a` of shape `[L, H]`, `B`/`C` of shape `[L, G, N]`.
#[derive(Clone, Debug)]
pub struct SelectiveParams {
    pub delta: Tensor,
    pub log_a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl SelectiveParams {
    pub fn a(&self) -> TensorResult<Tensor> {
        self.log_a.exp()
    }
}

/// `Δ = softplus(dt + dt_bias)`, `ln a = −Δ·exp(a_log)`.
pub fn discretize_selective(
    dt: &Tensor,
    dt_bias: &Tensor,
    a_log: &Tensor,
) -> TensorResult<(Tensor, Tensor)> {
    let delta = dt.add(dt_bias)?.softplus()?;
    let log_a = delta.mul(&a_log.exp()?)?.neg()?;
    Ok((delta, log_a))
}

pub fn selective_params_from_input(
    x: &Tensor,
    proj: &SelectiveProjection,
) -> Result<SelectiveParams> {
    let gn = proj.w_b.shape().get(1).copied().unwrap_or(0);
    if x.ndim() != 2 || proj.groups == 0 || gn % proj.groups != 0 {
        return Err(SsdError::Shape(format!(
            "input {:?} with B projection {:?}",
            x.shape(),
            proj.w_b.shape()
        )));
    }
    let (l, n) = (x.shape()[0], gn / proj.groups);
    let (delta, log_a) = discretize_selective(&x.matmul(&proj.w_dt)?, &proj.dt_bias, &proj.a_log)?;
    let b = x.matmul(&proj.w_b)?.reshape([l, proj.groups, n])?;
    let c = x.matmul(&proj.w_c)?.reshape([l, proj.groups, n])?;
    Ok(SelectiveParams { delta, log_a, b, c })
}

fn dims_of(log_a: &Tensor, b: &Tensor, c: &Tensor, x: &Tensor) -> Result<SsdDims> {
    let bad = || {
        SsdError::Shape(format!(
            "ln a {:?}, B {:?}, C {:?}, x {:?}",
            log_a.shape(),
            b.shape(),
            c.shape(),
            x.shape()
        ))
    };
    if log_a.ndim() != 2 || b.ndim() != 3 || x.ndim() != 3 || b.shape() != c.shape() {
        return Err(bad());
    }
    let (l, h) = (log_a.shape()[0], log_a.shape()[1]);
    let dims = SsdDims {
        len: l,
        heads: h,
        head_dim: x.shape()[2],
        state: b.shape()[2],
        groups: b.shape()[1],
    };
    if b.shape()[0] != l || x.shape()[0] != l || x.shape()[1] != h {
        return Err(bad());
    }
    dims.validate()?;
    Ok(dims)
}

impl Tensor {
    /// Differentiable chunked SSD scan. Takes `ln a` `[L, H]`, `B`, `C`
    /// `[L, G, N]` and `x` `[L, H, P]`; returns `y` `[L, H, P]` and the
    /// final state. The initial state is treated as a constant.
    pub fn ssd_scan(
        log_a: &Tensor,
        b: &Tensor,
        c: &Tensor,
        x: &Tensor,
        initial: Option<&SsdState>,
        chunk: usize,
    ) -> Result<(Tensor, SsdState)> {
        let dims = dims_of(log_a, b, c, x)?;
        if chunk == 0 {
            return Err(SsdError::InvalidChunk);
        }
        let mut state = match initial {
            Some(s) => {
                let expected = (dims.heads, dims.head_dim, dims.state);
                if (s.heads, s.head_dim, s.state) != expected || s.h.len() != dims.state_len() {
                    return Err(SsdError::StateShapeMismatch {
                        expected,
                        got: (s.heads, s.head_dim, s.state),
                    });
                }
                s.clone()
            }
            None => SsdState::for_dims(&dims),
        };
        let a: Vec<f64> = log_a.data().iter().map(|v| v.exp()).collect();
        let track = [log_a, b, c, x].iter().any(|t| t.requires_grad());
        let mut checkpoints = track.then(Vec::new);
        let y = chunked::forward(
            &dims,
            &a,
            b.data(),
            c.data(),
            x.data(),
            &mut state.h,
            chunk,
            checkpoints.as_mut(),
        );
        state.position += dims.len;
        let (bt, ct, xt) = (b.clone(), c.clone(), x.clone());
        let cp = checkpoints.unwrap_or_default();
        let out = Tensor::from_op(
            "ssd_scan",
            vec![dims.len, dims.heads, dims.head_dim],
            y,
            vec![log_a.clone(), b.clone(), c.clone(), x.clone()],
            Box::new(move |dy| {
                let g =
                    chunked::backward(&dims, &a, bt.data(), ct.data(), xt.data(), dy, &cp, chunk);
                vec![Some(g.log_a), Some(g.b), Some(g.c), Some(g.x)]
            }),
        )?;
        Ok((out, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::ssd::{ssd_recurrence, SsdParams};

    #[test]
    fn fused_scan_matches_recurrence() {
        let mut rng = Rng::new(4);
        let dims = SsdDims {
            len: 37,
            heads: 4,
            head_dim: 3,
            state: 4,
            groups: 2,
        };
        let a: Vec<f64> = (0..dims.len * 4)
            .map(|_| rng.uniform_range(0.3, 1.0))
            .collect();
        let b = rng.normal_vec(37 * 8, 1.0);
        let c = rng.normal_vec(37 * 8, 1.0);
        let x = rng.normal_vec(37 * 12, 1.0);
        let params = SsdParams {
            dims,
            a: a.clone(),
            b: b.clone(),
            c: c.clone(),
        };
        let (yr, sr) = ssd_recurrence(&params, &x, None).unwrap();
        let log_a = Tensor::new([37, 4], a.iter().map(|v| v.ln()).collect()).unwrap();
        let (y, s) = Tensor::ssd_scan(
            &log_a,
            &Tensor::new([37, 2, 4], b).unwrap(),
            &Tensor::new([37, 2, 4], c).unwrap(),
            &Tensor::new([37, 4, 3], x).unwrap(),
            None,
            8,
        )
        .unwrap();
        assert!(y.data().iter().zip(&yr).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(s.h.iter().zip(&sr.h).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn decay_limits() {
        let zero = Tensor::new([1], vec![0.0]).unwrap();
        let (_, log_a) =
            discretize_selective(&Tensor::new([1, 1], vec![-40.0]).unwrap(), &zero, &zero).unwrap();
        assert!((log_a.data()[0].exp() - 1.0).abs() < 1e-15);
        let (delta, log_a) =
            discretize_selective(&Tensor::new([1, 1], vec![2.0]).unwrap(), &zero, &zero).unwrap();
        assert!((log_a.data()[0] + delta.data()[0]).abs() < 1e-15);
        let (_, log_a) =
            discretize_selective(&Tensor::new([1, 1], vec![800.0]).unwrap(), &zero, &zero).unwrap();
        assert_eq!(log_a.data()[0].exp(), 0.0);
    }
}
