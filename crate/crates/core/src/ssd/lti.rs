use super::{Result, SsdError};

/// Time-invariant SSM with diagonal continuous-time `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiSsm {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

/// `(e^z − 1)/z`, by its two-term series near the removable singularity.
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        1.0 + z / 2.0
    } else {
        z.exp_m1() / z
    }
}

/// Zero-order-hold discretization of a diagonal system.
pub fn discretize_zoh(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(SsdError::NonPositiveTimescale(delta));
    }
    if a.len() != b.len() {
        return Err(SsdError::Shape(format!(
            "A has {} entries, B has {}",
            a.len(),
            b.len()
        )));
    }
    let a_bar = a.iter().map(|ai| (delta * ai).exp()).collect();
    let b_bar = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| phi1(delta * ai) * delta * bi)
        .collect();
    Ok((a_bar, b_bar))
}

impl LtiSsm {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, delta: f64) -> Result<Self> {
        if a.len() != b.len() || a.len() != c.len() || a.is_empty() {
            return Err(SsdError::Shape(format!(
                "A, B, C lengths {}, {}, {}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        Ok(LtiSsm { a, b, c, delta })
    }

    pub fn discretize(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        discretize_zoh(&self.a, &self.b, self.delta)
    }

    /// `K̄ = (C B̄, C Ā B̄, …, C Ā^{L−1} B̄)`.
    pub fn kernel(&self, len: usize) -> Result<Vec<f64>> {
        let (a_bar, b_bar) = self.discretize()?;
        let mut pow = b_bar;
        let mut k = Vec::with_capacity(len);
        for _ in 0..len {
            k.push(self.c.iter().zip(&pow).map(|(c, p)| c * p).sum());
            pow.iter_mut().zip(&a_bar).for_each(|(p, a)| *p *= a);
        }
        Ok(k)
    }
}

pub fn lti_recurrence(ssm: &LtiSsm, x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(SsdError::EmptyInput);
    }
    let (a_bar, b_bar) = ssm.discretize()?;
    let mut h = vec![0.0; a_bar.len()];
    Ok(x.iter()
        .map(|&xt| {
            for i in 0..h.len() {
                h[i] = a_bar[i] * h[i] + b_bar[i] * xt;
            }
            ssm.c.iter().zip(&h).map(|(c, h)| c * h).sum()
        })
        .collect())
}

pub fn lti_convolution(ssm: &LtiSsm, x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(SsdError::EmptyInput);
    }
    let k = ssm.kernel(x.len())?;
    Ok((0..x.len())
        .map(|t| (0..=t).map(|s| k[t - s] * x[s]).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zoh_examples() {
        let (a, b) = discretize_zoh(&[1.0], &[1.0], 2f64.ln()).unwrap();
        assert_relative_eq!(a[0], 2.0, epsilon = 1e-15);
        assert_relative_eq!(b[0], 1.0, epsilon = 1e-15);
        let (a, b) = discretize_zoh(&[0.0], &[3.0], 0.5).unwrap();
        assert_eq!((a[0], b[0]), (1.0, 1.5));
        assert_eq!(
            discretize_zoh(&[1.0], &[1.0], 0.0),
            Err(SsdError::NonPositiveTimescale(0.0))
        );
    }

    #[test]
    fn series_branch_is_accurate() {
        for z in [0.99e-4, -0.99e-4, 1e-7] {
            assert!((phi1(z) - z.exp_m1() / z).abs() < 2e-9);
        }
    }

    #[test]
    fn integrator_is_cumulative_sum() {
        let ssm = LtiSsm::new(vec![0.0], vec![2.0], vec![1.5], 0.5).unwrap();
        let y = lti_recurrence(&ssm, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.5, 4.5, 9.0]);
        assert_eq!(ssm.kernel(4).unwrap(), vec![1.5; 4]);
        assert_eq!(lti_convolution(&ssm, &[]), Err(SsdError::EmptyInput));
    }

    #[test]
    fn impulse_response_is_kernel() {
        let ssm = LtiSsm::new(vec![-0.3, -1.2], vec![0.7, -0.4], vec![1.1, 0.9], 0.2).unwrap();
        let mut x = vec![0.0; 8];
        x[0] = 1.0;
        let y = lti_recurrence(&ssm, &x).unwrap();
        for (a, b) in y.iter().zip(ssm.kernel(8).unwrap()) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }
}
