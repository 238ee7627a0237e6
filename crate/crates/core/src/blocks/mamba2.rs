use serde::{Deserialize, Serialize};

use crate::numerics::{Rng, Tensor};
use crate::ssd::{discretize_selective, SsdState, DEFAULT_CHUNK};

use super::{const_param, normal_param, BlockError, InitScale, Result, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub state: usize,
    pub expansion: usize,
    pub conv_width: usize,
    pub groups: usize,
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn default_chunk() -> usize {
    DEFAULT_CHUNK
}

impl SsdConfig {
    pub fn inner(&self, d_model: usize) -> usize {
        self.expansion * d_model
    }

    /// Channels passing through the causal convolution: `x`, `B` and `C`.
    pub fn conv_channels(&self, d_model: usize) -> usize {
        self.inner(d_model) + 2 * self.groups * self.state
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let e = self.inner(d_model);
        if self.n_heads * self.head_dim != e {
            return Err(BlockError::InvalidConfig(format!(
                "{} heads × {} head dim != expansion {} × d_model {d_model}",
                self.n_heads, self.head_dim, self.expansion
            )));
        }
        if self.groups == 0 || self.n_heads % self.groups != 0 {
            return Err(BlockError::InvalidConfig(format!(
                "{} groups do not divide {} heads",
                self.groups, self.n_heads
            )));
        }
        if self.state == 0 || self.conv_width == 0 || self.chunk == 0 {
            return Err(BlockError::InvalidConfig(
                "state, conv width and chunk must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Recurrent decode state of one Mamba2 block.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaState {
    pub ssd: SsdState,
    /// Last `conv_width − 1` convolution inputs, oldest first.
    pub conv_tail: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Mamba2Block {
    pub d_model: usize,
    pub cfg: SsdConfig,
    pub norm: Tensor,
    pub in_proj: Tensor,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub dt_bias: Tensor,
    pub a_log: Tensor,
    pub out_norm: Tensor,
    pub out_proj: Tensor,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Mamba2Block {
    pub fn new(d_model: usize, cfg: &SsdConfig, init: InitScale, rng: &mut Rng) -> Result<Self> {
        cfg.validate(d_model)?;
        let e = cfg.inner(d_model);
        let ch = cfg.conv_channels(d_model);
        let h = cfg.n_heads;
        let bound = 1.0 / (cfg.conv_width as f64).sqrt();
        let conv: Vec<f64> = (0..ch * cfg.conv_width)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let dt_bias: Vec<f64> = (0..h)
            .map(|_| {
                let dt = (rng.uniform_range(0.001f64.ln(), 0.1f64.ln())).exp();
                inverse_softplus(dt)
            })
            .collect();
        let a_log: Vec<f64> = (0..h).map(|_| rng.uniform_range(1.0, 16.0).ln()).collect();
        Ok(Mamba2Block {
            d_model,
            cfg: cfg.clone(),
            norm: const_param(&[d_model], 1.0),
            in_proj: normal_param(
                rng,
                &[d_model, 2 * e + 2 * cfg.groups * cfg.state + h],
                init.std,
            ),
            conv_weight: Tensor::param([ch, cfg.conv_width], conv)?,
            conv_bias: const_param(&[ch], 0.0),
            dt_bias: Tensor::param([h], dt_bias)?,
            a_log: Tensor::param([h], a_log)?,
            out_norm: const_param(&[e], 1.0),
            out_proj: normal_param(rng, &[e, d_model], init.out_std),
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("norm.weight", &self.norm),
            ("in_proj.weight", &self.in_proj),
            ("conv.weight", &self.conv_weight),
            ("conv.bias", &self.conv_bias),
            ("dt_bias", &self.dt_bias),
            ("a_log", &self.a_log),
            ("out_norm.weight", &self.out_norm),
            ("out_proj.weight", &self.out_proj),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("norm.weight", &mut self.norm),
            ("in_proj.weight", &mut self.in_proj),
            ("conv.weight", &mut self.conv_weight),
            ("conv.bias", &mut self.conv_bias),
            ("dt_bias", &mut self.dt_bias),
            ("a_log", &mut self.a_log),
            ("out_norm.weight", &mut self.out_norm),
            ("out_proj.weight", &mut self.out_proj),
        ]
    }

    pub fn empty_state(&self) -> MambaState {
        let ch = self.cfg.conv_channels(self.d_model);
        MambaState {
            ssd: SsdState::zeros(self.cfg.n_heads, self.cfg.head_dim, self.cfg.state),
            conv_tail: vec![0.0; (self.cfg.conv_width - 1) * ch],
        }
    }

    /// `x: [L, d]`. With `state`, continues from it and leaves the state at
    /// the end of `x`; without, starts from zero.
    pub fn forward(&self, x: &Tensor, state: Option<&mut MambaState>) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (l, e) = (x.shape()[0], cfg.inner(self.d_model));
        let gn = cfg.groups * cfg.state;
        if let Some(s) = state.as_deref() {
            let expected = (cfg.conv_width - 1) * cfg.conv_channels(self.d_model);
            if s.conv_tail.len() != expected {
                return Err(BlockError::StateShapeMismatch(format!(
                    "conv tail has {} values, expected {expected}",
                    s.conv_tail.len()
                )));
            }
        }
        let u = x.rms_norm(&self.norm, NORM_EPS)?;
        let proj = u.matmul(&self.in_proj)?;
        let z = proj.slice(1, 0, e)?;
        let xbc = proj.slice(1, e, 2 * e + 2 * gn)?;
        let dt = proj.slice(1, 2 * e + 2 * gn, 2 * e + 2 * gn + cfg.n_heads)?;
        let history = state.as_deref().map(|s| s.conv_tail.as_slice());
        let (conv, tail) = xbc.causal_conv1d(&self.conv_weight, &self.conv_bias, history)?;
        let conv = conv.silu()?;
        let xs = conv
            .slice(1, 0, e)?
            .reshape([l, cfg.n_heads, cfg.head_dim])?;
        let b = conv
            .slice(1, e, e + gn)?
            .reshape([l, cfg.groups, cfg.state])?;
        let c = conv
            .slice(1, e + gn, e + 2 * gn)?
            .reshape([l, cfg.groups, cfg.state])?;
        let (delta, log_a) = discretize_selective(&dt, &self.dt_bias, &self.a_log)?;
        let xs = xs.mul(&delta.reshape([l, cfg.n_heads, 1])?)?;
        let initial = state.as_deref().map(|s| &s.ssd);
        let (y, final_state) = Tensor::ssd_scan(&log_a, &b, &c, &xs, initial, cfg.chunk)?;
        if let Some(s) = state {
            s.ssd = final_state;
            s.conv_tail = tail;
        }
        let y = y
            .reshape([l, e])?
            .rms_norm(&self.out_norm, NORM_EPS)?
            .mul(&z.silu()?)?;
        Ok(x.add(&y.matmul(&self.out_proj)?)?)
    }
}
