use std::collections::HashMap;

use crate::model::{Checkpoint, Model};
use crate::numerics::Tensor;

use super::{OptimizerConfig, Result, TrainError};

/// Gradients of every named parameter after a backward pass; parameters
/// the loss did not reach get zeros.
pub fn collect_grads(model: &Model) -> Vec<(String, Vec<f64>)> {
    model
        .named_parameters()
        .into_iter()
        .map(|(name, p)| {
            let g = p.grad_data().clone().unwrap_or_else(|| vec![0.0; p.len()]);
            (name, g)
        })
        .collect()
}

pub fn global_norm(grads: &[(String, Vec<f64>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(String, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= factor));
    }
    norm
}

/// Weight decay applies to matrices other than the embedding table.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && !name.starts_with("embedding")
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW::default()
    }

    /// One decoupled-weight-decay Adam update; parameters are replaced by
    /// fresh leaves holding the new values.
    pub fn update(
        &mut self,
        model: &mut Model,
        grads: &[(String, Vec<f64>)],
        cfg: &OptimizerConfig,
        lr: f64,
    ) -> Result<()> {
        self.update_params(model.named_parameters_mut(), grads, cfg, lr)
    }

    /// [`AdamW::update`] over an arbitrary set of named parameters.
    pub fn update_params(
        &mut self,
        params: Vec<(String, &mut Tensor)>,
        grads: &[(String, Vec<f64>)],
        cfg: &OptimizerConfig,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let (c1, c2) = (1.0 - cfg.beta1.powf(t), 1.0 - cfg.beta2.powf(t));
        let lookup: HashMap<&str, &Vec<f64>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for (name, p) in params {
            let g = lookup
                .get(name.as_str())
                .ok_or_else(|| TrainError::Optimizer(format!("no gradient for {name}")))?;
            if g.len() != p.len() {
                return Err(TrainError::Optimizer(format!(
                    "gradient for {name} has {} values",
                    g.len()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let decay = if decays(&name, p.shape()) {
                cfg.weight_decay
            } else {
                0.0
            };
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                data[i] -= lr * (update + decay * data[i]);
            }
            *p = Tensor::param(p.shape().to_vec(), data).map_err(|_| {
                TrainError::DivergenceDetected {
                    step: self.step as usize,
                    loss: f64::NAN,
                }
            })?;
        }
        Ok(())
    }

    /// Moments as checkpoint tensors named `adam.m.<param>` / `adam.v.<param>`.
    pub fn export(&self, model: &Model, checkpoint: &mut Checkpoint) -> Result<()> {
        for (name, p) in model.named_parameters() {
            for (prefix, table) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
                if let Some(data) = table.get(&name) {
                    let t = Tensor::new(p.shape().to_vec(), data.clone())
                        .map_err(|e| TrainError::Optimizer(e.to_string()))?;
                    checkpoint.tensors.push((format!("{prefix}{name}"), t));
                }
            }
        }
        checkpoint.extra["adam_step"] = serde_json::json!(self.step);
        Ok(())
    }

    pub fn import(checkpoint: &Checkpoint) -> AdamW {
        let take = |prefix: &str| {
            checkpoint
                .with_prefix(prefix)
                .into_iter()
                .map(|(n, t)| (n, t.to_vec()))
                .collect()
        };
        AdamW {
            step: checkpoint
                .extra
                .get("adam_step")
                .and_then(|v| v.as_u64())
                .unwrap_or(0),
            m: take("adam.m."),
            v: take("adam.v."),
        }
    }
}
