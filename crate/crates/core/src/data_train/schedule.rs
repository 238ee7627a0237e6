use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// Fraction of the first stage's steps given to each later stage.
pub const EXTENSION_FRACTION: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}

impl OptimizerConfig {
    pub fn with_lr(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            grad_clip: default_clip(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthStage {
    pub context_len: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub optimizer: OptimizerConfig,
    pub warmup_steps: usize,
    pub tokens_per_batch: usize,
    pub stages: Vec<LengthStage>,
}

/// Steps given to each extension stage after a first stage of `base_steps`.
pub fn extension_steps(base_steps: usize) -> usize {
    ((base_steps as f64) * EXTENSION_FRACTION).ceil() as usize
}

impl TrainPlan {
    /// A first stage at `base_ctx` for `base_steps`, then one stage per
    /// entry of `extensions` with [`extension_steps`] steps each.
    pub fn with_length_warmup(
        optimizer: OptimizerConfig,
        warmup_steps: usize,
        tokens_per_batch: usize,
        base_ctx: usize,
        base_steps: usize,
        extensions: &[usize],
    ) -> Result<TrainPlan> {
        let mut stages = vec![LengthStage {
            context_len: base_ctx,
            steps: base_steps,
        }];
        stages.extend(extensions.iter().map(|&c| LengthStage {
            context_len: c,
            steps: extension_steps(base_steps),
        }));
        let plan = TrainPlan {
            optimizer,
            warmup_steps,
            tokens_per_batch,
            stages,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidPlan(m));
        if self.stages.is_empty() {
            return bad("at least one length stage is required".into());
        }
        for w in self.stages.windows(2) {
            if w[1].context_len <= w[0].context_len {
                return bad(format!(
                    "stage lengths must increase: {} then {}",
                    w[0].context_len, w[1].context_len
                ));
            }
        }
        for s in &self.stages {
            if s.context_len == 0 || s.steps == 0 {
                return bad("stage context length and steps must be positive".into());
            }
        }
        if self.tokens_per_batch == 0 {
            return bad("tokens per batch must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
        {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if self.warmup_steps > self.total_steps() {
            return bad(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps,
                self.total_steps()
            ));
        }
        Ok(())
    }

    /// Sequences per batch at `context_len`, at least one.
    pub fn batch_size(&self, context_len: usize) -> usize {
        (self.tokens_per_batch / context_len).max(1)
    }

    /// Stage index and context length in effect at 0-based `step`.
    pub fn stage_at(&self, step: usize) -> Option<(usize, usize)> {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.steps;
            if step < end {
                return Some((i, s.context_len));
            }
        }
        None
    }

    /// Linear warm-up to the peak rate, then cosine decay to a tenth of it
    /// at the final step.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(TrainError::StepOutOfRange { step, total });
        }
        let peak = self.optimizer.lr;
        let w = self.warmup_steps;
        if step < w {
            return Ok(peak * step as f64 / w as f64);
        }
        if total == w {
            return Ok(peak);
        }
        let progress = (step - w) as f64 / (total - w) as f64;
        let floor = 0.1 * peak;
        Ok(floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> TrainPlan {
        TrainPlan::with_length_warmup(
            OptimizerConfig::with_lr(1e-3),
            100,
            16384,
            8192,
            1000,
            &[32768, 131072],
        )
        .unwrap()
    }

    #[test]
    fn extension_stages_get_two_percent() {
        let p = plan();
        assert_eq!(p.stages[1].steps, 20);
        assert_eq!(p.stages[2].steps, 20);
        assert_eq!(p.total_steps(), 1040);
        assert_eq!(extension_steps(1001), 21);
        assert_eq!(p.stage_at(999), Some((0, 8192)));
        assert_eq!(p.stage_at(1000), Some((1, 32768)));
        assert_eq!(p.stage_at(1040), None);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let p = plan();
        assert_eq!(p.lr_at(0).unwrap(), 0.0);
        assert_eq!(p.lr_at(100).unwrap(), 1e-3);
        assert!((p.lr_at(1040).unwrap() - 1e-4).abs() < 1e-18);
        assert!(p.lr_at(50).unwrap() > 0.0);
        assert_eq!(
            p.lr_at(1041),
            Err(TrainError::StepOutOfRange {
                step: 1041,
                total: 1040
            })
        );
        let mid = p.lr_at((100 + 1040) / 2).unwrap();
        assert!((mid - 0.55e-3).abs() < 1e-6);
    }

    #[test]
    fn rejects_decreasing_stages() {
        let mut p = plan();
        p.stages.swap(0, 1);
        assert!(matches!(p.validate(), Err(TrainError::InvalidPlan(_))));
    }
}
