//! Throughput, multiply-add and peak-memory sweep of the hybrid stack
//! against a parameter-matched pure-attention stack.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Interleave, Model, ModelConfig, ModelError};
use crate::numerics::{counters, NumericsError, Rng};
use crate::tokenizer::NUCLEOTIDES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("parameter counts differ by {ratio:.3}x ({hybrid} vs {attention})")]
    ConfigMismatch {
        hybrid: usize,
        attention: usize,
        ratio: f64,
    },
    #[error("invalid bench plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

/// Allowed relative parameter-count gap between the two stacks.
pub const PARAM_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPlan {
    pub context_lengths: Vec<usize>,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    /// Also time a backward pass through a scalar of the logits.
    #[serde(default)]
    pub backward: bool,
    /// Runs whose peak accounted bytes exceed this are reported out of memory.
    #[serde(default)]
    pub memory_budget: Option<u64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    0
}

impl BenchPlan {
    /// Doubling sweep from `start` to `end` inclusive.
    pub fn doubling(
        start: usize,
        end: usize,
        warmup_iters: usize,
        measured_iters: usize,
    ) -> BenchPlan {
        let context_lengths = std::iter::successors(Some(start), |&l| Some(l * 2))
            .take_while(|&l| l <= end)
            .collect();
        BenchPlan {
            context_lengths,
            warmup_iters,
            measured_iters,
            backward: false,
            memory_budget: None,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.context_lengths.is_empty() || self.context_lengths.contains(&0) {
            return Err(BenchError::InvalidPlan(
                "context lengths must be positive".into(),
            ));
        }
        if self.measured_iters == 0 {
            return Err(BenchError::InvalidPlan(
                "need at least one measured iteration".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    OutOfMemory,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::OutOfMemory => "out_of_memory",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub ctx_len: usize,
    pub tokens_per_sec: f64,
    pub median_secs: f64,
    /// Multiply-adds of one pass.
    pub madds: u64,
    pub peak_bytes: u64,
    pub status: Status,
}

pub const CSV_HEADER: &str = "model,ctx_len,tokens_per_sec,madds,peak_bytes,status";

/// Exact parameter count of `config` from its closed form.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(config.parameter_count()?)
}

/// Pure-attention stack with the same width, depth and vocabulary whose
/// MLP width is chosen to match the parameter count of `hybrid`.
pub fn attention_twin(hybrid: &ModelConfig) -> Result<ModelConfig> {
    let target = param_count(hybrid)?;
    let mut twin = hybrid.clone();
    twin.interleave = Interleave::AttentionOnly;
    twin.intermediate_size = 1;
    let base = param_count(&twin)?;
    // Each unit of MLP width adds three d-vectors per layer.
    let per_unit = 3 * hybrid.d_model * hybrid.n_layers;
    let extra = (target as f64 - base as f64) / per_unit as f64;
    twin.intermediate_size = (1.0 + extra).round().max(1.0) as usize;
    check_pair(hybrid, &twin)?;
    Ok(twin)
}

/// Both stacks share width, depth and vocabulary and differ in parameter
/// count by at most [`PARAM_TOLERANCE`].
pub fn check_pair(hybrid: &ModelConfig, attention: &ModelConfig) -> Result<()> {
    if hybrid.d_model != attention.d_model
        || hybrid.n_layers != attention.n_layers
        || hybrid.vocab_size != attention.vocab_size
    {
        return Err(BenchError::InvalidPlan(
            "stacks must share d_model, n_layers and vocab_size".into(),
        ));
    }
    let (h, a) = (param_count(hybrid)?, param_count(attention)?);
    let ratio = a as f64 / h as f64;
    if (ratio - 1.0).abs() > PARAM_TOLERANCE {
        return Err(BenchError::ConfigMismatch {
            hybrid: h,
            attention: a,
            ratio,
        });
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One pass over `ids`; returns (multiply-adds, peak accounted bytes).
fn pass(model: &Model, ids: &[u32], backward: bool) -> Result<(u64, u64)> {
    counters::reset_madds();
    counters::reset_peak();
    let logits = model.forward(ids)?;
    if backward {
        logits.mean()?.backward()?;
    }
    Ok((counters::madds(), counters::peak_bytes()))
}

/// Times `model` at every context length of `plan`.
pub fn bench_model(name: &str, model: &Model, plan: &BenchPlan) -> Result<Vec<BenchRow>> {
    plan.validate()?;
    let model = if plan.backward {
        model.detached()
    } else {
        model.frozen()
    };
    let mut rng = Rng::new(plan.seed);
    let mut rows = Vec::with_capacity(plan.context_lengths.len());
    for &len in &plan.context_lengths {
        let ids: Vec<u32> = (0..len).map(|_| NUCLEOTIDES[rng.below(4)]).collect();
        let (madds, peak) = pass(&model, &ids, plan.backward)?;
        if plan.memory_budget.is_some_and(|b| peak > b) {
            rows.push(BenchRow {
                model: name.to_string(),
                ctx_len: len,
                tokens_per_sec: 0.0,
                median_secs: 0.0,
                madds,
                peak_bytes: peak,
                status: Status::OutOfMemory,
            });
            continue;
        }
        // The counting pass above doubles as the first warm-up.
        for _ in 1..plan.warmup_iters {
            pass(&model, &ids, plan.backward)?;
        }
        let mut times = Vec::with_capacity(plan.measured_iters);
        for _ in 0..plan.measured_iters {
            let t = Instant::now();
            pass(&model, &ids, plan.backward)?;
            times.push(t.elapsed().as_secs_f64());
        }
        let secs = median(times);
        rows.push(BenchRow {
            model: name.to_string(),
            ctx_len: len,
            tokens_per_sec: len as f64 / secs.max(1e-12),
            median_secs: secs,
            madds,
            peak_bytes: peak,
            status: Status::Ok,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub hybrid_params: usize,
    pub attention_params: usize,
    pub rows: Vec<BenchRow>,
}

/// Benchmarks `hybrid` and its [`attention_twin`] over the plan.
pub fn run_bench(hybrid: &ModelConfig, plan: &BenchPlan) -> Result<BenchReport> {
    plan.validate()?;
    let mut hybrid = hybrid.clone();
    let longest = plan.context_lengths.iter().copied().max().unwrap_or(0);
    // No positional parameters, so the context limit is only a guard.
    hybrid.max_context = hybrid.max_context.max(longest);
    let hybrid = &hybrid;
    let twin = attention_twin(hybrid)?;
    let mut rng = Rng::new(plan.seed);
    let h = Model::build(hybrid, &mut rng)?;
    let a = Model::build(&twin, &mut rng)?;
    let mut rows = bench_model("hybrid", &h, plan)?;
    rows.extend(bench_model("attention", &a, plan)?);
    Ok(BenchReport {
        hybrid_params: h.parameter_count(),
        attention_params: a.parameter_count(),
        rows,
    })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.model,
                r.ctx_len,
                r.tokens_per_sec,
                r.madds,
                r.peak_bytes,
                r.status.as_str()
            );
        }
        out
    }

    pub fn rows_for(&self, model: &str) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.model == model).collect()
    }

    /// `ctx_len tokens_per_sec` lines for one model, successful runs only.
    pub fn series(&self, model: &str) -> String {
        self.rows_for(model)
            .into_iter()
            .filter(|r| r.status == Status::Ok)
            .map(|r| format!("{} {}\n", r.ctx_len, r.tokens_per_sec))
            .collect()
    }

    /// Hybrid over attention throughput at each length where both ran.
    pub fn throughput_ratios(&self) -> Vec<(usize, f64)> {
        let att = self.rows_for("attention");
        self.rows_for("hybrid")
            .into_iter()
            .filter_map(|h| {
                let a = att.iter().find(|a| a.ctx_len == h.ctx_len)?;
                (h.status == Status::Ok && a.status == Status::Ok)
                    .then(|| (h.ctx_len, h.tokens_per_sec / a.tokens_per_sec))
            })
            .collect()
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::desk_config;

    #[test]
    fn twin_matches_parameter_count() {
        let desk = desk_config();
        let twin = attention_twin(&desk).unwrap();
        assert_eq!(twin.intermediate_size, 150);
        let ratio = param_count(&twin).unwrap() as f64 / param_count(&desk).unwrap() as f64;
        assert!((ratio - 1.0).abs() < 0.01);
        let mut fat = twin.clone();
        fat.intermediate_size = 400;
        assert!(matches!(
            check_pair(&desk, &fat),
            Err(BenchError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn closed_form_count_matches_built_model() {
        let desk = desk_config();
        let built = Model::build(&desk, &mut Rng::new(0)).unwrap();
        assert_eq!(param_count(&desk).unwrap(), built.parameter_count());
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&x| (x, 3.0 * x * x))
            .collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_plan() {
        assert_eq!(
            BenchPlan::doubling(2048, 16384, 1, 1).context_lengths,
            vec![2048, 4096, 8192, 16384]
        );
    }

    #[test]
    fn budget_marks_out_of_memory() {
        let mut cfg = desk_config();
        cfg.n_layers = 8;
        let model = Model::build(&cfg, &mut Rng::new(1)).unwrap();
        let mut plan = BenchPlan::doubling(16, 64, 1, 1);
        let free = bench_model("hybrid", &model, &plan).unwrap();
        plan.memory_budget = Some(free[1].peak_bytes);
        let rows = bench_model("hybrid", &model, &plan).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.status).collect::<Vec<_>>(),
            vec![Status::Ok, Status::Ok, Status::OutOfMemory]
        );
        assert!(rows[2].tokens_per_sec == 0.0 && rows[0].tokens_per_sec > 0.0);
        assert_eq!(
            rows.iter().map(|r| r.madds).collect::<Vec<_>>(),
            free.iter().map(|r| r.madds).collect::<Vec<_>>()
        );
    }
}
