//! Genome windows, next-token pretraining with length warm-up, schedules
//! and training telemetry.

mod genome;
mod optim;
mod schedule;

pub use genome::{repeated_corpus, synthetic_genome, Contig, GenomeStore};
pub use optim::{clip_global_norm, collect_grads, decays, global_norm, AdamW};
pub use schedule::{extension_steps, LengthStage, OptimizerConfig, TrainPlan, EXTENSION_FRACTION};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Checkpoint, Model, ModelError};
use crate::numerics::{NumericsError, Rng, Tensor};
use crate::tokenizer::{TokenSequence, PAD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("malformed FASTA at line {0}")]
    MalformedFasta(usize),
    #[error("FASTA file is empty")]
    EmptyFile,
    #[error("no contig holds a window of {context_len} bases (longest is {longest})")]
    NoEligibleContig { context_len: usize, longest: usize },
    #[error("logits for {rows} positions do not match a sequence of {len} tokens")]
    ShapeMismatch { rows: usize, len: usize },
    #[error("step {step} is outside the schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error("invalid training plan: {0}")]
    InvalidPlan(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Next-token targets for a sequence: position `i` predicts `ids[i + 1]`;
/// PAD targets are skipped.
pub fn shifted_targets(ids: &[u32]) -> Vec<Option<u32>> {
    ids.iter()
        .skip(1)
        .map(|&t| (t != PAD).then_some(t))
        .collect()
}

/// Mean next-token cross-entropy in nats. `logits` holds one row per
/// position of `sequence` except the last.
pub fn ntp_loss(logits: &Tensor, sequence: &[u32]) -> Result<Tensor> {
    let rows = logits.shape().first().copied().unwrap_or(0);
    if logits.ndim() != 2 || rows + 1 != sequence.len() {
        return Err(TrainError::ShapeMismatch {
            rows,
            len: sequence.len(),
        });
    }
    Ok(Tensor::cross_entropy(logits, &shifted_targets(sequence))?)
}

/// Accumulates gradients of the batch-mean next-token loss into the model's
/// parameters one sequence at a time; returns the loss value.
pub fn accumulate_batch_loss(model: &Model, batch: &[TokenSequence]) -> Result<f64> {
    let counts: Vec<usize> = batch
        .iter()
        .map(|s| shifted_targets(&s.ids).iter().flatten().count())
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TrainError::Data("batch has no scored positions".into()));
    }
    let mut loss = 0.0;
    for (seq, &count) in batch.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let logits = model.forward(&seq.ids[..seq.len() - 1])?;
        let part = ntp_loss(&logits, &seq.ids)?.scale(count as f64 / total as f64)?;
        loss += part.item()?;
        part.backward()?;
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub ctx_len: usize,
    pub tokens_per_sec: f64,
    pub wall_ms: f64,
}

/// Writes metrics as CSV and mirrors them as JSON lines.
pub struct MetricsSink {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
}

pub const METRICS_HEADER: &str = "step,loss,lr,ctx_len,tokens_per_sec,wall_ms";

impl MetricsSink {
    pub fn create(dir: &Path) -> Result<MetricsSink> {
        let open = |name: &str| {
            File::create(dir.join(name))
                .map(BufWriter::new)
                .map_err(|e| TrainError::Io(e.to_string()))
        };
        let mut csv = open("metrics.csv")?;
        writeln!(csv, "{METRICS_HEADER}").map_err(|e| TrainError::Io(e.to_string()))?;
        Ok(MetricsSink {
            csv,
            jsonl: open("metrics.jsonl")?,
        })
    }

    pub fn record(&mut self, m: &TrainMetrics) -> Result<()> {
        let io = |e: std::io::Error| TrainError::Io(e.to_string());
        writeln!(
            self.csv,
            "{},{},{},{},{},{}",
            m.step, m.loss, m.lr, m.ctx_len, m.tokens_per_sec, m.wall_ms
        )
        .map_err(io)?;
        serde_json::to_writer(&mut self.jsonl, m).map_err(|e| TrainError::Io(e.to_string()))?;
        writeln!(self.jsonl).map_err(io)?;
        self.csv.flush().map_err(io)?;
        self.jsonl.flush().map_err(io)
    }
}

#[derive(Default)]
pub struct PretrainOptions<'a> {
    pub sink: Option<&'a mut MetricsSink>,
    /// Directory for periodic checkpoints (`step_<n>.hydn`).
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

pub struct PretrainOutcome {
    pub metrics: Vec<TrainMetrics>,
    pub checkpoint: Checkpoint,
}

/// Steps over which the loss may stay above the divergence ratio.
pub const DIVERGENCE_WINDOW: usize = 100;
pub const DIVERGENCE_RATIO: f64 = 10.0;

fn snapshot(model: &Model, opt: &AdamW, step: usize, rng: &Rng) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_model(model, step as u64, Some(rng.clone()));
    ck.extra = serde_json::json!({});
    opt.export(model, &mut ck)?;
    Ok(ck)
}

/// Runs every length stage of `plan` in order. Optimizer moments carry
/// across stages.
pub fn run_pretrain(
    model: &mut Model,
    store: &GenomeStore,
    plan: &TrainPlan,
    rng: &mut Rng,
    mut opts: PretrainOptions<'_>,
) -> Result<PretrainOutcome> {
    plan.validate()?;
    if let Some(s) = plan
        .stages
        .iter()
        .find(|s| s.context_len > model.config.max_context)
    {
        return Err(TrainError::InvalidPlan(format!(
            "stage context {} exceeds model max context {}",
            s.context_len, model.config.max_context
        )));
    }
    let mut opt = AdamW::new();
    let mut metrics = Vec::with_capacity(plan.total_steps());
    let start = Instant::now();
    let mut initial_loss = None;
    let mut above = 0;
    for step in 0..plan.total_steps() {
        let (_, ctx) = plan.stage_at(step).expect("step within plan");
        let t0 = Instant::now();
        let batch = store.sample_batch(rng, plan.batch_size(ctx), ctx)?;
        let loss = match accumulate_batch_loss(model, &batch) {
            Ok(l) => l,
            Err(TrainError::Numerics(NumericsError::NonFinite { .. })) => {
                return Err(TrainError::DivergenceDetected {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(TrainError::Model(e)) if e.is_non_finite() => {
                return Err(TrainError::DivergenceDetected {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(TrainError::DivergenceDetected { step, loss });
        }
        let init = *initial_loss.get_or_insert(loss);
        above = if loss > DIVERGENCE_RATIO * init {
            above + 1
        } else {
            0
        };
        if above >= DIVERGENCE_WINDOW {
            return Err(TrainError::DivergenceDetected { step, loss });
        }
        let mut grads = collect_grads(model);
        clip_global_norm(&mut grads, plan.optimizer.grad_clip);
        let lr = plan.lr_at(step + 1)?;
        opt.update(model, &grads, &plan.optimizer, lr)?;
        let tokens: usize = batch.iter().map(|s| s.len() - 1).sum();
        let m = TrainMetrics {
            step,
            loss,
            lr,
            ctx_len: ctx,
            tokens_per_sec: tokens as f64 / t0.elapsed().as_secs_f64().max(1e-9),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(sink) = opts.sink.as_deref_mut() {
            sink.record(&m)?;
        }
        metrics.push(m);
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 {
                snapshot(model, &opt, step + 1, rng)?
                    .save(&dir.join(format!("step_{}.hydn", step + 1)))?;
            }
        }
    }
    let checkpoint = snapshot(model, &opt, plan.total_steps(), rng)?;
    Ok(PretrainOutcome {
        metrics,
        checkpoint,
    })
}
