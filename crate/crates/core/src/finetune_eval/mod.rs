//! Echo-embedding classification, prompt-conditioned generative
//! fine-tuning, and evaluation metrics.

mod metrics;
mod synthetic;

pub use metrics::{auprc, auroc, diversity, f1, levenshtein, mcc};
pub use synthetic::{ActivityTask, MotifTask};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_train::{clip_global_norm, collect_grads, AdamW, OptimizerConfig, TrainError};
use crate::model::{Model, ModelError};
use crate::numerics::{NumericsError, Rng, Tensor};
use crate::tokenizer::{self, TokenSequence, TokenizerError, Vocab, BASE_VOCAB, BOS, EOS, PAD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FinetuneError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least two sequences, got {0}")]
    TooFewSequences(usize),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("label {label} is outside {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("example carries the wrong kind of label for this task")]
    WrongLabelKind,
    #[error("token id {0} is not a registered prompt token")]
    UnregisteredPrompt(u32),
    #[error("classification head needs at least two classes, got {0}")]
    InvalidHead(usize),
    #[error("invalid fine-tuning plan: {0}")]
    InvalidPlan(String),
    #[error("malformed TSV at line {0}")]
    MalformedTsv(usize),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = FinetuneError> = std::result::Result<T, E>;

/// Affine classifier over pooled embeddings.
#[derive(Clone, Debug)]
pub struct ClsHead {
    /// `[d, K]`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
    /// Fixed per-feature standardization applied before `weight`.
    pub norm: Option<FeatureNorm>,
}

/// Per-feature shift and inverse scale, both `[d]`.
#[derive(Clone, Debug)]
pub struct FeatureNorm {
    pub mean: Tensor,
    pub inv_std: Tensor,
}

impl FeatureNorm {
    /// Statistics of the rows of `pooled: [n, d]`.
    pub fn fit(pooled: &Tensor) -> Result<FeatureNorm> {
        let (n, d) = (pooled.shape()[0], pooled.shape()[1]);
        let x = pooled.data();
        let mut mean = vec![0.0; d];
        for row in x.chunks(d) {
            mean.iter_mut()
                .zip(row)
                .for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; d];
        for row in x.chunks(d) {
            var.iter_mut()
                .zip(row)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
        }
        let inv_std = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
        Ok(FeatureNorm {
            mean: Tensor::new([d], mean)?,
            inv_std: Tensor::new([d], inv_std)?,
        })
    }
}

impl ClsHead {
    pub fn new(d: usize, classes: usize, rng: &mut Rng) -> Result<ClsHead> {
        if classes < 2 {
            return Err(FinetuneError::InvalidHead(classes));
        }
        Ok(ClsHead {
            weight: Tensor::param([d, classes], rng.normal_vec(d * classes, 0.02))?,
            bias: Tensor::param([classes], vec![0.0; classes])?,
            norm: None,
        })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Logits `[B, K]` for pooled embeddings `[B, d]`.
    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        let x = match &self.norm {
            Some(n) => pooled.sub(&n.mean)?.mul(&n.inv_std)?,
            None => pooled.clone(),
        };
        Ok(x.matmul(&self.weight)?.add(&self.bias)?)
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.weight".into(), &mut self.weight),
            ("head.bias".into(), &mut self.bias),
        ]
    }

    fn grads(&self) -> Vec<(String, Vec<f64>)> {
        [("head.weight", &self.weight), ("head.bias", &self.bias)]
            .into_iter()
            .map(|(n, p)| {
                (
                    n.to_string(),
                    p.grad_data().clone().unwrap_or_else(|| vec![0.0; p.len()]),
                )
            })
            .collect()
    }

    fn detached(&self) -> ClsHead {
        ClsHead {
            weight: self.weight.detach_param(),
            bias: self.bias.detach_param(),
            norm: self.norm.clone(),
        }
    }
}

/// Class probabilities for one pooled embedding.
pub fn classify(head: &ClsHead, h: &[f64]) -> Result<Vec<f64>> {
    let pooled = Tensor::new([1, h.len()], h.to_vec())?;
    let logits = head.logits(&pooled)?.to_vec();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Prompt(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub sequence: TokenSequence,
    pub label: Label,
}

impl LabeledExample {
    pub fn class(&self) -> Result<usize> {
        match self.label {
            Label::Class(c) => Ok(c),
            Label::Prompt(_) => Err(FinetuneError::WrongLabelKind),
        }
    }

    pub fn prompt(&self) -> Result<&[u32]> {
        match &self.label {
            Label::Prompt(p) => Ok(p),
            Label::Class(_) => Err(FinetuneError::WrongLabelKind),
        }
    }
}

/// Model input for echo embedding: `[BOS] x x`.
pub fn echo_input(x: &TokenSequence) -> Result<Vec<u32>> {
    let echoed = tokenizer::echo(x)?;
    let mut ids = Vec::with_capacity(echoed.len() + 1);
    ids.push(BOS);
    ids.extend_from_slice(&echoed.ids);
    Ok(ids)
}

/// Range of [`echo_input`] positions holding the second copy of `x`.
pub fn pooled_positions(len: usize) -> std::ops::Range<usize> {
    1 + len..1 + 2 * len
}

/// Mean of the final hidden states over the second copy of `x`, shape `[d]`.
pub fn echo_embed(model: &Model, x: &TokenSequence) -> Result<Tensor> {
    let hidden = model.hidden(&echo_input(x)?)?;
    let r = pooled_positions(x.len());
    Ok(hidden.slice(0, r.start, r.end)?.mean_axis(0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    HeadOnly,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetunePlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl FinetunePlan {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(FinetuneError::InvalidPlan(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(FinetuneError::InvalidPlan(format!(
                "learning rate {} must be positive",
                self.optimizer.lr
            )));
        }
        Ok(())
    }

    fn steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }

    /// Linear decay from the peak to zero over `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        self.optimizer.lr * (1.0 - step as f64 / total.max(1) as f64).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub mode: FinetuneMode,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose weights were restored (lowest validation loss).
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub mcc: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Binary tasks only.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

fn check_classes(data: &[LabeledExample], classes: usize) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    data.iter()
        .map(|e| {
            let c = e.class()?;
            if c >= classes {
                return Err(FinetuneError::InvalidLabel { label: c, classes });
            }
            Ok(c)
        })
        .collect()
}

/// Pooled embeddings `[n, d]` from a model that records no graph.
pub fn embed_all(model: &Model, data: &[LabeledExample]) -> Result<Tensor> {
    let frozen = model.frozen();
    let d = model.config.d_model;
    let mut out = Vec::with_capacity(data.len() * d);
    for e in data {
        out.extend(echo_embed(&frozen, &e.sequence)?.to_vec());
    }
    Ok(Tensor::new([data.len(), d], out)?)
}

/// Loss, MCC, F1 and (for two classes) ranking metrics of `head` on
/// precomputed pooled embeddings.
pub fn evaluate_embeddings(
    head: &ClsHead,
    pooled: &Tensor,
    labels: &[usize],
) -> Result<Evaluation> {
    let head = ClsHead {
        weight: head.weight.detach(),
        bias: head.bias.detach(),
        norm: head.norm.clone(),
    };
    evaluate_logits(&head.logits(pooled)?, labels)
}

/// Metrics of class logits `[n, K]` against `labels`.
pub fn evaluate_logits(logits: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(FinetuneError::LengthMismatch {
            left: logits.shape().first().copied().unwrap_or(0),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
        return Err(FinetuneError::InvalidLabel {
            label: bad,
            classes: k,
        });
    }
    let loss = Tensor::cross_entropy(logits, &targets_of(labels))?.item()?;
    let probs = logits.softmax(1)?.to_vec();
    let preds: Vec<usize> = probs
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &p)| if p > row[best] { i } else { best })
        })
        .collect();
    let accuracy =
        preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
    let (auroc_v, auprc_v) = if k == 2 {
        let scores: Vec<f64> = probs.chunks(2).map(|row| row[1]).collect();
        let truth: Vec<bool> = labels.iter().map(|&c| c == 1).collect();
        (auroc(&scores, &truth).ok(), auprc(&scores, &truth).ok())
    } else {
        (None, None)
    };
    Ok(Evaluation {
        loss,
        mcc: mcc(&preds, labels)?,
        f1: f1(&preds, labels)?,
        accuracy,
        auroc: auroc_v,
        auprc: auprc_v,
    })
}

pub fn evaluate(model: &Model, head: &ClsHead, data: &[LabeledExample]) -> Result<Evaluation> {
    let labels = check_classes(data, head.classes())?;
    evaluate_embeddings(head, &embed_all(model, data)?, &labels)
}

fn targets_of(labels: &[usize]) -> Vec<Option<u32>> {
    labels.iter().map(|&c| Some(c as u32)).collect()
}

/// Cross-entropy fine-tuning of `head` (and, in [`FinetuneMode::Full`], the
/// model) with linear learning-rate decay. In head-only mode a head without
/// feature standardization gets one fitted on the frozen training
/// embeddings. After the
/// last epoch the weights from the epoch with the lowest validation loss are
/// restored.
pub fn finetune_discriminative(
    model: &mut Model,
    head: &mut ClsHead,
    train: &[LabeledExample],
    val: &[LabeledExample],
    mode: FinetuneMode,
    plan: &FinetunePlan,
    rng: &mut Rng,
) -> Result<FinetuneReport> {
    plan.validate()?;
    let train_labels = check_classes(train, head.classes())?;
    let val_labels = check_classes(val, head.classes())?;
    let total = plan.steps(train.len());
    let mut opt = AdamW::new();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(plan.epochs);
    let mut best: Option<(f64, usize, Model, ClsHead)> = None;
    let cached = match mode {
        FinetuneMode::HeadOnly => Some((embed_all(model, train)?, embed_all(model, val)?)),
        FinetuneMode::Full => None,
    };
    if let (None, Some((pooled, _))) = (&head.norm, &cached) {
        head.norm = Some(FeatureNorm::fit(pooled)?);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..plan.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(plan.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let lr = plan.lr_at(step, total);
            match &cached {
                Some((pooled, _)) => {
                    let d = pooled.shape()[1];
                    let rows: Vec<f64> = batch
                        .iter()
                        .flat_map(|&i| pooled.data()[i * d..(i + 1) * d].iter().copied())
                        .collect();
                    let x = Tensor::new([batch.len(), d], rows)?;
                    let loss = Tensor::cross_entropy(&head.logits(&x)?, &targets_of(&labels))?;
                    loss_sum += loss.item()? * batch.len() as f64;
                    loss.backward()?;
                    let mut grads = head.grads();
                    clip_global_norm(&mut grads, plan.optimizer.grad_clip);
                    opt.update_params(head.named_mut(), &grads, &plan.optimizer, lr)?;
                }
                None => {
                    for (&i, &y) in batch.iter().zip(&labels) {
                        let pooled = echo_embed(model, &train[i].sequence)?;
                        let pooled = pooled.reshape([1, pooled.len()])?;
                        let loss =
                            Tensor::cross_entropy(&head.logits(&pooled)?, &[Some(y as u32)])?;
                        loss_sum += loss.item()?;
                        loss.scale(1.0 / batch.len() as f64)?.backward()?;
                    }
                    let mut grads = collect_grads(model);
                    grads.extend(head.grads());
                    clip_global_norm(&mut grads, plan.optimizer.grad_clip);
                    let mut params = model.named_parameters_mut();
                    params.extend(head.named_mut());
                    opt.update_params(params, &grads, &plan.optimizer, lr)?;
                }
            }
            step += 1;
        }
        let val_pooled = match &cached {
            Some((_, v)) => v.clone(),
            None => embed_all(model, val)?,
        };
        let ev = evaluate_embeddings(head, &val_pooled, &val_labels)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: ev.loss,
            val_mcc: ev.mcc,
        });
        if best.as_ref().is_none_or(|b| ev.loss < b.0) {
            best = Some((ev.loss, epoch, model.clone(), head.clone()));
        }
    }
    let (_, best_epoch, best_model, best_head) = best.expect("at least one epoch");
    *model = best_model.detached();
    *head = best_head.detached();
    Ok(FinetuneReport {
        mode,
        epochs,
        best_epoch,
    })
}

/// `prompt ‖ x ‖ EOS`.
pub fn generative_sequence(prompt: &[u32], x: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(prompt.len() + x.len() + 1);
    ids.extend_from_slice(prompt);
    ids.extend_from_slice(x);
    ids.push(EOS);
    ids
}

/// Next-token targets with prompt-token (and PAD) targets removed, so only
/// sequence positions are scored.
pub fn generative_targets(ids: &[u32]) -> Vec<Option<u32>> {
    ids.iter()
        .skip(1)
        .map(|&t| (t != PAD && (t as usize) < BASE_VOCAB).then_some(t))
        .collect()
}

/// Mean cross-entropy over the sequence positions of `ids`; `logits` has one
/// row per position except the last.
pub fn generative_loss(logits: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let rows = logits.shape().first().copied().unwrap_or(0);
    if logits.ndim() != 2 || rows + 1 != ids.len() {
        return Err(FinetuneError::LengthMismatch {
            left: rows + 1,
            right: ids.len(),
        });
    }
    Ok(Tensor::cross_entropy(logits, &generative_targets(ids))?)
}

/// Grows the model's embedding table to cover every token of `vocab`.
pub fn extend_for_vocab(model: &mut Model, vocab: &Vocab, rng: &mut Rng) -> Result<()> {
    if vocab.len() > model.config.vocab_size {
        model.expand_vocab(vocab.len(), rng)?;
    }
    Ok(())
}

/// Fine-tunes on `prompt ‖ x ‖ EOS` sequences with [`generative_loss`];
/// returns the mean training loss of each epoch.
pub fn finetune_generative(
    model: &mut Model,
    vocab: &Vocab,
    data: &[LabeledExample],
    plan: &FinetunePlan,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    plan.validate()?;
    if data.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    let mut seqs = Vec::with_capacity(data.len());
    for e in data {
        let prompt = e.prompt()?;
        if let Some(&bad) = prompt
            .iter()
            .find(|&&id| !vocab.is_prompt(id) || id as usize >= model.config.vocab_size)
        {
            return Err(FinetuneError::UnregisteredPrompt(bad));
        }
        seqs.push(generative_sequence(prompt, &e.sequence.ids));
    }
    let total = plan.steps(data.len());
    let mut opt = AdamW::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut history = Vec::with_capacity(plan.epochs);
    for _ in 0..plan.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(plan.batch_size) {
            let counts: Vec<usize> = batch
                .iter()
                .map(|&i| generative_targets(&seqs[i]).iter().flatten().count())
                .collect();
            let scored: usize = counts.iter().sum();
            for (&i, &count) in batch.iter().zip(&counts) {
                if count == 0 {
                    continue;
                }
                let ids = &seqs[i];
                let loss = generative_loss(&model.forward(&ids[..ids.len() - 1])?, ids)?;
                loss_sum += loss.item()?;
                loss.scale(count as f64 / scored as f64)?.backward()?;
            }
            let mut grads = collect_grads(model);
            clip_global_norm(&mut grads, plan.optimizer.grad_clip);
            opt.update(model, &grads, &plan.optimizer, plan.lr_at(step, total))?;
            step += 1;
        }
        history.push(loss_sum / data.len() as f64);
    }
    Ok(history)
}

/// `label<TAB>logit_0<TAB>…` rows under a header; logits are written in
/// shortest round-trip form so [`parse_predictions`] recovers them exactly.
pub fn write_predictions(logits: &Tensor, labels: &[usize]) -> Result<String> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(FinetuneError::LengthMismatch {
            left: logits.shape().first().copied().unwrap_or(0),
            right: labels.len(),
        });
    }
    let k = logits.shape()[1];
    let mut out = String::from("label");
    for c in 0..k {
        out.push_str(&format!("\tlogit_{c}"));
    }
    out.push('\n');
    for (row, label) in logits.data().chunks(k).zip(labels) {
        out.push_str(&label.to_string());
        for v in row {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Inverse of [`write_predictions`]: logits `[n, K]` and labels.
pub fn parse_predictions(text: &str) -> Result<(Tensor, Vec<usize>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(FinetuneError::EmptyDataset)?;
    let k = header.split('\t').count() - 1;
    if k < 2 || !header.starts_with("label\t") {
        return Err(FinetuneError::MalformedTsv(1));
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != k + 1 {
            return Err(FinetuneError::MalformedTsv(i + 1));
        }
        labels.push(
            fields[0]
                .parse()
                .map_err(|_| FinetuneError::MalformedTsv(i + 1))?,
        );
        for f in &fields[1..] {
            data.push(
                f.parse::<f64>()
                    .map_err(|_| FinetuneError::MalformedTsv(i + 1))?,
            );
        }
    }
    if labels.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    Ok((Tensor::new([labels.len(), k], data)?, labels))
}

/// Class logits `[n, K]` of `head` on every example.
pub fn predict(model: &Model, head: &ClsHead, data: &[LabeledExample]) -> Result<Tensor> {
    let head = ClsHead {
        weight: head.weight.detach(),
        bias: head.bias.detach(),
        norm: head.norm.clone(),
    };
    head.logits(&embed_all(model, data)?)
}

fn parse_tsv_line(line: &str, n: usize) -> Result<(&str, &str)> {
    let mut parts = line.split('\t');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => Ok((a.trim(), b.trim())),
        _ => Err(FinetuneError::MalformedTsv(n)),
    }
}

/// `sequence<TAB>class` rows.
pub fn parse_classification_tsv(text: &str) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let (seq, label) = parse_tsv_line(line, i + 1)?;
        let class = label
            .parse()
            .map_err(|_| FinetuneError::MalformedTsv(i + 1))?;
        out.push(LabeledExample {
            sequence: tokenizer::encode(seq)?,
            label: Label::Class(class),
        });
    }
    Ok(out)
}

/// `label<TAB>sequence` rows; each label character becomes one prompt token
/// via [`Vocab::encode_label`].
pub fn parse_generative_tsv(
    text: &str,
    vocab: &Vocab,
    prefixes: &[&str],
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let (label, seq) = parse_tsv_line(line, i + 1)?;
        out.push(LabeledExample {
            sequence: tokenizer::encode(seq)?,
            label: Label::Prompt(vocab.encode_label(label, prefixes)?),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_train::ntp_loss;
    use crate::model::{desk_config, Interleave, LayerKind, ModelConfig};

    #[test]
    fn predictions_round_trip_exactly() {
        let mut rng = Rng::new(4);
        let logits = Tensor::new([7, 3], rng.normal_vec(21, 3.0)).unwrap();
        let labels = vec![0, 2, 1, 1, 0, 2, 2];
        let text = write_predictions(&logits, &labels).unwrap();
        let (back, lab) = parse_predictions(&text).unwrap();
        assert_eq!(lab, labels);
        assert_eq!(back.data(), logits.data());
        assert_eq!(
            evaluate_logits(&back, &lab).unwrap(),
            evaluate_logits(&logits, &labels).unwrap()
        );
        assert!(matches!(
            parse_predictions("label\tlogit_0\tlogit_1\n1\t0.5\n"),
            Err(FinetuneError::MalformedTsv(2))
        ));
    }

    fn micro() -> ModelConfig {
        let mut cfg = desk_config();
        cfg.n_layers = 2;
        cfg.d_model = 8;
        cfg.intermediate_size = 16;
        cfg.ssd.head_dim = 4;
        cfg.ssd.state = 4;
        cfg.ssd.chunk = 8;
        cfg.interleave = Interleave::Explicit(vec![LayerKind::Mamba, LayerKind::Attention]);
        cfg
    }

    #[test]
    fn zero_head_is_uniform_and_bias_dominates() {
        let mut head = ClsHead::new(4, 3, &mut Rng::new(0)).unwrap();
        head.weight = Tensor::zeros([4, 3]);
        let p = classify(&head, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        head.bias = Tensor::new([3], vec![10.0, -10.0, -10.0]).unwrap();
        assert!(classify(&head, &[0.5; 4]).unwrap()[0] > 0.999);
        assert!(matches!(
            ClsHead::new(4, 1, &mut Rng::new(0)),
            Err(FinetuneError::InvalidHead(1))
        ));
    }

    #[test]
    fn single_base_echo_pools_one_state() {
        let model = Model::build(&micro(), &mut Rng::new(1)).unwrap();
        let x = tokenizer::encode("G").unwrap();
        let pooled = echo_embed(&model, &x).unwrap();
        let hidden = model.hidden(&echo_input(&x).unwrap()).unwrap();
        assert_eq!(pooled.shape(), &[8]);
        assert_eq!(pooled.to_vec(), hidden.data()[2 * 8..3 * 8].to_vec());
    }

    #[test]
    fn empty_prompt_loss_is_ntp_loss() {
        let model = Model::build(&micro(), &mut Rng::new(2)).unwrap();
        let ids = generative_sequence(&[], &tokenizer::encode("ACGTTGCA").unwrap().ids);
        let logits = model.forward(&ids[..ids.len() - 1]).unwrap();
        let a = generative_loss(&logits, &ids).unwrap().item().unwrap();
        let b = ntp_loss(&logits, &ids).unwrap().item().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn prompt_positions_get_no_logit_gradient() {
        let ids = generative_sequence(&[9, 10], &[0, 1, 2]);
        let logits = Tensor::param(
            [ids.len() - 1, 11],
            Rng::new(3).normal_vec((ids.len() - 1) * 11, 1.0),
        )
        .unwrap();
        generative_loss(&logits, &ids).unwrap().backward().unwrap();
        let g = logits.grad().unwrap().to_vec();
        assert!(g[..11].iter().all(|&v| v == 0.0));
        assert!(g[11..22].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn tsv_parsing() {
        let data = parse_classification_tsv("ACGT\t1\nTTTT\t0\n").unwrap();
        assert_eq!(data[0].label, Label::Class(1));
        assert_eq!(
            parse_classification_tsv("ACGT 1\n"),
            Err(FinetuneError::MalformedTsv(1))
        );
        let mut vocab = Vocab::new();
        vocab.register_label_tokens(&["H", "K"], 4).unwrap();
        let gen = parse_generative_tsv("30\tACG\n", &vocab, &["H", "K"]).unwrap();
        assert_eq!(
            gen[0].label,
            Label::Prompt(vec![vocab.id("H3").unwrap(), vocab.id("K0").unwrap()])
        );
    }

    #[test]
    fn single_class_training_reports_zero_mcc() {
        let mut rng = Rng::new(4);
        let mut model = Model::build(&micro(), &mut rng).unwrap();
        let mut head = ClsHead::new(8, 2, &mut rng).unwrap();
        let data: Vec<LabeledExample> = ["ACGT", "GGTA", "TTAC"]
            .iter()
            .map(|s| LabeledExample {
                sequence: tokenizer::encode(s).unwrap(),
                label: Label::Class(1),
            })
            .collect();
        let plan = FinetunePlan {
            epochs: 2,
            batch_size: 2,
            optimizer: OptimizerConfig::with_lr(1e-2),
        };
        let report = finetune_discriminative(
            &mut model,
            &mut head,
            &data,
            &data,
            FinetuneMode::Full,
            &plan,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.epochs.len(), 2);
        assert!(report.epochs.iter().all(|e| e.val_mcc == 0.0));
        assert!(matches!(
            finetune_discriminative(
                &mut model,
                &mut head,
                &[],
                &data,
                FinetuneMode::Full,
                &plan,
                &mut rng
            ),
            Err(FinetuneError::EmptyDataset)
        ));
    }

    #[test]
    fn linear_decay_reaches_zero() {
        let plan = FinetunePlan {
            epochs: 1,
            batch_size: 1,
            optimizer: OptimizerConfig::with_lr(1.0),
        };
        assert_eq!(plan.lr_at(0, 4), 1.0);
        assert_eq!(plan.lr_at(2, 4), 0.5);
        assert_eq!(plan.lr_at(4, 4), 0.0);
    }
}
