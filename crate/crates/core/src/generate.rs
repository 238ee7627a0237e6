//! Greedy, sampled and beam-search decoding over per-layer recurrent state,
//! plus the conditioned regulatory-element generation protocol.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finetune_eval::{diversity, FinetuneError};
use crate::model::{DecodeState, Model, ModelError};
use crate::numerics::{NumericsError, Rng, Tensor};
use crate::tokenizer::{TokenizerError, Vocab, EOS, NUCLEOTIDES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerateError {
    #[error("prompt of {prompt} tokens plus {new} new tokens exceeds context {max}")]
    ContextOverflow {
        prompt: usize,
        new: usize,
        max: usize,
    },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("token id {0} is not a registered prompt token")]
    UnregisteredPrompt(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Metric(#[from] FinetuneError),
}

pub type Result<T, E = GenerateError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Greedy,
    Sample {
        temperature: f64,
        top_k: Option<usize>,
    },
    Beam {
        width: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stop {
    /// Exactly `max_new_tokens` nucleotides.
    Length,
    /// At EOS or `max_new_tokens`, whichever comes first.
    Eos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenRequest {
    pub prompt: Vec<u32>,
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub stop: Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    /// Generated tokens, prompt excluded.
    pub ids: Vec<u32>,
    pub log_probs: Vec<f64>,
    pub total_log_prob: f64,
    pub text: String,
}

/// Tokens the decoder may emit under `stop`, in id order.
pub fn candidates(stop: Stop) -> Vec<u32> {
    let mut c: Vec<u32> = NUCLEOTIDES.to_vec();
    if stop == Stop::Eos {
        c.push(EOS);
    }
    c
}

/// Log-probabilities of `cands` under the softmax of `row` restricted to
/// those tokens.
pub fn candidate_log_probs(row: &[f64], cands: &[u32]) -> Vec<f64> {
    let logits: Vec<f64> = cands.iter().map(|&c| row[c as usize]).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn text_of(ids: &[u32]) -> String {
    ids.iter()
        .filter_map(|&id| match id {
            0 => Some('A'),
            1 => Some('C'),
            2 => Some('G'),
            3 => Some('T'),
            _ => None,
        })
        .collect()
}

fn finish(ids: Vec<u32>, log_probs: Vec<f64>) -> GenResult {
    GenResult {
        text: text_of(&ids),
        total_log_prob: log_probs.iter().sum(),
        ids,
        log_probs,
    }
}

fn validate(model: &Model, req: &GenRequest) -> Result<()> {
    if req.prompt.is_empty() {
        return Err(GenerateError::EmptyPrompt);
    }
    if req.max_new_tokens == 0 {
        return Err(GenerateError::InvalidRequest(
            "max_new_tokens must be at least 1".into(),
        ));
    }
    match req.strategy {
        Strategy::Sample { temperature, top_k } => {
            if !(temperature > 0.0) || top_k == Some(0) {
                return Err(GenerateError::InvalidRequest(
                    "temperature must be positive and top_k nonzero".into(),
                ));
            }
        }
        Strategy::Beam { width } if width == 0 => {
            return Err(GenerateError::InvalidRequest(
                "beam width must be at least 1".into(),
            ))
        }
        _ => {}
    }
    let max = model.config.max_context;
    if req.prompt.len() + req.max_new_tokens > max {
        return Err(GenerateError::ContextOverflow {
            prompt: req.prompt.len(),
            new: req.max_new_tokens,
            max,
        });
    }
    Ok(())
}

fn last_row(logits: &Tensor) -> Vec<f64> {
    let v = logits.shape()[1];
    logits.data()[logits.len() - v..].to_vec()
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// Runs `req`. Greedy and sampling return one result; beam search returns
/// up to `width` results sorted by total log-probability.
pub fn generate(model: &Model, req: &GenRequest) -> Result<Vec<GenResult>> {
    validate(model, req)?;
    if let Strategy::Beam { width } = req.strategy {
        return beam_search_with(model, &req.prompt, width, req.max_new_tokens, req.stop);
    }
    let model = model.frozen();
    let cands = candidates(req.stop);
    let mut rng = Rng::new(req.seed);
    let mut state = model.decode_state();
    let mut row = last_row(&model.forward_stateful(&req.prompt, &mut state)?);
    let (mut ids, mut lps) = (Vec::new(), Vec::new());
    for step in 0..req.max_new_tokens {
        let lp = candidate_log_probs(&row, &cands);
        let pick = match req.strategy {
            Strategy::Sample { temperature, top_k } => {
                sample_index(&lp, temperature, top_k, &mut rng)
            }
            _ => argmax(&lp),
        };
        let token = cands[pick];
        ids.push(token);
        lps.push(lp[pick]);
        if token == EOS || step + 1 == req.max_new_tokens {
            break;
        }
        row = last_row(&model.forward_stateful(&[token], &mut state)?);
    }
    Ok(vec![finish(ids, lps)])
}

fn sample_index(log_probs: &[f64], temperature: f64, top_k: Option<usize>, rng: &mut Rng) -> usize {
    let mut order: Vec<usize> = (0..log_probs.len()).collect();
    order.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
    order.truncate(top_k.unwrap_or(order.len()).min(order.len()));
    let scaled: Vec<f64> = order.iter().map(|&i| log_probs[i] / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    order[rng.weighted(&weights)]
}

struct Beam {
    ids: Vec<u32>,
    log_probs: Vec<f64>,
    total: f64,
    state: DecodeState,
    row: Vec<f64>,
    done: bool,
}

fn rank(a: (&[u32], f64), b: (&[u32], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Length-synchronized beam search over summed log-probabilities with no
/// length normalization. Results are sorted by total log-probability, ties
/// broken by token-id lexicographic order.
pub fn beam_search(
    model: &Model,
    prompt: &[u32],
    width: usize,
    len: usize,
) -> Result<Vec<GenResult>> {
    let req = GenRequest {
        prompt: prompt.to_vec(),
        max_new_tokens: len,
        strategy: Strategy::Beam { width },
        seed: 0,
        stop: Stop::Length,
    };
    generate(model, &req)
}

fn beam_search_with(
    model: &Model,
    prompt: &[u32],
    width: usize,
    len: usize,
    stop: Stop,
) -> Result<Vec<GenResult>> {
    let model = model.frozen();
    let cands = candidates(stop);
    let mut state = model.decode_state();
    let row = last_row(&model.forward_stateful(prompt, &mut state)?);
    let mut beams = vec![Beam {
        ids: Vec::new(),
        log_probs: Vec::new(),
        total: 0.0,
        state,
        row,
        done: false,
    }];
    for step in 0..len {
        // (parent, candidate index or None for a finished beam, total)
        let mut pool: Vec<(usize, Option<usize>, f64, Vec<u32>)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.done {
                pool.push((bi, None, b.total, b.ids.clone()));
                continue;
            }
            let lp = candidate_log_probs(&b.row, &cands);
            for (ci, &l) in lp.iter().enumerate() {
                let mut ids = b.ids.clone();
                ids.push(cands[ci]);
                pool.push((bi, Some(ci), b.total + l, ids));
            }
        }
        pool.sort_by(|a, b| rank((&a.3, a.2), (&b.3, b.2)));
        pool.truncate(width);
        let last = step + 1 == len;
        let mut next = Vec::with_capacity(pool.len());
        for (bi, ci, total, ids) in pool {
            let parent = &beams[bi];
            let Some(ci) = ci else {
                next.push(Beam {
                    ids,
                    log_probs: parent.log_probs.clone(),
                    total,
                    state: parent.state.clone(),
                    row: Vec::new(),
                    done: true,
                });
                continue;
            };
            let token = cands[ci];
            let mut log_probs = parent.log_probs.clone();
            log_probs.push(candidate_log_probs(&parent.row, &cands)[ci]);
            let done = token == EOS;
            let mut state = parent.state.clone();
            let row = if last || done {
                Vec::new()
            } else {
                last_row(&model.forward_stateful(&[token], &mut state)?)
            };
            next.push(Beam {
                ids,
                log_probs,
                total,
                state,
                row,
                done,
            });
        }
        beams = next;
        if beams.iter().all(|b| b.done) {
            break;
        }
    }
    Ok(beams
        .into_iter()
        .map(|b| finish(b.ids, b.log_probs))
        .collect())
}

/// Per-token log-probabilities of `generated` after `prompt` from one full
/// forward pass, under the same candidate restriction as decoding.
pub fn rescore(model: &Model, prompt: &[u32], generated: &[u32], stop: Stop) -> Result<Vec<f64>> {
    let model = model.frozen();
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&generated[..generated.len().saturating_sub(1)]);
    let logits = model.forward(&ids)?;
    let v = logits.shape()[1];
    let cands = candidates(stop);
    Ok(generated
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = &logits.data()[(prompt.len() - 1 + i) * v..(prompt.len() + i) * v];
            let ci = cands
                .iter()
                .position(|&c| c == t)
                .expect("generated token is a candidate");
            candidate_log_probs(row, &cands)[ci]
        })
        .collect())
}

/// Occurrences of `motif` in `seq`, overlaps included.
pub fn motif_count(seq: &str, motif: &str) -> usize {
    if motif.is_empty() || seq.len() < motif.len() {
        return 0;
    }
    (0..=seq.len() - motif.len())
        .filter(|&i| &seq[i..i + motif.len()] == motif)
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub top1: f64,
    pub mean_top100: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreReport {
    pub labels: BTreeMap<String, LabelReport>,
    /// Mean pairwise edit distance over the pooled top-100 of every label.
    pub diversity: f64,
    #[serde(skip)]
    pub sequences: BTreeMap<String, Vec<GenResult>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreProtocol {
    pub n_per_label: usize,
    pub beam_width: usize,
    pub length: usize,
}

/// Beam-generates `n_per_label` sequences for each label prompt, scores
/// them with `oracle` and summarizes activity and diversity.
pub fn cre_protocol<F: Fn(&str) -> f64>(
    model: &Model,
    vocab: &Vocab,
    labels: &[(String, Vec<u32>)],
    protocol: &CreProtocol,
    oracle: F,
) -> Result<CreReport> {
    if labels.is_empty() || protocol.n_per_label == 0 {
        return Err(GenerateError::InvalidRequest(
            "need at least one label and one sequence per label".into(),
        ));
    }
    let width = protocol.beam_width.max(protocol.n_per_label);
    let mut report = CreReport {
        labels: BTreeMap::new(),
        diversity: 0.0,
        sequences: BTreeMap::new(),
    };
    let mut pooled = Vec::new();
    for (name, prompt) in labels {
        if let Some(&bad) = prompt.iter().find(|&&id| !vocab.is_prompt(id)) {
            return Err(GenerateError::UnregisteredPrompt(bad));
        }
        let mut results = beam_search(model, prompt, width, protocol.length)?;
        results.dedup_by(|a, b| a.ids == b.ids);
        results.truncate(protocol.n_per_label);
        let mut scores: Vec<f64> = results.iter().map(|r| oracle(&r.text)).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let top = &scores[..scores.len().min(100)];
        report.labels.insert(
            name.clone(),
            LabelReport {
                top1: scores.first().copied().unwrap_or(f64::NAN),
                mean_top100: top.iter().sum::<f64>() / top.len().max(1) as f64,
                n: results.len(),
            },
        );
        pooled.extend(results.iter().take(100).map(|r| r.text.clone()));
        report.sequences.insert(name.clone(), results);
    }
    report.diversity = if pooled.len() >= 2 {
        diversity(&pooled)?
    } else {
        0.0
    };
    Ok(report)
}

/// FASTA records with `>label_rank_logprob` headers.
pub fn to_fasta(label: &str, results: &[GenResult]) -> String {
    results
        .iter()
        .enumerate()
        .map(|(i, r)| format!(">{label}_{i}_{:.4}\n{}\n", r.total_log_prob, r.text))
        .collect()
}
