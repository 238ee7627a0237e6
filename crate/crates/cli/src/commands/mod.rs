pub mod bench;
pub mod eval;
pub mod finetune;
pub mod generate;
pub mod pretrain;
pub mod tokenize;

use std::collections::BTreeMap;
use std::path::Path;

use hybridna::finetune_eval::LabeledExample;
use hybridna::generate::{cre_protocol, motif_count, to_fasta, CreProtocol, CreReport};
use hybridna::model::{Checkpoint, Model};
use hybridna::tokenizer::{self, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::run::RunDir;

/// Prompt vocabulary and label prefixes stored with generative checkpoints.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PromptMeta {
    pub vocab: String,
    pub prefixes: Vec<String>,
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Model)> {
    if !path.exists() {
        return Err(CliError::io(path, "no such file"));
    }
    let ck = Checkpoint::load(path, None)?;
    let model = ck.restore_model()?;
    Ok((ck, model))
}

pub fn prompt_meta(ck: &Checkpoint) -> Result<Option<(Vocab, Vec<String>)>> {
    match ck.extra.get("prompts") {
        None => Ok(None),
        Some(v) => {
            let meta: PromptMeta = serde_json::from_value(v.clone())
                .map_err(|e| CliError::Run(format!("checkpoint prompt metadata: {e}")))?;
            Ok(Some((Vocab::from_text(&meta.vocab)?, meta.prefixes)))
        }
    }
}

/// Label-conditioned beam generation scored by motif copy number.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreConfig {
    /// One digit per prefix, e.g. `"3"` for prefixes `["A"]`.
    pub labels: Vec<String>,
    pub protocol: CreProtocol,
    pub oracle_motif: String,
}

#[derive(Debug, Serialize)]
struct CreOutput<'a> {
    #[serde(flatten)]
    report: &'a CreReport,
    /// Oracle mean over training sequences carrying each label.
    training_mean: BTreeMap<String, Option<f64>>,
}

fn label_name(vocab: &Vocab, prompt: &[u32]) -> Result<String> {
    Ok(prompt
        .iter()
        .map(|&id| vocab.name(id).map(str::to_string))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .concat())
}

/// Runs the protocol and writes `cre_report.json` and `generated.fasta`.
pub fn run_cre(
    dir: &RunDir,
    model: &Model,
    vocab: &Vocab,
    prefixes: &[String],
    cre: &CreConfig,
    training: &[LabeledExample],
) -> Result<CreReport> {
    let prefixes: Vec<&str> = prefixes.iter().map(String::as_str).collect();
    let mut labels = Vec::new();
    for l in &cre.labels {
        let prompt = vocab.encode_label(l, &prefixes)?;
        labels.push((label_name(vocab, &prompt)?, prompt));
    }
    let motif = cre.oracle_motif.clone();
    tokenizer::encode(&motif)?;
    let report = cre_protocol(model, vocab, &labels, &cre.protocol, |s| {
        motif_count(s, &motif) as f64
    })?;
    let mut training_mean = BTreeMap::new();
    for (name, prompt) in &labels {
        let scores: Vec<f64> = training
            .iter()
            .filter(|e| e.prompt().is_ok_and(|p| p == prompt.as_slice()))
            .map(|e| {
                let text = vocab.decode(&e.sequence.ids).unwrap_or_default();
                motif_count(&text, &motif) as f64
            })
            .collect();
        training_mean.insert(
            name.clone(),
            (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
        );
    }
    dir.write_json(
        "cre_report.json",
        &CreOutput {
            report: &report,
            training_mean,
        },
    )?;
    let fasta: String = report
        .sequences
        .iter()
        .map(|(name, results)| to_fasta(name, results))
        .collect();
    dir.write("generated.fasta", fasta)?;
    Ok(report)
}
