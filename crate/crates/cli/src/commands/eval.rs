use std::path::{Path, PathBuf};

use hybridna::finetune_eval::{evaluate_logits, parse_predictions};
use serde::{Deserialize, Serialize};

use crate::config::{absolute, read_text};
use crate::error::{CliError, Result};
use crate::run::RunDir;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub seed: u64,
    /// A `predictions.tsv` written by `finetune`.
    pub predictions: PathBuf,
}

pub fn run(mut cfg: EvalConfig, root: &Path) -> Result<()> {
    absolute(&mut cfg.predictions)?;
    let text = read_text(&cfg.predictions)?;
    let (logits, labels) = parse_predictions(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", cfg.predictions.display())))?;
    let evaluation = evaluate_logits(&logits, &labels)?;
    let dir = RunDir::create(root, "eval", cfg.seed)?;
    dir.record_config(&cfg)?;
    dir.write_json("metrics.json", &evaluation)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&evaluation).unwrap_or_default()
    );
    Ok(())
}
