use std::path::{Path, PathBuf};

use hybridna::generate::{generate, to_fasta, GenRequest, Stop, Strategy};
use hybridna::numerics::Rng;
use hybridna::tokenizer::Vocab;
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, prompt_meta, run_cre, CreConfig};
use crate::config::absolute;
use crate::error::{CliError, Result};
use crate::run::RunDir;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub request: Option<RequestConfig>,
    #[serde(default)]
    pub cre: Option<CreConfig>,
}

/// A [`GenRequest`] with the prompt spelled as token names and the seed
/// taken from the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestConfig {
    pub prompt: Vec<String>,
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    #[serde(default = "length")]
    pub stop: Stop,
}

fn length() -> Stop {
    Stop::Length
}

pub fn run(mut cfg: GenerateConfig, root: &Path) -> Result<()> {
    absolute(&mut cfg.checkpoint)?;
    if cfg.request.is_none() && cfg.cre.is_none() {
        return Err(CliError::Config(
            "give a `request` section, a `cre` section, or both".into(),
        ));
    }
    let (ck, model) = load_checkpoint(&cfg.checkpoint)?;
    let (vocab, prefixes) = prompt_meta(&ck)?.unwrap_or_else(|| (Vocab::new(), Vec::new()));
    let request = match &cfg.request {
        Some(r) => Some(GenRequest {
            prompt: r
                .prompt
                .iter()
                .map(|name| vocab.id(name))
                .collect::<std::result::Result<_, _>>()?,
            max_new_tokens: r.max_new_tokens,
            strategy: r.strategy.clone(),
            seed: Rng::new(cfg.seed).next_u64(),
            stop: r.stop,
        }),
        None => None,
    };
    if cfg.cre.is_some() && prefixes.is_empty() {
        return Err(CliError::Config(format!(
            "cre: checkpoint {} carries no prompt tokens",
            cfg.checkpoint.display()
        )));
    }
    let dir = RunDir::create(root, "generate", cfg.seed)?;
    dir.record_config(&cfg)?;
    if let Some(req) = &request {
        let results = generate(&model, req)?;
        dir.write_json("results.json", &results)?;
        dir.write("samples.fasta", to_fasta("sample", &results))?;
        for r in &results {
            println!("{}\t{:.4}", r.text, r.total_log_prob);
        }
    }
    if let Some(cre) = &cfg.cre {
        let report = run_cre(&dir, &model, &vocab, &prefixes, cre, &[])?;
        println!(
            "{}",
            serde_json::to_string_pretty(&report).unwrap_or_default()
        );
    }
    Ok(())
}
