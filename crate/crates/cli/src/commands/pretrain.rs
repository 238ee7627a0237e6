use std::path::PathBuf;

use hybridna::data_train::{
    run_pretrain, synthetic_genome, GenomeStore, MetricsSink, PretrainOptions, TrainPlan,
};
use hybridna::model::{desk_config, Model, ModelConfig};
use hybridna::numerics::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{absolute, read_text};
use crate::error::{CliError, Result};
use crate::run::RunDir;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    #[serde(default = "desk_config")]
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainPlan,
    /// Steps between checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// One species per file, in order.
    #[serde(default)]
    pub fasta: Vec<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticGenome>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticGenome {
    pub contigs: usize,
    pub length: usize,
    pub motif: String,
    pub motif_rate: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    steps: usize,
    parameters: usize,
    initial_loss: f64,
    final_loss: f64,
    checkpoint: String,
}

fn load_store(data: &DataConfig, rng: &mut Rng) -> Result<GenomeStore> {
    let mut contigs = Vec::new();
    for (species, path) in data.fasta.iter().enumerate() {
        let text = read_text(path)?;
        let store = GenomeStore::parse_fasta(&text, species as u32)
            .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
        contigs.extend(store.contigs);
    }
    if let Some(s) = &data.synthetic {
        let species = data.fasta.len() as u32;
        let store = synthetic_genome(rng, s.contigs, s.length, &s.motif, s.motif_rate);
        contigs.extend(store.contigs.into_iter().map(|mut c| {
            c.species = species;
            c
        }));
    }
    if contigs.is_empty() {
        return Err(CliError::Config(
            "data: give at least one FASTA file or a synthetic genome".into(),
        ));
    }
    Ok(GenomeStore::new(contigs))
}

pub fn run(mut cfg: PretrainConfig, root: &std::path::Path) -> Result<()> {
    for p in &mut cfg.data.fasta {
        absolute(p)?;
    }
    let mut rng = Rng::new(cfg.seed);
    let mut data_rng = rng.fork();
    let store = load_store(&cfg.data, &mut data_rng)?;
    cfg.train.validate()?;
    let dir = RunDir::create(root, "pretrain", cfg.seed)?;
    dir.record_config(&cfg)?;

    let mut model = Model::build(&cfg.model, &mut rng)?;
    let mut sink = MetricsSink::create(&dir.path)?;
    let ck_dir = dir.file("checkpoints");
    if cfg.checkpoint_every > 0 {
        std::fs::create_dir_all(&ck_dir).map_err(|e| CliError::io(&ck_dir, e))?;
    }
    let outcome = run_pretrain(
        &mut model,
        &store,
        &cfg.train,
        &mut rng,
        PretrainOptions {
            sink: Some(&mut sink),
            checkpoint_dir: (cfg.checkpoint_every > 0).then_some(ck_dir),
            checkpoint_every: cfg.checkpoint_every,
        },
    )?;
    let final_path = dir.file("model.hydn");
    outcome.checkpoint.save(&final_path)?;
    let summary = Summary {
        steps: outcome.metrics.len(),
        parameters: model.parameter_count(),
        initial_loss: outcome.metrics.first().map_or(f64::NAN, |m| m.loss),
        final_loss: outcome.metrics.last().map_or(f64::NAN, |m| m.loss),
        checkpoint: "model.hydn".into(),
    };
    dir.write_json("summary.json", &summary)?;
    println!(
        "pretrained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
        summary.steps,
        summary.initial_loss,
        summary.final_loss,
        final_path.display()
    );
    Ok(())
}
