use std::path::Path;

use hybridna::bench::{run_bench, BenchPlan};
use hybridna::model::{desk_config, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::run::RunDir;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    /// The hybrid stack; its attention-only twin is derived.
    #[serde(default = "desk_config")]
    pub model: ModelConfig,
    pub plan: BenchPlan,
}

pub fn run(mut cfg: BenchConfig, root: &Path) -> Result<()> {
    cfg.plan.seed = cfg.seed;
    let dir = RunDir::create(root, "bench", cfg.seed)?;
    dir.record_config(&cfg)?;
    let report = run_bench(&cfg.model, &cfg.plan)?;
    let csv = report.to_csv();
    dir.write("bench.csv", &csv)?;
    dir.write("hybrid.dat", report.series("hybrid"))?;
    dir.write("attention.dat", report.series("attention"))?;
    dir.write_json("report.json", &report)?;
    print!("{csv}");
    Ok(())
}
