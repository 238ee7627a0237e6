use std::path::Path;

use hybridna::bench::BenchError;
use hybridna::data_train::TrainError;
use hybridna::finetune_eval::FinetuneError;
use hybridna::generate::GenerateError;
use hybridna::model::ModelError;
use hybridna::tokenizer::TokenizerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("{0}")]
    Run(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Run(_) => 1,
            CliError::Io(_) => 2,
            CliError::Divergence { .. } => 3,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DivergenceDetected { step, loss } => CliError::Divergence { step, loss },
            TrainError::Io(m) => CliError::Io(m),
            TrainError::InvalidPlan(_) | TrainError::NoEligibleContig { .. } => {
                CliError::Config(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(m) => CliError::Io(m),
            ModelError::InvalidConfig(_) | ModelError::InvalidInterleave(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<FinetuneError> for CliError {
    fn from(e: FinetuneError) -> Self {
        match e {
            FinetuneError::InvalidPlan(_) | FinetuneError::InvalidHead(_) => {
                CliError::Config(e.to_string())
            }
            FinetuneError::Train(t) => t.into(),
            FinetuneError::Model(m) => m.into(),
            FinetuneError::Tokenizer(t) => t.into(),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<GenerateError> for CliError {
    fn from(e: GenerateError) -> Self {
        match e {
            GenerateError::InvalidRequest(_)
            | GenerateError::EmptyPrompt
            | GenerateError::ContextOverflow { .. }
            | GenerateError::UnregisteredPrompt(_) => CliError::Config(e.to_string()),
            GenerateError::Model(m) => m.into(),
            GenerateError::Tokenizer(t) => t.into(),
            GenerateError::Metric(f) => f.into(),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::InvalidPlan(_) | BenchError::ConfigMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            BenchError::Model(m) => m.into(),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Io(m) => CliError::Io(m),
            TokenizerError::BadLabel { .. }
            | TokenizerError::UnknownName(_)
            | TokenizerError::DuplicateName(_)
            | TokenizerError::EmptyName => CliError::Config(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}
