use std::path::PathBuf;

use clap::Args;
use hybridna::tokenizer::Vocab;

use crate::error::{CliError, Result};

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// Vocabulary file (one token name per line) for prompt tokens.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Treat inputs as space-separated ids and print text.
    #[arg(long)]
    pub decode: bool,
    /// Sequences, or id lists with --decode.
    #[arg(required = true)]
    pub inputs: Vec<String>,
}

pub fn run(args: &TokenizeArgs) -> Result<()> {
    let vocab = match &args.vocab {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::io(p, "no such file"));
            }
            Vocab::load(p)?
        }
        None => Vocab::new(),
    };
    for input in &args.inputs {
        if args.decode {
            let ids = input
                .split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| CliError::Config(format!("{t:?} is not a token id")))
                })
                .collect::<Result<Vec<_>>>()?;
            println!("{}", vocab.decode(&ids)?);
        } else {
            let seq = vocab.encode(input)?;
            let ids: Vec<String> = seq.ids.iter().map(u32::to_string).collect();
            println!("{}", ids.join(" "));
        }
    }
    Ok(())
}
