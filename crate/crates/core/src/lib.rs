//! Hybrid Transformer/Mamba2 decoder for nucleotide sequences.

pub mod bench;
pub mod blocks;
pub mod data_train;
pub mod finetune_eval;
pub mod generate;
pub mod model;
pub mod numerics;
pub mod ssd;
pub mod tokenizer;
