//! Planted-motif datasets for classification and activity-conditioned
//! generation.

use serde::{Deserialize, Serialize};

use super::{FinetuneError, Label, LabeledExample, Result};
use crate::generate::motif_count;
use crate::numerics::Rng;
use crate::tokenizer::{self, Vocab};

const BASES: [char; 4] = ['A', 'C', 'G', 'T'];

fn background(rng: &mut Rng, len: usize) -> String {
    (0..len).map(|_| BASES[rng.below(4)]).collect()
}

fn plant(rng: &mut Rng, seq: &mut String, motif: &str) {
    let at = rng.below(seq.len() - motif.len() + 1);
    seq.replace_range(at..at + motif.len(), motif);
}

/// Binary task: class 1 sequences carry `motif` at a random offset, class 0
/// sequences contain it nowhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotifTask {
    pub length: usize,
    pub motif: String,
}

impl MotifTask {
    fn validate(&self) -> Result<()> {
        if self.motif.is_empty() || self.motif.len() > self.length {
            return Err(FinetuneError::InvalidPlan(format!(
                "motif {:?} does not fit length {}",
                self.motif, self.length
            )));
        }
        tokenizer::encode(&self.motif)?;
        Ok(())
    }

    /// `n` examples with alternating labels, starting with class 0.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Vec<LabeledExample>> {
        self.validate()?;
        (0..n)
            .map(|i| {
                let class = i % 2;
                let seq = loop {
                    let mut s = background(rng, self.length);
                    if class == 1 {
                        plant(rng, &mut s, &self.motif);
                        break s;
                    }
                    if motif_count(&s, &self.motif) == 0 {
                        break s;
                    }
                };
                Ok(LabeledExample {
                    sequence: tokenizer::encode(&seq)?,
                    label: Label::Class(class),
                })
            })
            .collect()
    }
}

/// Activity levels from motif copy number: a sequence with `c` occurrences
/// gets level `min(c / per_level, levels - 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivityTask {
    pub length: usize,
    pub motif: String,
    /// Plantings per sequence are uniform on `0..max_plants`.
    pub max_plants: usize,
    pub per_level: usize,
    pub levels: usize,
}

impl ActivityTask {
    fn validate(&self) -> Result<()> {
        if self.motif.is_empty() || self.motif.len() > self.length {
            return Err(FinetuneError::InvalidPlan(format!(
                "motif {:?} does not fit length {}",
                self.motif, self.length
            )));
        }
        if self.max_plants == 0 || self.per_level == 0 || !(1..=10).contains(&self.levels) {
            return Err(FinetuneError::InvalidPlan(
                "max_plants and per_level must be positive and levels in 1..=10".into(),
            ));
        }
        tokenizer::encode(&self.motif)?;
        Ok(())
    }

    pub fn level(&self, seq: &str) -> usize {
        (motif_count(seq, &self.motif) / self.per_level).min(self.levels - 1)
    }

    /// `(level, sequence)` pairs.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Vec<(usize, String)>> {
        self.validate()?;
        Ok((0..n)
            .map(|_| {
                let mut s = background(rng, self.length);
                for _ in 0..rng.below(self.max_plants) {
                    plant(rng, &mut s, &self.motif);
                }
                (self.level(&s), s)
            })
            .collect())
    }

    /// Registers one prompt token per level under `prefix` and labels each
    /// pair with its level token.
    pub fn to_examples(
        &self,
        pairs: &[(usize, String)],
        vocab: &Vocab,
        prefix: &str,
    ) -> Result<Vec<LabeledExample>> {
        pairs
            .iter()
            .map(|(level, seq)| {
                Ok(LabeledExample {
                    sequence: tokenizer::encode(seq)?,
                    label: Label::Prompt(vocab.encode_label(&level.to_string(), &[prefix])?),
                })
            })
            .collect()
    }
}
