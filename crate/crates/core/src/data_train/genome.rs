use std::path::Path;

use crate::numerics::Rng;
use crate::tokenizer::{self, TokenSequence, BOS};

use super::{Result, TrainError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contig {
    pub name: String,
    pub species: u32,
    /// Uppercase `A`, `C`, `G`, `T` or `N`.
    pub sequence: String,
}

/// Contigs available for window sampling.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenomeStore {
    pub contigs: Vec<Contig>,
}

const IUPAC_AMBIGUOUS: &str = "RYSWKMBDHV";

impl GenomeStore {
    pub fn new(contigs: Vec<Contig>) -> Self {
        GenomeStore { contigs }
    }

    pub fn total_len(&self) -> usize {
        self.contigs.iter().map(|c| c.sequence.len()).sum()
    }

    pub fn longest(&self) -> usize {
        self.contigs
            .iter()
            .map(|c| c.sequence.len())
            .max()
            .unwrap_or(0)
    }

    /// Parses FASTA text. Header lines start with `>` and name the contig by
    /// their first word; ambiguity codes other than `N` are stored as `N`.
    pub fn parse_fasta(text: &str, species: u32) -> Result<GenomeStore> {
        let mut contigs: Vec<Contig> = Vec::new();
        let mut any = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            any = true;
            if let Some(header) = line.strip_prefix('>') {
                let name = header.split_whitespace().next().unwrap_or("").to_string();
                if name.is_empty() {
                    return Err(TrainError::MalformedFasta(i + 1));
                }
                contigs.push(Contig {
                    name,
                    species,
                    sequence: String::new(),
                });
                continue;
            }
            let contig = contigs
                .last_mut()
                .ok_or(TrainError::MalformedFasta(i + 1))?;
            for c in line.chars() {
                let u = c.to_ascii_uppercase();
                let folded = match u {
                    'A' | 'C' | 'G' | 'T' | 'N' => u,
                    _ if IUPAC_AMBIGUOUS.contains(u) => 'N',
                    _ => return Err(TrainError::MalformedFasta(i + 1)),
                };
                contig.sequence.push(folded);
            }
        }
        if !any {
            return Err(TrainError::EmptyFile);
        }
        Ok(GenomeStore { contigs })
    }

    pub fn ingest_fasta(path: &Path) -> Result<GenomeStore> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        GenomeStore::parse_fasta(&text, 0)
    }

    /// Number of windows of `len` bases fully inside each contig.
    pub fn eligible_counts(&self, len: usize) -> Vec<usize> {
        self.contigs
            .iter()
            .map(|c| (c.sequence.len() + 1).saturating_sub(len.max(1)))
            .collect()
    }

    /// Draws one window of `len` bases uniformly over all eligible
    /// positions; returns `(contig index, start)`.
    pub fn sample_window(&self, rng: &mut Rng, len: usize) -> Result<(usize, usize)> {
        let counts = self.eligible_counts(len);
        let total: usize = counts.iter().sum();
        if total == 0 || len == 0 {
            return Err(TrainError::NoEligibleContig {
                context_len: len,
                longest: self.longest(),
            });
        }
        let mut pick = rng.below(total);
        for (i, &c) in counts.iter().enumerate() {
            if pick < c {
                return Ok((i, pick));
            }
            pick -= c;
        }
        unreachable!("pick is below the total count")
    }

    /// `batch` sequences of `BOS` followed by a `context_len`-base window.
    pub fn sample_batch(
        &self,
        rng: &mut Rng,
        batch: usize,
        context_len: usize,
    ) -> Result<Vec<TokenSequence>> {
        (0..batch)
            .map(|_| {
                let (ci, start) = self.sample_window(rng, context_len)?;
                let contig = &self.contigs[ci];
                let window = &contig.sequence[start..start + context_len];
                let mut seq =
                    tokenizer::encode(window).map_err(|e| TrainError::Data(e.to_string()))?;
                seq.ids.insert(0, BOS);
                seq.meta.species = Some(contig.species);
                seq.meta.interval = Some((
                    contig.name.clone(),
                    start as u64,
                    (start + context_len) as u64,
                ));
                Ok(seq)
            })
            .collect()
    }
}

/// Contigs made of `unit` repeated to `len` bases.
pub fn repeated_corpus(unit: &str, contigs: usize, len: usize) -> GenomeStore {
    let contigs = (0..contigs)
        .map(|i| Contig {
            name: format!("repeat{i}"),
            species: 0,
            sequence: unit.chars().cycle().take(len).collect(),
        })
        .collect();
    GenomeStore { contigs }
}

/// First-order Markov genome with `motif` planted at a fraction of
/// positions.
pub fn synthetic_genome(
    rng: &mut Rng,
    contigs: usize,
    len: usize,
    motif: &str,
    motif_rate: f64,
) -> GenomeStore {
    let bases = ['A', 'C', 'G', 'T'];
    let transitions: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..4).map(|_| rng.uniform_range(0.5, 1.5)).collect())
        .collect();
    let contigs = (0..contigs)
        .map(|i| {
            let mut seq = String::with_capacity(len);
            let mut prev = rng.below(4);
            while seq.len() < len {
                if !motif.is_empty() && rng.uniform() < motif_rate && seq.len() + motif.len() <= len
                {
                    seq.push_str(motif);
                    prev = bases
                        .iter()
                        .position(|&b| Some(b) == motif.chars().last())
                        .unwrap_or(0);
                    continue;
                }
                prev = rng.weighted(&transitions[prev]);
                seq.push(bases[prev]);
            }
            Contig {
                name: format!("syn{i}"),
                species: 0,
                sequence: seq,
            }
        })
        .collect();
    GenomeStore { contigs }
}
