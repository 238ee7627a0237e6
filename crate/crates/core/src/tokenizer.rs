//! Single-nucleotide tokenization with appendable prompt tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const A: u32 = 0;
pub const C: u32 = 1;
pub const G: u32 = 2;
pub const T: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;
pub const PAD: u32 = 6;
pub const UNK: u32 = 7;

/// Number of fixed tokens preceding any prompt tokens.
pub const BASE_VOCAB: usize = 8;
pub const NUCLEOTIDES: [u32; 4] = [A, C, G, T];

const FIXED_NAMES: [&str; BASE_VOCAB] = ["A", "C", "G", "T", "BOS", "EOS", "PAD", "UNK"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("illegal character {1:?} at position {0}")]
    IllegalCharacter(usize, char),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("cannot echo an empty sequence")]
    EmptySequence,
    #[error("echo input contains prompt token id {0}")]
    PromptInEcho(u32),
    #[error("prompt token {0:?} is already registered")]
    DuplicateName(String),
    #[error("prompt token name must be nonempty")]
    EmptyName,
    #[error("unknown token name {0:?}")]
    UnknownName(String),
    #[error("label {label:?} does not fit prompt prefixes {prefixes:?}")]
    BadLabel {
        label: String,
        prefixes: Vec<String>,
    },
    #[error("vocabulary file is malformed: {0}")]
    MalformedVocab(String),
    #[error("vocabulary io: {0}")]
    Io(String),
}

pub type Result<T, E = TokenizerError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    prompts: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let lookup = FIXED_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), i as u32))
            .collect();
        Vocab {
            prompts: Vec::new(),
            lookup,
        }
    }

    pub fn len(&self) -> usize {
        BASE_VOCAB + self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prompt_names(&self) -> &[String] {
        &self.prompts
    }

    pub fn is_prompt(&self, id: u32) -> bool {
        (id as usize) >= BASE_VOCAB && (id as usize) < self.len()
    }

    pub fn name(&self, id: u32) -> Result<&str> {
        let i = id as usize;
        if i < BASE_VOCAB {
            Ok(FIXED_NAMES[i])
        } else {
            self.prompts
                .get(i - BASE_VOCAB)
                .map(String::as_str)
                .ok_or(TokenizerError::UnknownId(id))
        }
    }

    pub fn id(&self, name: &str) -> Result<u32> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| TokenizerError::UnknownName(name.to_string()))
    }

    /// Appends prompt tokens; returns their new ids. Existing ids are unchanged.
    pub fn register_prompt_tokens<S: AsRef<str>>(&mut self, names: &[S]) -> Result<Vec<u32>> {
        let mut seen = std::collections::HashSet::new();
        for name in names {
            let name = name.as_ref();
            if name.is_empty() {
                return Err(TokenizerError::EmptyName);
            }
            if self.lookup.contains_key(name) || !seen.insert(name) {
                return Err(TokenizerError::DuplicateName(name.to_string()));
            }
        }
        let mut ids = Vec::with_capacity(names.len());
        for name in names {
            let id = self.len() as u32;
            self.prompts.push(name.as_ref().to_string());
            self.lookup.insert(name.as_ref().to_string(), id);
            ids.push(id);
        }
        Ok(ids)
    }

    /// Registers `prefix0..prefix{levels-1}` for every prefix, in order.
    pub fn register_label_tokens(&mut self, prefixes: &[&str], levels: usize) -> Result<Vec<u32>> {
        let names: Vec<String> = prefixes
            .iter()
            .flat_map(|p| (0..levels).map(move |d| format!("{p}{d}")))
            .collect();
        self.register_prompt_tokens(&names)
    }

    /// One prompt token per digit: `"300"` with prefixes `H,K,S` is `[H3,K0,S0]`.
    pub fn encode_label(&self, label: &str, prefixes: &[&str]) -> Result<Vec<u32>> {
        let bad = || TokenizerError::BadLabel {
            label: label.to_string(),
            prefixes: prefixes.iter().map(|s| s.to_string()).collect(),
        };
        if label.chars().count() != prefixes.len() {
            return Err(bad());
        }
        label
            .chars()
            .zip(prefixes)
            .map(|(d, p)| {
                if d.is_ascii_digit() {
                    self.id(&format!("{p}{d}")).map_err(|_| bad())
                } else {
                    Err(bad())
                }
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        encode(text)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                A | C | G | T => out.push(FIXED_NAMES[id as usize].chars().next().unwrap_or('?')),
                _ => {
                    let _ = write!(out, "[{}]", self.name(id)?);
                }
            }
        }
        Ok(out)
    }

    /// One token name per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for name in FIXED_NAMES
            .iter()
            .copied()
            .chain(self.prompts.iter().map(String::as_str))
        {
            s.push_str(name);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < BASE_VOCAB || lines[..BASE_VOCAB] != FIXED_NAMES {
            return Err(TokenizerError::MalformedVocab(
                "fixed tokens missing or reordered".into(),
            ));
        }
        let mut vocab = Vocab::new();
        vocab.register_prompt_tokens(&lines[BASE_VOCAB..])?;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| TokenizerError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        Vocab::from_text(
            &std::fs::read_to_string(path).map_err(|e| TokenizerError::Io(e.to_string()))?,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceMeta {
    pub species: Option<u32>,
    pub interval: Option<(String, u64, u64)>,
    /// Index at which the second copy of an echoed sequence begins.
    pub echo_boundary: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub meta: SequenceMeta,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence {
            ids,
            meta: SequenceMeta::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn nucleotide_id(c: char) -> Option<u32> {
    match c.to_ascii_uppercase() {
        'A' => Some(A),
        'C' => Some(C),
        'G' => Some(G),
        'T' => Some(T),
        'N' => Some(UNK),
        _ => None,
    }
}

/// Case-folded, one token per character; `N` becomes `UNK`.
pub fn encode(text: &str) -> Result<TokenSequence> {
    let ids = text
        .chars()
        .enumerate()
        .map(|(i, c)| nucleotide_id(c).ok_or(TokenizerError::IllegalCharacter(i, c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSequence::new(ids))
}

/// `x ‖ x`, recording where the second copy starts.
pub fn echo(x: &TokenSequence) -> Result<TokenSequence> {
    if x.is_empty() {
        return Err(TokenizerError::EmptySequence);
    }
    if let Some(&id) = x.ids.iter().find(|&&id| id as usize >= BASE_VOCAB) {
        return Err(TokenizerError::PromptInEcho(id));
    }
    let mut ids = Vec::with_capacity(2 * x.len());
    ids.extend_from_slice(&x.ids);
    ids.extend_from_slice(&x.ids);
    let mut meta = x.meta.clone();
    meta.echo_boundary = Some(x.len());
    Ok(TokenSequence { ids, meta })
}
