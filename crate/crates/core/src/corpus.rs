//! Byte-level corpus ingestion.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FalconError, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| FalconError::Vocabulary {
                token: t,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

/// A text file split into line-delimited sequences with a seeded
/// train/validation split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub source: PathBuf,
    pub bytes: Vec<u8>,
    /// Byte ranges of the sequences, each including its trailing newline.
    pub sequences: Vec<Range<usize>>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, source: PathBuf, split_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&split_ratio) {
            return Err(FalconError::Validation(format!(
                "split ratio {split_ratio} is outside [0, 1]"
            )));
        }
        if bytes.iter().all(u8::is_ascii_whitespace) {
            return Err(FalconError::Ingestion {
                path: source.clone(),
                message: "corpus is empty".into(),
            });
        }
        let mut sequences = Vec::new();
        let mut start = 0;
        for (i, &b) in bytes.iter().enumerate() {
            if b == b'\n' {
                if i > start {
                    sequences.push(start..i + 1);
                }
                start = i + 1;
            }
        }
        if start < bytes.len() {
            sequences.push(start..bytes.len());
        }
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((sequences.len() as f64) * split_ratio).round() as usize;
        let valid = order.split_off(n_train);
        Ok(Corpus {
            source,
            bytes,
            sequences,
            train: order,
            valid,
        })
    }

    pub fn sequence(&self, i: usize) -> &[u8] {
        &self.bytes[self.sequences[i].clone()]
    }

    /// Training sequences concatenated, as tokens.
    pub fn train_tokens(&self) -> Vec<u32> {
        self.train.iter().flat_map(|&i| tokenize(self.sequence(i))).collect()
    }

    pub fn valid_tokens(&self) -> Vec<u32> {
        self.valid.iter().flat_map(|&i| tokenize(self.sequence(i))).collect()
    }

    pub fn stats(&self) -> String {
        format!(
            "{}: {} bytes, {} sequences ({} train, {} valid)",
            self.source.display(),
            self.bytes.len(),
            self.sequences.len(),
            self.train.len(),
            self.valid.len()
        )
    }
}

pub fn ingest_corpus(path: &Path, split_ratio: f64, seed: u64) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| FalconError::Ingestion {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Corpus::from_bytes(bytes, path.to_path_buf(), split_ratio, seed)
}
