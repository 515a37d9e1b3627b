//! Byte-level corpus handling: every byte is a token, vocabulary 256.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(bytes: &[u8]) -> Vec<u8> {
    bytes.to_vec()
}

pub fn detokenize(tokens: &[u8]) -> Vec<u8> {
    tokens.to_vec()
}

/// Reads an entire file as one byte-token stream.
pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "corpus is empty"),
        ));
    }
    Ok(tokenize(&bytes))
}

/// Splits off the trailing `val_fraction` of the stream for evaluation.
pub fn split_corpus(tokens: &[u8], val_fraction: f64) -> (&[u8], &[u8]) {
    let cut = ((tokens.len() as f64) * (1.0 - val_fraction)).round() as usize;
    tokens.split_at(cut.min(tokens.len()))
}

/// Next-token prediction batch, `[batch, len]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

/// Draws `batch` windows at uniform offsets in `[0, n - len - 1]`; targets
/// are the inputs shifted by one.
pub fn sample_batch<R: Rng + ?Sized>(tokens: &[u8], batch: usize, len: usize, rng: &mut R) -> Result<Batch> {
    if tokens.len() <= len {
        return Err(Error::Data(format!(
            "corpus of {} tokens is too short for sequences of {len}",
            tokens.len()
        )));
    }
    let max_offset = tokens.len() - len - 1;
    let mut inputs = Vec::with_capacity(batch * len);
    let mut targets = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let off = rng.random_range(0..=max_offset);
        inputs.extend(tokens[off..off + len].iter().map(|&b| b as usize));
        targets.extend(tokens[off + 1..off + len + 1].iter().map(|&b| b as usize));
    }
    Ok(Batch {
        inputs,
        targets,
        batch,
        len,
    })
}
