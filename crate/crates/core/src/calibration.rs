//! Calibration token sets used for sensitivity measurement and tuning.
//!
//! Token files are raw little-endian `u32` ids with no header.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SprintError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self> {
        let Some(first) = sequences.first() else {
            return Err(SprintError::Data("calibration set needs at least one sequence".into()));
        };
        let len = first.len();
        if len == 0 || sequences.iter().any(|s| s.len() != len) {
            return Err(SprintError::Data("calibration sequences must share one positive length".into()));
        }
        Ok(CalibrationSet { sequences })
    }

    pub fn n_seqs(&self) -> usize {
        self.sequences.len()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn total_tokens(&self) -> usize {
        self.n_seqs() * self.seq_len()
    }

    /// Column layout of activations derived from this set.
    pub fn segments(&self) -> Vec<usize> {
        vec![self.seq_len(); self.n_seqs()]
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.sequences.iter().flatten().find(|&&t| t as usize >= vocab_size) {
            Some(bad) => Err(SprintError::Data(format!(
                "calibration token {bad} out of range for vocab_size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }
}

pub fn read_token_file(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(SprintError::Format(format!(
            "token file length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect())
}

pub fn write_token_file(path: impl AsRef<Path>, ids: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = ids.iter().flat_map(|t| t.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Samples `n_seqs` non-overlapping windows of `seq_len` ids from a token
/// file. The file is split into aligned windows and a seeded subset is drawn
/// without replacement; the chosen windows are kept in file order.
pub fn load_calibration(path: impl AsRef<Path>, n_seqs: usize, seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    let ids = read_token_file(path)?;
    sample_windows(&ids, n_seqs, seq_len, seed)
}

pub fn sample_windows(ids: &[u32], n_seqs: usize, seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    if n_seqs == 0 || seq_len == 0 {
        return Err(SprintError::Config("calibration needs n_seqs >= 1 and seq_len >= 1".into()));
    }
    let available = ids.len() / seq_len;
    if available < n_seqs {
        return Err(SprintError::Data(format!(
            "{} tokens hold only {available} windows of {seq_len}, need {n_seqs}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, available, n_seqs).into_vec();
    picked.sort_unstable();
    let sequences = picked.iter().map(|&w| ids[w * seq_len..(w + 1) * seq_len].to_vec()).collect();
    CalibrationSet::new(sequences)
}

/// Uniform random token ids, deterministic in `seed`.
pub fn synth_calibration(vocab_size: usize, n_seqs: usize, seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    if vocab_size == 0 || n_seqs == 0 || seq_len == 0 {
        return Err(SprintError::Config("synthetic calibration arguments must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..n_seqs)
        .map(|_| (0..seq_len).map(|_| rng.gen_range(0..vocab_size as u32)).collect())
        .collect();
    CalibrationSet::new(sequences)
}
