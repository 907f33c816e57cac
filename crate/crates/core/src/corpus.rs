//! Token corpora: directories of token files and a synthetic motif generator.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::tokens::read_token_file;
use crate::error::{Error, Result};

/// Training and validation sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Vec<u32>>,
    pub valid: Vec<Vec<u32>>,
}

fn token_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "tok"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_all(files: &[PathBuf]) -> Result<Vec<Vec<u32>>> {
    files.iter().map(|f| read_token_file(f)).collect()
}

impl Corpus {
    /// Reads `*.tok` files. If `dir` has `train/` and `valid/` subdirectories
    /// they are used as given; otherwise every tenth file (sorted by name) is
    /// held out for validation, and a single file serves as both.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let (train_dir, valid_dir) = (dir.join("train"), dir.join("valid"));
        let corpus = if train_dir.is_dir() && valid_dir.is_dir() {
            Self { train: read_all(&token_files(&train_dir)?)?, valid: read_all(&token_files(&valid_dir)?)? }
        } else {
            let files = token_files(dir)?;
            let seqs = read_all(&files)?;
            if seqs.len() == 1 {
                Self { train: seqs.clone(), valid: seqs }
            } else {
                let mut c = Self::default();
                for (i, s) in seqs.into_iter().enumerate() {
                    if i % 10 == 9 || (i == 1 && files.len() < 10) {
                        c.valid.push(s);
                    } else {
                        c.train.push(s);
                    }
                }
                c
            }
        };
        if corpus.train.iter().all(|s| s.len() < 2) {
            return Err(Error::Config(format!("no usable token sequences under {}", dir.display())));
        }
        Ok(corpus)
    }

    pub fn max_token(&self) -> Option<u32> {
        self.train.iter().chain(&self.valid).flatten().copied().max()
    }
}

/// Settings for [`motif_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct MotifCorpusConfig {
    pub vocab_size: usize,
    pub sequence_length: usize,
    pub min_motif: usize,
    pub max_motif: usize,
    /// Motif pitches are drawn from `0..motif_range`; transposition shifts
    /// them within the vocabulary.
    pub motif_range: usize,
}

impl Default for MotifCorpusConfig {
    fn default() -> Self {
        Self { vocab_size: 64, sequence_length: 256, min_motif: 4, max_motif: 12, motif_range: 24 }
    }
}

/// Sequences that repeat a random motif end to end, each sequence
/// transposed by a random offset. A repeat sits at a fixed distance
/// (the motif length) from its previous occurrence.
pub fn motif_corpus(cfg: &MotifCorpusConfig, count: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<usize> = (0..=cfg.vocab_size - cfg.motif_range).collect();
    (0..count)
        .map(|_| {
            let m = rng.gen_range(cfg.min_motif..=cfg.max_motif);
            let motif: Vec<usize> = (0..m).map(|_| rng.gen_range(0..cfg.motif_range)).collect();
            let shift = *shifts.choose(&mut rng).expect("non-empty shift range");
            (0..cfg.sequence_length).map(|i| (motif[i % m] + shift) as u32).collect()
        })
        .collect()
}
