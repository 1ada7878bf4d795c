//! Byte-level corpus: tokenization, a train/test split, random training
//! windows and a fixed set of evaluation windows.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const BOS: u16 = 256;
pub const VOCAB: usize = 257;
pub const DEFAULT_TEST_FRACTION: f64 = 0.1;

const CACHE_TOKENS: &str = "tokens.u16";
const CACHE_SIDECAR: &str = "tokens.json";

/// Small public-domain text for tests and smoke runs.
pub const FIXTURE_TEXT: &str = include_str!("../fixtures/sonnets.txt");

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus of {len} tokens is too short for windows of {window}")]
    TooShort { len: usize, window: usize },
    #[error("token id {0} is not a byte")]
    NotByte(u16),
    #[error("invalid split fraction {0}")]
    Split(f64),
    #[error("cache at {path} is stale or corrupt: {reason}")]
    Cache { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn tokenize_bytes(text: &[u8]) -> Vec<u16> {
    text.iter().map(|&b| b as u16).collect()
}

/// Inverse of [`tokenize_bytes`]; BOS markers are dropped.
pub fn detokenize(ids: &[u16]) -> Result<Vec<u8>, DataError> {
    ids.iter()
        .filter(|&&id| id != BOS)
        .map(|&id| u8::try_from(id).map_err(|_| DataError::NotByte(id)))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Metadata stored next to the cached token stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheSidecar {
    pub digest: String,
    pub split: usize,
    pub len: usize,
    pub vocab: usize,
}

/// Token stream `BOS, bytes...` with the last `test_fraction` held out.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    tokens: Vec<u16>,
    split: usize,
    digest: String,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], test_fraction: f64) -> Result<Self, DataError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DataError::Split(test_fraction));
        }
        let mut tokens = Vec::with_capacity(bytes.len() + 1);
        tokens.push(BOS);
        tokens.extend(tokenize_bytes(bytes));
        let split = ((tokens.len() as f64) * (1.0 - test_fraction)).round() as usize;
        Ok(Self {
            tokens,
            split,
            digest: sha256_hex(bytes),
        })
    }

    pub fn fixture() -> Self {
        Self::from_bytes(FIXTURE_TEXT.as_bytes(), DEFAULT_TEST_FRACTION).expect("valid fraction")
    }

    pub fn load(path: &Path, test_fraction: f64) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, test_fraction)
    }

    /// Loads `path`, reusing the token cache in `cache_dir` when its digest
    /// and split still match, and (re)writing it otherwise.
    pub fn load_cached(path: &Path, test_fraction: f64, cache_dir: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let digest = sha256_hex(&bytes);
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DataError::Split(test_fraction));
        }
        if let Ok(c) = Self::read_cache(cache_dir) {
            let want_split = (((bytes.len() + 1) as f64) * (1.0 - test_fraction)).round() as usize;
            if c.digest == digest && c.split == want_split {
                return Ok(c);
            }
        }
        let c = Self::from_bytes(&bytes, test_fraction)?;
        c.write_cache(cache_dir)?;
        Ok(c)
    }

    pub fn write_cache(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let bin = dir.join(CACHE_TOKENS);
        let payload: Vec<u8> = self.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        fs::write(&bin, payload).map_err(io_err(&bin))?;
        let side = dir.join(CACHE_SIDECAR);
        let meta = CacheSidecar {
            digest: self.digest.clone(),
            split: self.split,
            len: self.tokens.len(),
            vocab: VOCAB,
        };
        let json = serde_json::to_vec_pretty(&meta).expect("sidecar serializes");
        fs::write(&side, json).map_err(io_err(&side))
    }

    pub fn read_cache(dir: &Path) -> Result<Self, DataError> {
        let side = dir.join(CACHE_SIDECAR);
        let stale = |reason: String| DataError::Cache {
            path: dir.to_path_buf(),
            reason,
        };
        let meta: CacheSidecar = serde_json::from_slice(&fs::read(&side).map_err(io_err(&side))?)
            .map_err(|e| stale(e.to_string()))?;
        let bin = dir.join(CACHE_TOKENS);
        let raw = fs::read(&bin).map_err(io_err(&bin))?;
        if raw.len() != 2 * meta.len || meta.split > meta.len || meta.vocab != VOCAB {
            return Err(stale(format!("{} bytes for {} tokens", raw.len(), meta.len)));
        }
        let tokens: Vec<u16> = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB) {
            return Err(stale(format!("token {bad} out of range")));
        }
        if sha256_hex(&detokenize(&tokens)?) != meta.digest {
            return Err(stale("digest mismatch".into()));
        }
        Ok(Self {
            tokens,
            split: meta.split,
            digest: meta.digest,
        })
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// First test-token offset; `[0, split)` is the train region.
    pub fn split(&self) -> usize {
        self.split
    }

    /// SHA-256 of the source bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn train(&self) -> &[u16] {
        &self.tokens[..self.split]
    }

    pub fn test(&self) -> &[u16] {
        &self.tokens[self.split..]
    }

    /// `batch_size` windows of `seq_len + 1` tokens drawn uniformly from the
    /// train region.
    pub fn next_batch<R: Rng>(&self, rng: &mut R, batch_size: usize, seq_len: usize) -> Result<Batch, DataError> {
        let window = seq_len + 1;
        let train = self.train();
        if train.len() < window {
            return Err(DataError::TooShort {
                len: train.len(),
                window,
            });
        }
        let mut tokens = Vec::with_capacity(batch_size * window);
        let mut starts = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let s = rng.random_range(0..=train.len() - window);
            starts.push(s);
            tokens.extend_from_slice(&train[s..s + window]);
        }
        Ok(Batch {
            tokens,
            starts,
            batch_size,
            seq_len,
        })
    }

    /// Up to `count` windows of `seq_len + 1` tokens spread evenly over the
    /// test region; the same corpus always yields the same windows.
    pub fn test_windows(&self, seq_len: usize, count: usize) -> Result<Vec<Vec<u16>>, DataError> {
        let window = seq_len + 1;
        let test = self.test();
        if test.len() < window {
            return Err(DataError::TooShort {
                len: test.len(),
                window,
            });
        }
        let fit = test.len() / window;
        let n = count.clamp(1, fit);
        let stride = test.len() / n;
        Ok((0..n)
            .map(|i| test[i * stride..i * stride + window].to_vec())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `batch_size x (seq_len + 1)`, row-major.
    pub tokens: Vec<u16>,
    /// Window offsets into the train region.
    pub starts: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Builds a batch from explicit windows of equal length.
    pub fn from_windows(windows: &[Vec<u16>]) -> Self {
        let seq_len = windows.first().map_or(1, Vec::len) - 1;
        Self {
            tokens: windows.iter().flatten().copied().collect(),
            starts: Vec::new(),
            batch_size: windows.len(),
            seq_len,
        }
    }

    fn column_range(&self, from: usize) -> Vec<usize> {
        let w = self.seq_len + 1;
        self.tokens
            .chunks_exact(w)
            .flat_map(|row| row[from..from + self.seq_len].iter().map(|&t| t as usize))
            .collect()
    }

    /// Columns `[0, seq_len)` of every row.
    pub fn inputs(&self) -> Vec<usize> {
        self.column_range(0)
    }

    /// Columns `[1, seq_len]` of every row.
    pub fn targets(&self) -> Vec<usize> {
        self.column_range(1)
    }
}
