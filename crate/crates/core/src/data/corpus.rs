use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::generate::{generate_text, SyntheticTaskSpec};
use crate::data::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::model::hex;
use crate::numerics::{seeded, Rng64};

/// Fraction of every corpus held out for validation (taken from the tail).
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub name: String,
    pub spec: SyntheticTaskSpec,
    pub spec_hash: String,
    text: String,
    tokens: Vec<usize>,
    /// First validation token; training tokens are `[0, split)`.
    split: usize,
}

/// One batch of next-token windows, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
    /// Corpus offset of each row's first input token.
    pub starts: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Order-sensitive digest of tokens and targets.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &t in self.tokens.iter().chain(&self.targets) {
            h.update((t as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    spec: SyntheticTaskSpec,
    spec_hash: String,
    split: usize,
    len: usize,
    content_sha256: String,
}

pub fn spec_hash(spec: &SyntheticTaskSpec) -> String {
    let canonical = toml::to_string(spec).expect("spec serializes");
    hex(&Sha256::digest(canonical.as_bytes()))
}

impl Corpus {
    pub fn generate(spec: &SyntheticTaskSpec, tokenizer: &Tokenizer) -> Self {
        let text = generate_text(spec);
        Self::from_text(spec.kind.name().to_string(), spec.clone(), text, tokenizer)
    }

    fn from_text(name: String, spec: SyntheticTaskSpec, text: String, tok: &Tokenizer) -> Self {
        let tokens = tok.encode(&text);
        let split = tokens.len() - (tokens.len() as f64 * VALIDATION_FRACTION).ceil() as usize;
        Self {
            name,
            spec_hash: spec_hash(&spec),
            spec,
            text,
            tokens,
            split,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn split_offset(&self) -> usize {
        self.split
    }

    /// Half-open token range of a split.
    pub fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.split),
            Split::Validation => (self.split, self.tokens.len()),
        }
    }

    /// Infinite deterministic stream of random windows drawn from one split.
    /// Every window, including its final target, lies inside the split.
    pub fn batches(&self, split: Split, batch: usize, seq: usize, seed: u64) -> Result<BatchStream<'_>> {
        let (lo, hi) = self.range(split);
        if batch == 0 || seq == 0 || hi - lo < seq + 1 {
            return Err(Error::Contract(format!(
                "{} {:?} slice has {} tokens, need at least {} for a window",
                self.name,
                split,
                hi - lo,
                seq + 1
            )));
        }
        let label = match split {
            Split::Train => "batches/train",
            Split::Validation => "batches/validation",
        };
        Ok(BatchStream {
            corpus: self,
            lo,
            last_start: hi - seq - 1,
            batch,
            seq,
            rng: seeded(seed, label),
        })
    }

    /// Writes `<dir>/<name>.txt` and `<dir>/<name>.manifest.toml`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text_path = dir.join(format!("{}.txt", self.name));
        let manifest = Manifest {
            name: self.name.clone(),
            spec: self.spec.clone(),
            spec_hash: self.spec_hash.clone(),
            split: self.split,
            len: self.tokens.len(),
            content_sha256: hex(&Sha256::digest(self.text.as_bytes())),
        };
        let body = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&text_path, &self.text).map_err(|e| Error::io(&text_path, e))?;
        let mpath = manifest_path(dir, &self.name);
        fs::write(&mpath, body).map_err(|e| Error::io(&mpath, e))?;
        Ok(text_path)
    }

    pub fn load(dir: &Path, name: &str, tokenizer: &Tokenizer) -> Result<Self> {
        let mpath = manifest_path(dir, name);
        let raw = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = toml::from_str(&raw).map_err(|e| Error::Config(e.to_string()))?;
        let text_path = dir.join(format!("{name}.txt"));
        let text = fs::read_to_string(&text_path).map_err(|e| Error::io(&text_path, e))?;
        if hex(&Sha256::digest(text.as_bytes())) != m.content_sha256 {
            return Err(Error::Integrity(format!("{name}: corpus content hash mismatch")));
        }
        if spec_hash(&m.spec) != m.spec_hash {
            return Err(Error::Integrity(format!("{name}: spec hash mismatch")));
        }
        let c = Self::from_text(m.name, m.spec, text, tokenizer);
        if c.split != m.split || c.len() != m.len {
            return Err(Error::Integrity(format!(
                "{name}: split offsets disagree with manifest"
            )));
        }
        Ok(c)
    }
}

fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.manifest.toml"))
}

pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    lo: usize,
    last_start: usize,
    batch: usize,
    seq: usize,
    rng: Rng64,
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let (b, t) = (self.batch, self.seq);
        let mut out = Batch {
            tokens: Vec::with_capacity(b * t),
            targets: Vec::with_capacity(b * t),
            mask: vec![1.0; b * t],
            starts: Vec::with_capacity(b),
            batch: b,
            seq: t,
        };
        let toks = &self.corpus.tokens;
        for _ in 0..b {
            let s = self.rng.random_range(self.lo..=self.last_start);
            out.starts.push(s);
            out.tokens.extend_from_slice(&toks[s..s + t]);
            out.targets.extend_from_slice(&toks[s + 1..s + t + 1]);
        }
        Some(out)
    }
}
