//! CBOW app embeddings with negative sampling.
//!
//! Each user's time-ordered app sequence is one sentence. For every center
//! position the context vector is the mean of the in-vocabulary neighbours
//! within `window` positions on either side, and the center app is scored
//! against `negatives` samples from the unigram^0.75 distribution. Training
//! is single-threaded so a seed fully determines the result.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

const MAGIC: &[u8; 8] = b"APPEMB01";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    apps: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Counts every token and keeps apps seen at least `min_count` times,
    /// in first-seen order.
    pub fn build<S: AsRef<str>>(corpora: &[&[S]], min_count: u64) -> Result<Vocab> {
        if min_count == 0 {
            return Err(Error::Embedding("min_count must be >= 1".into()));
        }
        let mut order: Vec<String> = Vec::new();
        let mut tally: HashMap<&str, u64> = HashMap::new();
        for sentence in corpora {
            for token in sentence.iter() {
                let token = token.as_ref();
                let count = tally.entry(token).or_insert(0);
                if *count == 0 {
                    order.push(token.to_string());
                }
                *count += 1;
            }
        }
        let (apps, counts): (Vec<String>, Vec<u64>) = order
            .into_iter()
            .map(|a| {
                let c = tally[a.as_str()];
                (a, c)
            })
            .filter(|&(_, c)| c >= min_count)
            .unzip();
        if apps.is_empty() {
            return Err(Error::Embedding("empty vocabulary".into()));
        }
        Ok(Self::from_parts(apps, counts))
    }

    fn from_parts(apps: Vec<String>, counts: Vec<u64>) -> Vocab {
        let index = apps.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Vocab { apps, counts, index }
    }

    pub fn len(&self) -> usize {
        self.apps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apps.is_empty()
    }

    pub fn apps(&self) -> &[String] {
        &self.apps
    }

    pub fn index_of(&self, app: &str) -> Option<usize> {
        self.index.get(app).copied()
    }

    pub fn count(&self, app: &str) -> Option<u64> {
        self.index_of(app).map(|i| self.counts[i])
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub lr_start: f32,
    pub lr_end: f32,
    pub min_count: u64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            window: 3,
            epochs: 15,
            negatives: 5,
            lr_start: 0.025,
            lr_end: 0.0001,
            min_count: 1,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Embedding("dim must be > 0".into()));
        }
        if self.window == 0 {
            return Err(Error::Embedding("window must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Embedding("epochs must be > 0".into()));
        }
        if self.min_count == 0 {
            return Err(Error::Embedding("min_count must be >= 1".into()));
        }
        if !(self.lr_start.is_finite() && self.lr_end.is_finite())
            || self.lr_start <= 0.0
            || self.lr_end < 0.0
        {
            return Err(Error::Embedding("learning rates must be finite and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub vocab: Vocab,
    pub config: EmbeddingConfig,
    /// `|V| x dim`, row-major.
    vectors: Vec<f32>,
    /// Mean negative-sampling loss per epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EmbeddingConfig,
    apps: Vec<String>,
    counts: Vec<u64>,
    rows: usize,
    dim: usize,
    epoch_losses: Vec<f64>,
}

impl EmbeddingModel {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn row(&self, index: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors[index * d..(index + 1) * d]
    }

    /// Vector of an in-vocabulary app, `None` for unknown apps.
    pub fn lookup(&self, app: &str) -> Option<&[f32]> {
        self.vocab.index_of(app).map(|i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim())
    }

    /// Same vocabulary, rows reassigned by a seeded uniform permutation:
    /// row `i` of the result is row `permutation(|V|, seed)[i]` of `self`.
    pub fn permute_embeddings(&self, seed: u64) -> EmbeddingModel {
        let perm = permutation(self.vocab.len(), seed);
        let d = self.dim();
        let mut vectors = Vec::with_capacity(self.vectors.len());
        for &src in &perm {
            vectors.extend_from_slice(&self.vectors[src * d..(src + 1) * d]);
        }
        EmbeddingModel {
            vectors,
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            apps: self.vocab.apps.clone(),
            counts: self.vocab.counts.clone(),
            rows: self.vocab.len(),
            dim: self.dim(),
            epoch_losses: self.epoch_losses.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + self.vectors.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingModel> {
        let bad = |m: &str| Error::Embedding(format!("model file: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + header_len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.apps.len() != header.rows || header.counts.len() != header.rows {
            return Err(bad("vocabulary size does not match row count"));
        }
        if header.dim != header.config.dim || header.dim == 0 {
            return Err(bad("dimension mismatch"));
        }
        let matrix = &bytes[16 + header_len..];
        if matrix.len() != header.rows * header.dim * 4 {
            return Err(bad("matrix byte length does not match rows x dim"));
        }
        let vectors = matrix
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(EmbeddingModel {
            vocab: Vocab::from_parts(header.apps, header.counts),
            config: header.config,
            vectors,
            epoch_losses: header.epoch_losses,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EmbeddingModel> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Uniform random permutation of `0..n` drawn from `seed`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from(seed));
    perm
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log(sigmoid(x))`, computed stably.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

struct NegativeSampler {
    cumulative: Vec<f64>,
}

impl NegativeSampler {
    fn new(counts: &[u64]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

/// Trains CBOW embeddings over `corpora` (one sentence per entry).
pub fn train_cbow<S: AsRef<str>>(corpora: &[&[S]], config: &EmbeddingConfig) -> Result<EmbeddingModel> {
    config.validate()?;
    let vocab = Vocab::build(corpora, config.min_count)?;
    let dim = config.dim;
    let n = vocab.len();
    let mut rng = rng_from(config.seed);

    let mut input: Vec<f32> = (0..n * dim)
        .map(|_| (rng.random::<f32>() - 0.5) / dim as f32)
        .collect();
    let mut output = vec![0f32; n * dim];
    let sampler = NegativeSampler::new(&vocab.counts);

    let sentences: Vec<Vec<usize>> = corpora
        .iter()
        .map(|s| s.iter().filter_map(|t| vocab.index_of(t.as_ref())).collect())
        .collect();
    let tokens: usize = sentences.iter().map(Vec::len).sum();
    let total_updates = (config.epochs * tokens).max(1) as f64;

    let mut context = vec![0f32; dim];
    let mut grad = vec![0f32; dim];
    let mut processed = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let mut loss_sum = 0.0f64;
        let mut loss_terms = 0usize;
        for sentence in &sentences {
            for (pos, &center) in sentence.iter().enumerate() {
                let progress = processed as f64 / total_updates;
                let lr = config.lr_start - (config.lr_start - config.lr_end) * progress as f32;
                processed += 1;

                let lo = pos.saturating_sub(config.window);
                let hi = (pos + config.window + 1).min(sentence.len());
                let mut members = 0usize;
                context.iter_mut().for_each(|c| *c = 0.0);
                for (j, &word) in sentence[lo..hi].iter().enumerate() {
                    if lo + j == pos {
                        continue;
                    }
                    let row = &input[word * dim..(word + 1) * dim];
                    context.iter_mut().zip(row).for_each(|(c, v)| *c += v);
                    members += 1;
                }
                if members == 0 {
                    continue;
                }
                let inv = 1.0 / members as f32;
                context.iter_mut().for_each(|c| *c *= inv);
                grad.iter_mut().for_each(|g| *g = 0.0);

                for k in 0..=config.negatives {
                    let (target, label) = if k == 0 {
                        (center, 1.0f32)
                    } else {
                        let t = sampler.sample(&mut rng);
                        if t == center {
                            continue;
                        }
                        (t, 0.0f32)
                    };
                    let out_row = &mut output[target * dim..(target + 1) * dim];
                    let score: f32 = context.iter().zip(out_row.iter()).map(|(a, b)| a * b).sum();
                    let signed = if label > 0.0 { score } else { -score };
                    loss_sum += neg_log_sigmoid(signed as f64);
                    let g = (label - sigmoid(score)) * lr;
                    for ((gr, o), c) in grad.iter_mut().zip(out_row.iter_mut()).zip(&context) {
                        *gr += g * *o;
                        *o += g * c;
                    }
                }
                loss_terms += 1;

                for (j, &word) in sentence[lo..hi].iter().enumerate() {
                    if lo + j == pos {
                        continue;
                    }
                    let row = &mut input[word * dim..(word + 1) * dim];
                    row.iter_mut().zip(&grad).for_each(|(v, g)| *v += g);
                }
            }
        }
        epoch_losses.push(if loss_terms == 0 {
            0.0
        } else {
            loss_sum / loss_terms as f64
        });
    }

    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::Embedding("training diverged to non-finite values".into()));
    }
    Ok(EmbeddingModel {
        vocab,
        config: config.clone(),
        vectors: input,
        epoch_losses,
    })
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}
