//! Semantic prototypes: one text-encoder vector per class name.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::NAME_PLACEHOLDER;
use crate::data::{ClassId, ClassSpace};
use crate::error::{Error, Result};
use crate::store::Artifact;
use crate::tape::Matrix;

pub type TokenId = usize;

/// A text encoder exposing its vocabulary and token-embedding table so that
/// new tokens can be spliced into prompts.
pub trait TextEncoder {
    fn tag(&self) -> String;

    /// Output dimension `d_t`.
    fn dim(&self) -> usize;

    /// Token-embedding width.
    fn embedding_dim(&self) -> usize;

    fn vocab_size(&self) -> usize;

    fn token_id(&self, word: &str) -> Option<TokenId>;

    fn embedding(&self, id: TokenId) -> Option<&[f64]>;

    /// Encode a sequence of token embeddings (already looked up).
    fn encode_embeddings(&self, embeddings: &[&[f64]]) -> Vec<f64>;

    /// Whether `encode` may be called from several threads at once.
    fn reentrant(&self) -> bool {
        true
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        split_words(text)?
            .iter()
            .map(|w| {
                self.token_id(w)
                    .ok_or_else(|| Error::structural(format!("word {w:?} is not in the vocabulary of {}", self.tag())))
            })
            .collect()
    }

    fn encode(&self, prompt: &str) -> Result<Vec<f64>> {
        let ids = self.tokenize(prompt)?;
        let embs: Vec<&[f64]> = ids.iter().map(|&i| self.embedding(i).expect("tokenized id")).collect();
        Ok(self.encode_embeddings(&embs))
    }
}

/// Lowercase whitespace tokenization; only `[a-z0-9'-]` may appear in a word.
pub fn split_words(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        let w = w.to_lowercase();
        if let Some(c) = w.chars().find(|c| !(c.is_ascii_lowercase() || c.is_ascii_digit() || *c == '\'' || *c == '-')) {
            return Err(Error::structural(format!("cannot tokenize {w:?}: unsupported character {c:?}")));
        }
        out.push(w);
    }
    Ok(out)
}

/// `Black_footed_Albatross` → `black footed albatross`.
pub fn normalize_class_name(name: &str) -> String {
    name.replace('_', " ").to_lowercase()
}

pub(crate) fn fnv1a(seed: u64, text: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic stand-in for a pretrained text encoder: each word's embedding
/// is drawn from a generator seeded by a hash of the word, token embeddings
/// are mean-pooled and passed through a fixed random projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTextEncoder {
    seed: u64,
    vocab: BTreeMap<String, TokenId>,
    words: Vec<String>,
    table: Vec<Vec<f64>>,
    projection: Matrix,
}

impl Artifact for ToyTextEncoder {
    const KIND: &'static str = "toy-text-encoder";

    fn dims(&self) -> Vec<usize> {
        vec![self.words.len(), self.table.first().map_or(0, Vec::len)]
    }
}

impl ToyTextEncoder {
    pub fn new<I, S>(seed: u64, embedding_dim: usize, dim: usize, scale: f64, words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for w in words {
            for t in split_words(w.as_ref())? {
                set.insert(t);
            }
        }
        let words: Vec<String> = set.into_iter().collect();
        let vocab = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        let table = words
            .iter()
            .map(|w| {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, w));
                (0..embedding_dim).map(|_| normal.sample(&mut rng)).collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, "\u{0}projection"));
        let pn = Normal::new(0.0, 1.0 / (embedding_dim as f64).sqrt()).expect("std");
        let projection = Matrix::from_shape_simple_fn((embedding_dim, dim), || pn.sample(&mut rng));
        Ok(ToyTextEncoder { seed, vocab, words, table, projection })
    }

    /// Encoder whose vocabulary covers every class name plus the words of the
    /// given templates.
    pub fn for_classes(seed: u64, embedding_dim: usize, dim: usize, scale: f64, space: &ClassSpace, templates: &[&str]) -> Result<Self> {
        let mut words: Vec<String> = space.classes().iter().map(|c| normalize_class_name(&c.name)).collect();
        for t in templates {
            words.push(t.replace(NAME_PLACEHOLDER, " ").replace(crate::config::TOKEN_PLACEHOLDER, " "));
        }
        Self::new(seed, embedding_dim, dim, scale, words)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }
}

impl TextEncoder for ToyTextEncoder {
    fn tag(&self) -> String {
        format!("toy-hash-encoder(seed={},d_e={},d_t={})", self.seed, self.embedding_dim(), self.dim())
    }

    fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn embedding_dim(&self) -> usize {
        self.projection.nrows()
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn token_id(&self, word: &str) -> Option<TokenId> {
        self.vocab.get(word).copied()
    }

    fn embedding(&self, id: TokenId) -> Option<&[f64]> {
        self.table.get(id).map(Vec::as_slice)
    }

    fn encode_embeddings(&self, embeddings: &[&[f64]]) -> Vec<f64> {
        let d = self.embedding_dim();
        let mut pooled = ndarray::Array1::<f64>::zeros(d);
        for e in embeddings {
            pooled += &ndarray::ArrayView1::from(*e);
        }
        if !embeddings.is_empty() {
            pooled /= embeddings.len() as f64;
        }
        pooled.dot(&self.projection).to_vec()
    }
}

/// Cosine similarity `u·v / (|u||v|)`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::structural(format!("cosine of vectors of length {} and {}", u.len(), v.len())));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if !(nu > 0.0 && nv > 0.0) || !(nu.is_finite() && nv.is_finite()) {
        return Err(Error::Degenerate("cosine of a zero-norm or non-finite vector".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

pub fn l2_normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("cannot normalize a zero-norm vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// One un-normalized prototype per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub template: String,
    pub encoder_tag: String,
    pub dim: usize,
    entries: BTreeMap<ClassId, Vec<f64>>,
}

impl Artifact for PrototypeBank {
    const KIND: &'static str = "prototype-bank";

    fn dims(&self) -> Vec<usize> {
        vec![self.entries.len(), self.dim]
    }
}

impl PrototypeBank {
    pub fn from_entries(template: &str, encoder_tag: &str, entries: BTreeMap<ClassId, Vec<f64>>) -> Result<Self> {
        let dim = entries.values().next().map_or(0, Vec::len);
        if let Some((id, v)) = entries.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::structural(format!("prototype for {id} has dimension {} instead of {dim}", v.len())));
        }
        Ok(PrototypeBank { template: template.into(), encoder_tag: encoder_tag.into(), dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &ClassId) -> Option<&[f64]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClassId, &[f64])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn normalized(&self, id: &ClassId) -> Result<Vec<f64>> {
        let v = self.get(id).ok_or_else(|| Error::structural(format!("no prototype for class {id}")))?;
        l2_normalized(v)
    }

    /// `d_t × |subset|` matrix of unit prototypes, columns in `subset` order.
    pub fn unit_matrix(&self, subset: &[ClassId]) -> Result<Matrix> {
        if subset.is_empty() {
            return Err(Error::structural("empty class subset"));
        }
        let mut m = Matrix::zeros((self.dim, subset.len()));
        for (j, id) in subset.iter().enumerate() {
            let v = self.normalized(id)?;
            m.column_mut(j).assign(&ndarray::Array1::from(v));
        }
        Ok(m)
    }
}

pub fn render_template(template: &str, class_name: &str) -> Result<String> {
    if template.matches(NAME_PLACEHOLDER).count() != 1 {
        return Err(Error::structural(format!("template {template:?} must contain exactly one {NAME_PLACEHOLDER}")));
    }
    Ok(template.replace(NAME_PLACEHOLDER, &normalize_class_name(class_name)))
}

/// Encode `template` filled with every class name of `space`.
pub fn build_prototypes(space: &ClassSpace, encoder: &dyn TextEncoder, template: &str) -> Result<PrototypeBank> {
    let mut entries = BTreeMap::new();
    for class in space.classes() {
        let prompt = render_template(template, &class.name)?;
        let v = encoder.encode(&prompt).map_err(|e| {
            Error::structural(format!("class {} ({:?}) cannot be encoded: {e}", class.id, class.name))
        })?;
        entries.insert(class.id.clone(), v);
    }
    PrototypeBank::from_entries(template, &encoder.tag(), entries)
}
