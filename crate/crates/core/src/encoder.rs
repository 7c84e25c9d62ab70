//! Frozen toy text encoder.
//!
//! The pipeline for a prompt of `S` slots is
//!
//! ```text
//! e_k = E(token_k) or v_m          (fixed token row or learnable context row)
//! u   = (1/S) Σ_k (e_k + pos_k)    (positional rows only for the MLP architecture)
//! o   = W₂ tanh(W₁ u + b₁) + b₂
//! z   = o / ||o||
//! ```
//!
//! The identity architecture skips positions and the MLP (`o = u`), which makes
//! it possible to inject exact embeddings for test geometry.
//!
//! Initialisation, all from one seeded stream per tensor:
//! token rows `N(0, 1)`, positional rows `N(0, 1/√d)`, and `W₁, b₁`
//! (`W₂, b₂`) with standard deviation `1/√fan-in`.

use std::collections::BTreeMap;
use std::hash::Hasher;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, SeededRng, Vector};
use crate::prompting::ContextMatrix;

pub const MLP_ARCHITECTURE_ID: &str = "meanpool-tanh-mlp-v1";
pub const IDENTITY_ARCHITECTURE_ID: &str = "meanpool-identity-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureKind {
    Mlp,
    Identity,
}

impl ArchitectureKind {
    pub fn id(self) -> &'static str {
        match self {
            ArchitectureKind::Mlp => MLP_ARCHITECTURE_ID,
            ArchitectureKind::Identity => IDENTITY_ARCHITECTURE_ID,
        }
    }

    fn from_id(id: &str) -> Result<Self> {
        match id {
            MLP_ARCHITECTURE_ID => Ok(ArchitectureKind::Mlp),
            IDENTITY_ARCHITECTURE_ID => Ok(ArchitectureKind::Identity),
            other => Err(Error::Config(format!("unknown encoder architecture '{other}'"))),
        }
    }
}

/// Everything needed to rebuild an encoder bit-for-bit from its seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: ArchitectureKind,
    pub seed: u64,
    pub vocab_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub lowercase: bool,
}

impl EncoderConfig {
    pub fn mlp(dim: usize, seed: u64) -> Self {
        Self {
            architecture: ArchitectureKind::Mlp,
            seed,
            vocab_size: 4096,
            dim,
            hidden: 2 * dim,
            max_len: 32,
            lowercase: true,
        }
    }

    pub fn identity(dim: usize, seed: u64) -> Self {
        Self { architecture: ArchitectureKind::Identity, ..Self::mlp(dim, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.hidden == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Whitespace/punctuation splitter with FNV-1a (64-bit) token hashing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
    lowercase: bool,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize, lowercase: bool, max_len: usize) -> Self {
        assert!(vocab_size > 0 && max_len > 0);
        Self { vocab_size, lowercase, max_len }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn words(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase { text.to_lowercase() } else { text.to_string() };
        text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn token_id(&self, word: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(word.as_bytes());
        (h.finish() % self.vocab_size as u64) as usize
    }

    /// Token ids for `text`, truncated to the maximum sequence length.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> =
            self.words(text).iter().take(self.max_len).map(|w| self.token_id(w)).collect();
        if ids.is_empty() {
            return Err(Error::Input(format!("text '{text}' has no tokens")));
        }
        Ok(ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Row `m` of the context matrix.
    Learnable(usize),
    /// A frozen token id.
    Fixed(usize),
}

/// The slot sequence fed to the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTokens {
    slots: Vec<Slot>,
}

impl PromptTokens {
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::Shape("prompt has no slots".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &slots {
            if let Slot::Learnable(m) = s {
                if !seen.insert(*m) {
                    return Err(Error::Shape(format!("learnable slot {m} repeated")));
                }
            }
        }
        Ok(Self { slots })
    }

    /// `[v₀ … v_{M-1}, tokens…]`, truncating tokens so the total fits `max_len`.
    pub fn with_context(context_len: usize, tokens: &[usize], max_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("prompt needs at least one fixed token".into()));
        }
        if context_len >= max_len {
            return Err(Error::Config(format!(
                "context length {context_len} leaves no room for tokens within {max_len} slots"
            )));
        }
        let room = max_len - context_len;
        let slots = (0..context_len)
            .map(Slot::Learnable)
            .chain(tokens.iter().take(room).map(|&t| Slot::Fixed(t)))
            .collect();
        Self::new(slots)
    }

    pub fn fixed(tokens: &[usize]) -> Result<Self> {
        Self::new(tokens.iter().map(|&t| Slot::Fixed(t)).collect())
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn has_learnable(&self) -> bool {
        self.slots.iter().any(|s| matches!(s, Slot::Learnable(_)))
    }
}

#[derive(Clone, Debug)]
struct MlpWeights<T> {
    positional: Matrix<T>,
    w1: Matrix<T>,
    b1: Vec<T>,
    w2: Matrix<T>,
    b2: Vec<T>,
}

#[derive(Clone, Debug)]
enum Architecture<T> {
    Mlp(MlpWeights<T>),
    Identity,
}

/// Frozen tokenizer, token table and sequence encoder. Weights are fixed at
/// construction; no method hands out mutable access.
#[derive(Clone, Debug)]
pub struct TextEncoder<T> {
    config: EncoderConfig,
    tokenizer: Tokenizer,
    token_table: Matrix<T>,
    arch: Architecture<T>,
}

/// Forward intermediates kept for the vector-Jacobian product.
#[derive(Clone, Debug)]
pub struct EncodeTrace<T> {
    learnable: Vec<usize>,
    slot_count: usize,
    hidden: Vec<T>,
    out_norm: T,
    output: Vector<T>,
}

impl<T: Scalar> EncodeTrace<T> {
    pub fn output(&self) -> &Vector<T> {
        &self.output
    }

    pub fn has_learnable(&self) -> bool {
        !self.learnable.is_empty()
    }

    pub fn learnable_slots(&self) -> &[usize] {
        &self.learnable
    }
}

impl<T: Scalar> TextEncoder<T> {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let root = SeededRng::new(config.seed);
        let d = config.dim;
        let token_table = Matrix::random_normal(config.vocab_size, d, 1.0, &mut root.stream(1));
        let arch = match config.architecture {
            ArchitectureKind::Identity => Architecture::Identity,
            ArchitectureKind::Mlp => {
                let h = config.hidden;
                let in_std = 1.0 / (d as f64).sqrt();
                let hid_std = 1.0 / (h as f64).sqrt();
                let b1 = Matrix::<T>::random_normal(1, h, in_std, &mut root.stream(4));
                let b2 = Matrix::<T>::random_normal(1, d, hid_std, &mut root.stream(6));
                Architecture::Mlp(MlpWeights {
                    positional: Matrix::random_normal(config.max_len, d, in_std, &mut root.stream(2)),
                    w1: Matrix::random_normal(h, d, in_std, &mut root.stream(3)),
                    b1: b1.as_slice().to_vec(),
                    w2: Matrix::random_normal(d, h, hid_std, &mut root.stream(5)),
                    b2: b2.as_slice().to_vec(),
                })
            }
        };
        Ok(Self { tokenizer: Self::tokenizer_for(&config), config, token_table, arch })
    }

    /// Builds an encoder and then overwrites the token rows of the given
    /// single-token words. Each word must hash to a distinct row.
    pub fn with_injected_tokens(config: EncoderConfig, words: &[(&str, Vector<T>)]) -> Result<Self> {
        let mut enc = Self::new(config)?;
        let mut used = BTreeMap::new();
        for (word, v) in words {
            if v.len() != enc.dim() {
                return Err(Error::Shape(format!("injected vector for '{word}' has length {}", v.len())));
            }
            let ids = enc.tokenizer.tokenize(word)?;
            if ids.len() != 1 {
                return Err(Error::Input(format!("injected word '{word}' must be a single token")));
            }
            if let Some(prev) = used.insert(ids[0], *word) {
                if prev != *word {
                    return Err(Error::Input(format!("injected words '{prev}' and '{word}' share a token row")));
                }
            }
            enc.token_table.row_mut(ids[0]).copy_from_slice(v.as_slice());
        }
        Ok(enc)
    }

    fn tokenizer_for(config: &EncoderConfig) -> Tokenizer {
        Tokenizer::new(config.vocab_size, config.lowercase, config.max_len)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn architecture_id(&self) -> &'static str {
        self.config.architecture.id()
    }

    pub fn token_row(&self, id: usize) -> &[T] {
        self.token_table.row(id)
    }

    pub fn encode(&self, prompt: &PromptTokens, context: &ContextMatrix<T>) -> Result<Vector<T>> {
        Ok(self.encode_traced(prompt, context)?.output)
    }

    /// Encodes a prompt with no learnable slots.
    pub fn encode_fixed(&self, prompt: &PromptTokens) -> Result<Vector<T>> {
        if prompt.has_learnable() {
            return Err(Error::Shape("prompt references learnable slots but no context was given".into()));
        }
        Ok(self.forward(prompt, None)?.output)
    }

    pub fn encode_traced(&self, prompt: &PromptTokens, context: &ContextMatrix<T>) -> Result<EncodeTrace<T>> {
        if context.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "context dimension {} does not match encoder dimension {}",
                context.dim(),
                self.dim()
            )));
        }
        self.forward(prompt, Some(context))
    }

    fn forward(&self, prompt: &PromptTokens, context: Option<&ContextMatrix<T>>) -> Result<EncodeTrace<T>> {
        let d = self.dim();
        let s = prompt.len();
        if s > self.config.max_len {
            return Err(Error::Shape(format!("prompt of {s} slots exceeds max length {}", self.config.max_len)));
        }
        let mut pooled = vec![T::zero(); d];
        let mut learnable = Vec::new();
        for slot in prompt.slots() {
            let row = match *slot {
                Slot::Fixed(id) => {
                    if id >= self.config.vocab_size {
                        return Err(Error::Shape(format!("token id {id} outside vocabulary")));
                    }
                    self.token_table.row(id)
                }
                Slot::Learnable(m) => {
                    let ctx = context.ok_or_else(|| Error::Shape("learnable slot without context".into()))?;
                    if m >= ctx.len() {
                        return Err(Error::Shape(format!(
                            "learnable slot {m} out of range for context of length {}",
                            ctx.len()
                        )));
                    }
                    learnable.push(m);
                    ctx.row(m)
                }
            };
            for (p, &x) in pooled.iter_mut().zip(row) {
                *p += x;
            }
        }
        let (hidden, mut out) = match &self.arch {
            Architecture::Identity => (Vec::new(), pooled),
            Architecture::Mlp(w) => {
                for k in 0..s {
                    for (p, &x) in pooled.iter_mut().zip(w.positional.row(k)) {
                        *p += x;
                    }
                }
                let inv = T::one() / T::lit(s as f64);
                pooled.iter_mut().for_each(|p| *p *= inv);
                let mut a = w.w1.matvec(&pooled)?;
                for (ai, &bi) in a.iter_mut().zip(&w.b1) {
                    *ai = (*ai + bi).tanh();
                }
                let mut o = w.w2.matvec(&a)?;
                for (oi, &bi) in o.iter_mut().zip(&w.b2) {
                    *oi += bi;
                }
                (a, o)
            }
        };
        if matches!(self.arch, Architecture::Identity) {
            let inv = T::one() / T::lit(s as f64);
            out.iter_mut().for_each(|p| *p *= inv);
        }
        let out_norm = crate::numerics::norm(&out);
        if out_norm == T::zero() || !out_norm.is_finite() {
            return Err(Error::Numeric("encoder output has zero or non-finite norm".into()));
        }
        out.iter_mut().for_each(|o| *o /= out_norm);
        Ok(EncodeTrace { learnable, slot_count: s, hidden, out_norm, output: Vector::from_raw(out) })
    }

    /// Adds `∂⟨upstream, z⟩/∂context` into `grad`.
    pub fn accumulate_vjp(&self, trace: &EncodeTrace<T>, upstream: &[T], grad: &mut Matrix<T>) -> Result<()> {
        let Some(g_pool) = self.slot_gradient(trace, upstream)? else {
            return Ok(());
        };
        for &m in &trace.learnable {
            if m >= grad.rows() || grad.cols() != self.dim() {
                return Err(Error::Shape("gradient matrix does not match context".into()));
            }
            for (g, &x) in grad.row_mut(m).iter_mut().zip(&g_pool) {
                *g += x;
            }
        }
        Ok(())
    }

    /// Gradient shared by every learnable slot of the traced prompt (mean
    /// pooling gives each slot the same share), or `None` without learnable
    /// slots.
    pub fn slot_gradient(&self, trace: &EncodeTrace<T>, upstream: &[T]) -> Result<Option<Vec<T>>> {
        if upstream.len() != self.dim() {
            return Err(Error::Shape(format!("upstream length {} vs dimension {}", upstream.len(), self.dim())));
        }
        if trace.learnable.is_empty() {
            return Ok(None);
        }
        let z = trace.output.as_slice();
        let zg = crate::numerics::dot(z, upstream);
        let g_out: Vec<T> = upstream.iter().zip(z).map(|(&g, &zi)| (g - zi * zg) / trace.out_norm).collect();
        let mut g_pool = match &self.arch {
            Architecture::Identity => g_out,
            Architecture::Mlp(w) => {
                let mut g_h = w.w2.matvec_t(&g_out)?;
                for (g, &h) in g_h.iter_mut().zip(&trace.hidden) {
                    *g *= T::one() - h * h;
                }
                w.w1.matvec_t(&g_h)?
            }
        };
        let inv = T::one() / T::lit(trace.slot_count as f64);
        g_pool.iter_mut().for_each(|g| *g *= inv);
        Ok(Some(g_pool))
    }

    /// `∂⟨upstream, encode(prompt, context)⟩ / ∂context` as an `M×d` matrix.
    pub fn encode_vjp(&self, prompt: &PromptTokens, context: &ContextMatrix<T>, upstream: &Vector<T>) -> Result<Matrix<T>> {
        let trace = self.encode_traced(prompt, context)?;
        let mut grad = Matrix::zeros(context.len(), context.dim());
        self.accumulate_vjp(&trace, upstream.as_slice(), &mut grad)?;
        Ok(grad)
    }

    fn named_weights(&self) -> Vec<(&'static str, &[T], usize, usize)> {
        let mut out = vec![("token_table", self.token_table.as_slice(), self.token_table.rows(), self.token_table.cols())];
        if let Architecture::Mlp(w) = &self.arch {
            out.push(("positional", w.positional.as_slice(), w.positional.rows(), w.positional.cols()));
            out.push(("w1", w.w1.as_slice(), w.w1.rows(), w.w1.cols()));
            out.push(("b1", &w.b1, 1, w.b1.len()));
            out.push(("w2", w.w2.as_slice(), w.w2.rows(), w.w2.cols()));
            out.push(("b2", &w.b2, 1, w.b2.len()));
        }
        out
    }

    /// SHA-256 over every weight, in a fixed order, as little-endian f64.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.architecture_id().as_bytes());
        for (name, data, _, _) in self.named_weights() {
            h.update(name.as_bytes());
            for v in data {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_document(&self) -> EncoderDocument {
        let weights = self
            .named_weights()
            .into_iter()
            .map(|(name, data, rows, cols)| {
                let bytes: Vec<u8> = data.iter().flat_map(|v| v.as_f64().to_le_bytes()).collect();
                (name.to_string(), WeightBlob { rows, cols, data: B64.encode(bytes) })
            })
            .collect();
        EncoderDocument {
            architecture_id: self.architecture_id().to_string(),
            seed: self.config.seed,
            dims: EncoderDims {
                vocab_size: self.config.vocab_size,
                dim: self.config.dim,
                hidden: self.config.hidden,
                max_len: self.config.max_len,
            },
            lowercase: self.config.lowercase,
            weights,
        }
    }

    pub fn from_document(doc: &EncoderDocument) -> Result<Self> {
        let config = EncoderConfig {
            architecture: ArchitectureKind::from_id(&doc.architecture_id)?,
            seed: doc.seed,
            vocab_size: doc.dims.vocab_size,
            dim: doc.dims.dim,
            hidden: doc.dims.hidden,
            max_len: doc.dims.max_len,
            lowercase: doc.lowercase,
        };
        config.validate()?;
        let blob = |name: &str, rows: usize, cols: usize| -> Result<Matrix<T>> {
            let b = doc.weights.get(name).ok_or_else(|| Error::Data(format!("encoder weight '{name}' missing")))?;
            if b.rows != rows || b.cols != cols {
                return Err(Error::Shape(format!(
                    "weight '{name}' is {}x{}, expected {rows}x{cols}",
                    b.rows, b.cols
                )));
            }
            let bytes = B64.decode(&b.data).map_err(|e| Error::Data(format!("weight '{name}': {e}")))?;
            if bytes.len() != rows * cols * 8 {
                return Err(Error::Data(format!("weight '{name}' blob has {} bytes", bytes.len())));
            }
            let values = bytes
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
                .collect();
            Matrix::from_vec(rows, cols, values)
        };
        let (d, h) = (config.dim, config.hidden);
        let token_table = blob("token_table", config.vocab_size, d)?;
        let arch = match config.architecture {
            ArchitectureKind::Identity => Architecture::Identity,
            ArchitectureKind::Mlp => Architecture::Mlp(MlpWeights {
                positional: blob("positional", config.max_len, d)?,
                w1: blob("w1", h, d)?,
                b1: blob("b1", 1, h)?.as_slice().to_vec(),
                w2: blob("w2", d, h)?,
                b2: blob("b2", 1, d)?.as_slice().to_vec(),
            }),
        };
        Ok(Self { tokenizer: Self::tokenizer_for(&config), config, token_table, arch })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub max_len: usize,
}

/// Row-major little-endian f64 values, base64 encoded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightBlob {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDocument {
    pub architecture_id: String,
    pub seed: u64,
    pub dims: EncoderDims,
    pub lowercase: bool,
    pub weights: BTreeMap<String, WeightBlob>,
}
