//! Learnable context, class/neighbor/template prompt assembly and the
//! embeddings derived from them.

use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::encoder::{PromptTokens, TextEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, SeededRng, Vector};

/// The hand-crafted zero-shot template.
pub const DEFAULT_TEMPLATE: &str = "This is a sound of {class}";
pub const PLACEHOLDER: &str = "{class}";

/// The `M×d` learnable prompt vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMatrix<T> {
    values: Matrix<T>,
}

impl<T: Scalar> ContextMatrix<T> {
    pub const INIT_STD: f64 = 0.02;

    /// Entries drawn from `N(0, 0.02²)`.
    pub fn init(len: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::Config("context length and dimension must be positive".into()));
        }
        Ok(Self { values: Matrix::random_normal(len, dim, Self::INIT_STD, rng) })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self { values: Matrix::zeros(len, dim) }
    }

    pub fn from_matrix(values: Matrix<T>) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::Numeric("context has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    /// Number of context vectors `M`.
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, m: usize) -> &[T] {
        self.values.row(m)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut Matrix<T> {
        &mut self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    New,
}

fn normalize_name(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Ordered class names with their base/new tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSet {
    names: Vec<String>,
    splits: Vec<Split>,
}

impl ClassSet {
    pub fn new(names: Vec<String>, splits: Vec<Split>) -> Result<Self> {
        if names.len() != splits.len() {
            return Err(Error::Shape("one split tag per class is required".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            let key = normalize_name(n);
            if key.is_empty() {
                return Err(Error::Data("class names must be non-empty".into()));
            }
            if !seen.insert(key) {
                return Err(Error::Data(format!("duplicate class name '{n}'")));
            }
        }
        Ok(Self { names, splits })
    }

    /// First `ceil(K/2)` classes are base, the rest new.
    pub fn halved(names: Vec<String>) -> Result<Self> {
        let base = names.len().div_ceil(2);
        let splits = (0..names.len()).map(|i| if i < base { Split::Base } else { Split::New }).collect();
        Self::new(names, splits)
    }

    pub fn all_base(names: Vec<String>) -> Result<Self> {
        let splits = vec![Split::Base; names.len()];
        Self::new(names, splits)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> Result<&str> {
        self.names
            .get(i)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("class index {i} out of range for {} classes", self.len())))
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn base_indices(&self) -> Vec<usize> {
        self.indices(Split::Base)
    }

    pub fn new_indices(&self) -> Vec<usize> {
        self.indices(Split::New)
    }

    pub fn names_of(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.names[i].clone()).collect()
    }

    /// Same names, every class tagged base.
    pub fn with_all_base(&self) -> Self {
        Self { names: self.names.clone(), splits: vec![Split::Base; self.len()] }
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        let key = normalize_name(name);
        self.names.iter().position(|n| normalize_name(n) == key)
    }
}

/// `N` neighbor strings per class, keyed by class name in insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSet {
    per_class: IndexMap<String, Vec<String>>,
    n: usize,
}

impl NeighborSet {
    /// Pads shorter lists by cyclic repetition up to the longest list.
    pub fn new(per_class: IndexMap<String, Vec<String>>) -> Result<Self> {
        let n = per_class.values().map(Vec::len).max().unwrap_or(0);
        Self::with_len(per_class, n)
    }

    /// Truncates or pads every list to exactly `n` entries.
    pub fn with_len(per_class: IndexMap<String, Vec<String>>, n: usize) -> Result<Self> {
        let mut out = IndexMap::with_capacity(per_class.len());
        for (class, list) in per_class {
            if let Some(bad) = list.iter().position(|s| s.trim().is_empty()) {
                return Err(Error::Data(format!("neighbor {bad} of class '{class}' is empty")));
            }
            if list.is_empty() && n > 0 {
                return Err(Error::Data(format!("class '{class}' has no neighbors")));
            }
            let list = if list.len() >= n {
                list.into_iter().take(n).collect()
            } else {
                log::warn!("class '{class}' has {} neighbors, padding to {n} by repetition", list.len());
                list.iter().cycle().take(n).cloned().collect()
            };
            out.insert(class, list);
        }
        Ok(Self { per_class: out, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.per_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.per_class.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.per_class.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn get(&self, class: &str) -> Result<&[String]> {
        if let Some(v) = self.per_class.get(class) {
            return Ok(v);
        }
        let key = normalize_name(class);
        self.per_class
            .iter()
            .find(|(k, _)| normalize_name(k) == key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Data(format!("no neighbor list for class '{class}'")))
    }

    /// First `n` neighbors per class.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n > self.n {
            return Err(Error::Config(format!("requested {n} neighbors but only {} are available", self.n)));
        }
        Self::with_len(self.per_class.clone(), n)
    }

    /// Only the listed classes, in the given order.
    pub fn restricted(&self, classes: &[String]) -> Result<Self> {
        let mut out = IndexMap::new();
        for c in classes {
            out.insert(c.clone(), self.get(c)?.to_vec());
        }
        Ok(Self { per_class: out, n: self.n })
    }

    pub fn into_map(self) -> IndexMap<String, Vec<String>> {
        self.per_class
    }
}

impl Serialize for NeighborSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.per_class.serialize(s)
    }
}

impl<'de> Deserialize<'de> for NeighborSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = IndexMap::<String, Vec<String>>::deserialize(d)?;
        NeighborSet::new(map).map_err(serde::de::Error::custom)
    }
}

/// Hand-crafted prompt templates, each with one `{class}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct TemplatePool {
    templates: Vec<String>,
}

const SHIPPED_POOL: &str = include_str!("../fixtures/templates.json");

impl TemplatePool {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Input("template pool is empty".into()));
        }
        for t in &templates {
            check_template(t)?;
        }
        Ok(Self { templates })
    }

    /// The single default zero-shot template.
    pub fn single_default() -> Self {
        Self { templates: vec![DEFAULT_TEMPLATE.to_string()] }
    }

    /// The committed pool of 100 templates.
    pub fn shipped() -> Self {
        let templates: Vec<String> = serde_json::from_str(SHIPPED_POOL).expect("shipped pool is valid JSON");
        Self::new(templates).expect("shipped pool is valid")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn first(&self) -> &str {
        &self.templates[0]
    }

    pub fn truncated(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.len() {
            return Err(Error::Config(format!("cannot take {t} templates from a pool of {}", self.len())));
        }
        Ok(Self { templates: self.templates[..t].to_vec() })
    }

    /// SHA-256 of the templates joined by newlines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.templates {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

impl<'de> Deserialize<'de> for TemplatePool {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        TemplatePool::new(v).map_err(serde::de::Error::custom)
    }
}

fn check_template(template: &str) -> Result<()> {
    match template.matches(PLACEHOLDER).count() {
        1 => Ok(()),
        n => Err(Error::Input(format!("template '{template}' must contain '{PLACEHOLDER}' exactly once, found {n}"))),
    }
}

/// `template` with the placeholder replaced by `name`.
pub fn fill_template(template: &str, name: &str) -> Result<String> {
    check_template(template)?;
    Ok(template.replace(PLACEHOLDER, name))
}

/// `[v₁ … v_M, E(text)]`
pub fn context_prompt<T: Scalar>(encoder: &TextEncoder<T>, context_len: usize, text: &str) -> Result<PromptTokens> {
    let tokens = encoder.tokenizer().tokenize(text)?;
    PromptTokens::with_context(context_len, &tokens, encoder.tokenizer().max_len())
}

/// Class prompt embedding `z_i`.
pub fn class_embedding<T: Scalar>(
    encoder: &TextEncoder<T>,
    classes: &ClassSet,
    i: usize,
    context: &ContextMatrix<T>,
) -> Result<Vector<T>> {
    let prompt = context_prompt(encoder, context.len(), classes.name(i)?)?;
    encoder.encode(&prompt, context)
}

/// Neighbor prompt embedding `p_i^n`, sharing the class context.
pub fn neighbor_embedding<T: Scalar>(
    encoder: &TextEncoder<T>,
    classes: &ClassSet,
    neighbors: &NeighborSet,
    i: usize,
    n: usize,
    context: &ContextMatrix<T>,
) -> Result<Vector<T>> {
    let list = neighbors.get(classes.name(i)?)?;
    let text = list
        .get(n)
        .ok_or_else(|| Error::Index(format!("neighbor index {n} out of range for {} neighbors", list.len())))?;
    let prompt = context_prompt(encoder, context.len(), text)?;
    encoder.encode(&prompt, context)
}

/// Embedding of a filled hand-crafted template; no learnable slots.
pub fn template_embedding<T: Scalar>(encoder: &TextEncoder<T>, template: &str, name: &str) -> Result<Vector<T>> {
    let text = fill_template(template, name)?;
    let prompt = PromptTokens::fixed(&encoder.tokenizer().tokenize(&text)?)?;
    encoder.encode_fixed(&prompt)
}

/// Mean of the template embeddings over the pool, renormalised.
pub fn ensemble_zero_shot_embedding<T: Scalar>(encoder: &TextEncoder<T>, name: &str, pool: &TemplatePool) -> Result<Vector<T>> {
    let mut acc = vec![T::zero(); encoder.dim()];
    for t in pool.templates() {
        let e = template_embedding(encoder, t, name)?;
        for (a, &x) in acc.iter_mut().zip(e.as_slice()) {
            *a += x;
        }
    }
    let inv = T::one() / T::lit(pool.len() as f64);
    acc.iter_mut().for_each(|a| *a *= inv);
    Vector::new(acc)?.normalized()
}
