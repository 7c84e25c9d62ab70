//! Margin table and training objectives with exact gradients with respect to
//! the context matrix.
//!
//! Every objective is evaluated in two passes. The forward pass encodes the
//! prompts it needs and keeps their traces; each loss term then writes
//! `∂L/∂embedding` into per-prompt upstream buffers, and a single
//! vector-Jacobian product per prompt maps those into the `M×d` gradient.
//!
//! Hinge subgradients are zero at the kink, and distance gradients are zero
//! when two embeddings coincide.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncodeTrace, PromptTokens, TextEncoder};
use crate::error::{Error, Result};
use crate::numerics::{self, l2_dist_slice, log_sum_exp, stable_softmax, Matrix, Scalar, Vector};
use crate::prompting::{
    context_prompt, ensemble_zero_shot_embedding, template_embedding, ClassSet, ContextMatrix, NeighborSet,
    TemplatePool, DEFAULT_TEMPLATE,
};

/// Repulsion target of the margin-free inter ablation: the diameter of the
/// unit sphere.
pub const UNIT_SPHERE_DIAMETER: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginMode {
    /// Average over the whole template pool.
    Ensemble,
    /// The single default template only.
    FixedPrefix,
}

impl MarginMode {
    /// The templates the margins are averaged over.
    pub fn pool(self, pool: &TemplatePool) -> TemplatePool {
        match self {
            MarginMode::Ensemble => pool.clone(),
            MarginMode::FixedPrefix => TemplatePool::single_default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KgMode {
    /// The first template of the pool.
    Single,
    /// Renormalised mean over the pool.
    Ensemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CeReduction {
    Mean,
    Sum,
}

/// Which semantic-expansion terms are active and whether they use margins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_intra: bool,
    pub intra_margin: bool,
    pub use_inter: bool,
    pub inter_margin: bool,
    pub margin_mode: MarginMode,
}

impl AblationFlags {
    pub const fn full() -> Self {
        Self { use_intra: true, intra_margin: true, use_inter: true, inter_margin: true, margin_mode: MarginMode::Ensemble }
    }

    pub const fn off() -> Self {
        Self { use_intra: false, intra_margin: false, use_inter: false, inter_margin: false, margin_mode: MarginMode::Ensemble }
    }

    pub fn any(&self) -> bool {
        self.use_intra || self.use_inter
    }

    /// The seven rows of the loss/margin ablation grid, baseline first.
    pub fn grid() -> Vec<Self> {
        let row = |use_intra, intra_margin, use_inter, inter_margin| Self {
            use_intra,
            intra_margin,
            use_inter,
            inter_margin,
            margin_mode: MarginMode::Ensemble,
        };
        vec![
            row(false, false, false, false),
            row(true, false, false, false),
            row(true, true, false, false),
            row(false, false, true, false),
            row(false, false, true, true),
            row(true, false, true, false),
            row(true, true, true, true),
        ]
    }

    pub fn label(&self) -> String {
        let part = |on: bool, margin: bool, name: &str| match (on, margin) {
            (false, _) => String::new(),
            (true, true) => format!("{name}+m"),
            (true, false) => name.to_string(),
        };
        let parts: Vec<String> = [part(self.use_intra, self.intra_margin, "intra"), part(self.use_inter, self.inter_margin, "inter")]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join(",")
        }
    }

    /// Inverse of [`label`](Self::label); also accepts `full` and `off`.
    pub fn parse_label(text: &str, margin_mode: MarginMode) -> Result<Self> {
        let mut flags = match text.trim() {
            "full" => return Ok(Self { margin_mode, ..Self::full() }),
            "off" | "baseline" => return Ok(Self { margin_mode, ..Self::off() }),
            _ => Self { margin_mode, ..Self::off() },
        };
        for part in text.split(',').map(str::trim) {
            match part {
                "intra" => flags.use_intra = true,
                "intra+m" => (flags.use_intra, flags.intra_margin) = (true, true),
                "inter" => flags.use_inter = true,
                "inter+m" => (flags.use_inter, flags.inter_margin) = (true, true),
                other => return Err(Error::Config(format!("unknown loss term '{other}'; expected intra, intra+m, inter or inter+m"))),
            }
        }
        Ok(flags)
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

/// Precomputed `m[i][j][n]`: mean L2 distance between class `i` and neighbor
/// `n` of class `j` under the hand-crafted templates. Never depends on the
/// context.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginTable<T> {
    classes: Vec<String>,
    n: usize,
    values: Vec<T>,
    mode: MarginMode,
    pool_hash: String,
    encoder_seed: u64,
}

impl<T: Scalar> MarginTable<T> {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn mode(&self) -> MarginMode {
        self.mode
    }

    pub fn pool_hash(&self) -> &str {
        &self.pool_hash
    }

    pub fn encoder_seed(&self) -> u64 {
        self.encoder_seed
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, n: usize) -> T {
        self.values[(i * self.k() + j) * self.n + n]
    }

    /// Sub-table over `classes` (by name) keeping the first `n` neighbors.
    pub fn restricted(&self, classes: &[String], n: usize) -> Result<Self> {
        if n > self.n {
            return Err(Error::Config(format!("margin table has {} neighbors, {n} requested", self.n)));
        }
        let idx: Vec<usize> = classes
            .iter()
            .map(|c| {
                self.classes
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| Error::Data(format!("margin table has no class '{c}'")))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(idx.len() * idx.len() * n);
        for &i in &idx {
            for &j in &idx {
                for k in 0..n {
                    values.push(self.get(i, j, k));
                }
            }
        }
        Ok(Self { classes: classes.to_vec(), n, values, mode: self.mode, pool_hash: self.pool_hash.clone(), encoder_seed: self.encoder_seed })
    }

    /// Fails unless the table was built from this pool, encoder and mode.
    pub fn check_compatible(&self, pool_hash: &str, encoder_seed: u64, mode: MarginMode) -> Result<()> {
        if self.pool_hash != pool_hash {
            return Err(Error::Config(format!(
                "margin table pool hash {} does not match the configured pool {pool_hash}",
                self.pool_hash
            )));
        }
        if self.encoder_seed != encoder_seed {
            return Err(Error::Config(format!(
                "margin table encoder seed {} does not match the configured seed {encoder_seed}",
                self.encoder_seed
            )));
        }
        if self.mode != mode {
            return Err(Error::Config(format!("margin table mode {:?} does not match {mode:?}", self.mode)));
        }
        Ok(())
    }

    /// SHA-256 over the metadata and the values as little-endian f64.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.classes {
            h.update(c.as_bytes());
            h.update([0u8]);
        }
        h.update((self.n as u64).to_le_bytes());
        h.update(format!("{:?}", self.mode).as_bytes());
        h.update(self.pool_hash.as_bytes());
        h.update(self.encoder_seed.to_le_bytes());
        for v in &self.values {
            h.update(v.as_f64().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_document(&self) -> MarginDocument {
        MarginDocument {
            k: self.k(),
            n: self.n,
            classes: self.classes.clone(),
            mode: self.mode,
            pool_hash: self.pool_hash.clone(),
            encoder_seed: self.encoder_seed,
            values: self.values.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn from_document(doc: MarginDocument) -> Result<Self> {
        if doc.classes.len() != doc.k {
            return Err(Error::Data(format!("margin table lists {} classes but K = {}", doc.classes.len(), doc.k)));
        }
        if doc.values.len() != doc.k * doc.k * doc.n {
            return Err(Error::Data(format!(
                "margin table needs {} values, found {}",
                doc.k * doc.k * doc.n,
                doc.values.len()
            )));
        }
        if let Some(pos) = doc.values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!("margin value {pos} is negative or non-finite")));
        }
        Ok(Self {
            classes: doc.classes,
            n: doc.n,
            values: doc.values.into_iter().map(T::lit).collect(),
            mode: doc.mode,
            pool_hash: doc.pool_hash,
            encoder_seed: doc.encoder_seed,
        })
    }
}

/// On-disk form of a [`MarginTable`]; `values` are row-major over `(i, j, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginDocument {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub classes: Vec<String>,
    pub mode: MarginMode,
    pub pool_hash: String,
    pub encoder_seed: u64,
    pub values: Vec<f64>,
}

/// Builds the margin table over `class_names` from hand-crafted templates
/// only. With [`MarginMode::FixedPrefix`] the pool is replaced by the single
/// default template.
pub fn compute_margin_table<T: Scalar>(
    encoder: &TextEncoder<T>,
    class_names: &[String],
    neighbors: &NeighborSet,
    pool: &TemplatePool,
    mode: MarginMode,
) -> Result<MarginTable<T>> {
    let pool = mode.pool(pool);
    let n = neighbors.n();
    let lists: Vec<&[String]> = class_names.iter().map(|c| neighbors.get(c)).collect::<Result<_>>()?;
    let k = class_names.len();
    // one entry per template, reduced in template order
    let per_template: Vec<Vec<T>> = pool
        .templates()
        .par_iter()
        .map(|t| -> Result<Vec<T>> {
            let cls: Vec<Vector<T>> = class_names.iter().map(|c| template_embedding(encoder, t, c)).collect::<Result<_>>()?;
            let nbs: Vec<Vec<Vector<T>>> = lists
                .iter()
                .map(|l| l.iter().map(|p| template_embedding(encoder, t, p)).collect::<Result<_>>())
                .collect::<Result<_>>()?;
            let mut out = Vec::with_capacity(k * k * n);
            for c in &cls {
                for nb in &nbs {
                    for p in nb {
                        out.push(l2_dist_slice(c.as_slice(), p.as_slice()));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![T::zero(); k * k * n];
    for d in &per_template {
        for (v, &x) in values.iter_mut().zip(d) {
            *v += x;
        }
    }
    let inv = T::one() / T::lit(pool.len() as f64);
    values.iter_mut().for_each(|v| *v *= inv);
    Ok(MarginTable {
        classes: class_names.to_vec(),
        n,
        values,
        mode,
        pool_hash: pool.hash(),
        encoder_seed: encoder.seed(),
    })
}

/// Hand-crafted anchors for the knowledge-guided regulariser.
pub fn kg_anchors<T: Scalar>(encoder: &TextEncoder<T>, class_names: &[String], pool: &TemplatePool, mode: KgMode) -> Result<Vec<Vector<T>>> {
    class_names
        .iter()
        .map(|c| match mode {
            KgMode::Single => template_embedding(encoder, pool.first(), c),
            KgMode::Ensemble => ensemble_zero_shot_embedding(encoder, c, pool),
        })
        .collect()
}

/// Default KG anchors: the default template alone.
pub fn default_kg_pool() -> TemplatePool {
    TemplatePool::new(vec![DEFAULT_TEMPLATE.to_string()]).expect("default template is valid")
}

/// Loss components and the gradient of `total` with respect to the context.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub ce: T,
    pub intra: T,
    pub inter: T,
    pub se: T,
    pub kg: T,
    pub total: T,
    pub gradient: Matrix<T>,
}

/// Weights and switches of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<T> {
    pub lambda: T,
    pub mu: T,
    pub tau: T,
    pub reduction: CeReduction,
    pub flags: AblationFlags,
}

/// Audio embeddings with labels local to the objective's class list.
pub type LabeledBatch<'a, T> = &'a [(Vector<T>, usize)];

/// The training objective over a fixed list of (base) classes.
///
/// Class `i` of the objective is `class_names[i]`; the margin table and the
/// neighbor set must cover exactly these classes.
#[derive(Clone, Debug)]
pub struct Objective<'a, T> {
    encoder: &'a TextEncoder<T>,
    class_names: Vec<String>,
    class_prompts: Vec<PromptTokens>,
    neighbor_prompts: Vec<Vec<PromptTokens>>,
    margins: Option<MarginTable<T>>,
    anchors: Option<Vec<Vector<T>>>,
    context_len: usize,
}

struct Forward<T> {
    class: Vec<EncodeTrace<T>>,
    neighbors: Vec<Vec<EncodeTrace<T>>>,
}

struct Upstream<T> {
    class: Vec<Vec<T>>,
    neighbors: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> Upstream<T> {
    fn new(k: usize, n: usize, d: usize, with_neighbors: bool) -> Self {
        Self {
            class: vec![vec![T::zero(); d]; k],
            neighbors: if with_neighbors { vec![vec![vec![T::zero(); d]; n]; k] } else { Vec::new() },
        }
    }
}

#[inline]
fn add_scaled<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Unit direction `(a - b)/||a - b||` and the distance; zero direction when
/// the points coincide.
fn direction<T: Scalar>(a: &[T], b: &[T]) -> (T, Vec<T>) {
    let dist = l2_dist_slice(a, b);
    if dist == T::zero() {
        return (dist, vec![T::zero(); a.len()]);
    }
    (dist, a.iter().zip(b).map(|(&x, &y)| (x - y) / dist).collect())
}

impl<'a, T: Scalar> Objective<'a, T> {
    /// Objective with the cross-entropy term only.
    pub fn new(encoder: &'a TextEncoder<T>, class_names: Vec<String>, context_len: usize) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Protocol("objective needs at least one class".into()));
        }
        let class_prompts =
            class_names.iter().map(|c| context_prompt(encoder, context_len, c)).collect::<Result<_>>()?;
        Ok(Self { encoder, class_names, class_prompts, neighbor_prompts: Vec::new(), margins: None, anchors: None, context_len })
    }

    /// Adds neighbors and their margin table for the semantic-expansion terms.
    pub fn with_semantic(mut self, neighbors: &NeighborSet, margins: MarginTable<T>) -> Result<Self> {
        if margins.classes() != self.class_names.as_slice() {
            return Err(Error::Data("margin table classes do not match the objective classes".into()));
        }
        if margins.n() != neighbors.n() {
            return Err(Error::Data(format!(
                "margin table has {} neighbors per class, neighbor set has {}",
                margins.n(),
                neighbors.n()
            )));
        }
        self.neighbor_prompts = self
            .class_names
            .iter()
            .map(|c| {
                neighbors.get(c)?.iter().map(|p| context_prompt(self.encoder, self.context_len, p)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        self.margins = Some(margins);
        Ok(self)
    }

    /// Adds per-class anchors for the knowledge-guided regulariser.
    pub fn with_anchors(mut self, anchors: Vec<Vector<T>>) -> Result<Self> {
        if anchors.len() != self.class_names.len() {
            return Err(Error::Shape(format!("{} anchors for {} classes", anchors.len(), self.class_names.len())));
        }
        self.anchors = Some(anchors);
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn n(&self) -> usize {
        self.margins.as_ref().map_or(0, |m| m.n())
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn margins(&self) -> Option<&MarginTable<T>> {
        self.margins.as_ref()
    }

    fn check_context(&self, context: &ContextMatrix<T>) -> Result<()> {
        if context.len() != self.context_len || context.dim() != self.encoder.dim() {
            return Err(Error::Shape(format!(
                "context is {}x{}, objective expects {}x{}",
                context.len(),
                context.dim(),
                self.context_len,
                self.encoder.dim()
            )));
        }
        Ok(())
    }

    fn semantic(&self) -> Result<&MarginTable<T>> {
        self.margins.as_ref().ok_or_else(|| Error::Config("objective has no neighbors/margins".into()))
    }

    fn forward(&self, context: &ContextMatrix<T>, with_neighbors: bool) -> Result<Forward<T>> {
        self.check_context(context)?;
        let class = self.class_prompts.par_iter().map(|p| self.encoder.encode_traced(p, context)).collect::<Result<_>>()?;
        let neighbors = if with_neighbors {
            self.semantic()?;
            self.neighbor_prompts
                .par_iter()
                .map(|ps| ps.iter().map(|p| self.encoder.encode_traced(p, context)).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Forward { class, neighbors })
    }

    fn backward(&self, fwd: &Forward<T>, up: &Upstream<T>, context: &ContextMatrix<T>) -> Result<Matrix<T>> {
        let mut pairs: Vec<(&EncodeTrace<T>, &[T])> = fwd.class.iter().zip(&up.class).map(|(t, u)| (t, u.as_slice())).collect();
        for (ts, us) in fwd.neighbors.iter().zip(&up.neighbors) {
            pairs.extend(ts.iter().zip(us).map(|(t, u)| (t, u.as_slice())));
        }
        let slot_grads: Vec<Option<Vec<T>>> = pairs
            .par_iter()
            .map(|(t, u)| {
                if u.iter().all(|&x| x == T::zero()) {
                    Ok(None)
                } else {
                    self.encoder.slot_gradient(t, u)
                }
            })
            .collect::<Result<_>>()?;
        let mut grad = Matrix::zeros(context.len(), context.dim());
        for ((trace, _), g) in pairs.iter().zip(slot_grads) {
            if let Some(g) = g {
                for &m in trace.learnable_slots() {
                    add_scaled(grad.row_mut(m), T::one(), &g);
                }
            }
        }
        Ok(grad)
    }

    fn ce_terms(&self, fwd: &Forward<T>, batch: LabeledBatch<T>, tau: T, reduction: CeReduction, weight: T, up: &mut Upstream<T>) -> Result<T> {
        if !(tau > T::zero()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let k = self.k();
        let d = self.encoder.dim();
        let scale = match reduction {
            CeReduction::Sum => T::one(),
            CeReduction::Mean if batch.is_empty() => T::one(),
            CeReduction::Mean => T::one() / T::lit(batch.len() as f64),
        };
        let mut loss = T::zero();
        for (x, y) in batch {
            if *y >= k {
                return Err(Error::Protocol(format!("label {y} outside the {k} training classes")));
            }
            if x.len() != d {
                return Err(Error::Shape(format!("audio embedding of length {} vs dimension {d}", x.len())));
            }
            let x_norm = x.norm();
            if x_norm == T::zero() {
                return Err(Error::Domain("zero audio embedding".into()));
            }
            let xh: Vec<T> = x.as_slice().iter().map(|&v| v / x_norm).collect();
            let mut cos = Vec::with_capacity(k);
            let mut z_norms = Vec::with_capacity(k);
            for tr in &fwd.class {
                let z = tr.output().as_slice();
                let zn = numerics::norm(z);
                let c = numerics::dot(&xh, z) / zn;
                cos.push(c.max(-T::one()).min(T::one()));
                z_norms.push(zn);
            }
            let logits: Vec<T> = cos.iter().map(|&c| c / tau).collect();
            loss += log_sum_exp(&logits)? - logits[*y];
            if weight == T::zero() {
                continue;
            }
            let probs = stable_softmax(&logits)?;
            for i in 0..k {
                let dl = probs[i] - if i == *y { T::one() } else { T::zero() };
                let coef = weight * scale * dl / tau;
                if coef == T::zero() {
                    continue;
                }
                let z = fwd.class[i].output().as_slice();
                let zn = z_norms[i];
                // ∂cos/∂z = x̂/||z|| - cos·z/||z||²
                for c in 0..d {
                    up.class[i][c] += coef * (xh[c] / zn - cos[i] * z[c] / (zn * zn));
                }
            }
        }
        Ok(loss * scale)
    }

    fn intra_terms(&self, fwd: &Forward<T>, flags: &AblationFlags, i: usize, weight: T, up: &mut Upstream<T>) -> Result<T> {
        let margins = self.semantic()?;
        let n = margins.n();
        let inv_n = T::one() / T::lit(n as f64);
        let z = fwd.class[i].output().as_slice();
        let mut loss = T::zero();
        for k in 0..n {
            let p = fwd.neighbors[i][k].output().as_slice();
            let (dist, dir) = direction(z, p);
            let hinge = if flags.intra_margin { dist - margins.get(i, i, k) } else { dist };
            if hinge > T::zero() {
                loss += hinge;
                let coef = weight * inv_n;
                if coef != T::zero() {
                    add_scaled(&mut up.class[i], coef, &dir);
                    add_scaled(&mut up.neighbors[i][k], -coef, &dir);
                }
            }
        }
        Ok(loss * inv_n)
    }

    fn inter_terms(&self, fwd: &Forward<T>, flags: &AblationFlags, i: usize, j: usize, weight: T, up: &mut Upstream<T>) -> Result<T> {
        if i == j {
            return Err(Error::Usage("inter loss needs two distinct classes".into()));
        }
        let margins = self.semantic()?;
        let n = margins.n();
        let inv_n = T::one() / T::lit(n as f64);
        let z = fwd.class[i].output().as_slice();
        let mut loss = T::zero();
        for k in 0..n {
            let p = fwd.neighbors[j][k].output().as_slice();
            let (dist, dir) = direction(z, p);
            let m = if flags.inter_margin { margins.get(i, j, k) } else { T::lit(UNIT_SPHERE_DIAMETER) };
            let hinge = m - dist;
            if hinge > T::zero() {
                loss += hinge;
                let coef = weight * inv_n;
                if coef != T::zero() {
                    add_scaled(&mut up.class[i], -coef, &dir);
                    add_scaled(&mut up.neighbors[j][k], coef, &dir);
                }
            }
        }
        Ok(loss * inv_n)
    }

    /// Returns `(intra part, inter part)`, both already averaged over classes.
    fn se_terms(&self, fwd: &Forward<T>, flags: &AblationFlags, weight: T, up: &mut Upstream<T>) -> Result<(T, T)> {
        let k = self.k();
        let inv_k = T::one() / T::lit(k as f64);
        let inv_pairs = if k > 1 { T::one() / T::lit((k - 1) as f64) } else { T::zero() };
        let (mut intra, mut inter) = (T::zero(), T::zero());
        for i in 0..k {
            if flags.use_intra {
                intra += self.intra_terms(fwd, flags, i, weight * inv_k, up)?;
            }
            if flags.use_inter && k > 1 {
                let mut row = T::zero();
                for j in (0..k).filter(|&j| j != i) {
                    row += self.inter_terms(fwd, flags, i, j, weight * inv_k * inv_pairs, up)?;
                }
                inter += row * inv_pairs;
            }
        }
        Ok((intra * inv_k, inter * inv_k))
    }

    fn kg_terms(&self, fwd: &Forward<T>, weight: T, up: &mut Upstream<T>) -> Result<T> {
        let anchors = self.anchors.as_ref().ok_or_else(|| Error::Config("objective has no KG anchors".into()))?;
        let inv_k = T::one() / T::lit(self.k() as f64);
        let mut loss = T::zero();
        for (i, a) in anchors.iter().enumerate() {
            let z = fwd.class[i].output().as_slice();
            let diff: Vec<T> = z.iter().zip(a.as_slice()).map(|(&x, &y)| x - y).collect();
            loss += numerics::dot(&diff, &diff);
            if weight != T::zero() {
                add_scaled(&mut up.class[i], weight * inv_k * T::lit(2.0), &diff);
            }
        }
        Ok(loss * inv_k)
    }

    fn upstream(&self, with_neighbors: bool) -> Upstream<T> {
        Upstream::new(self.k(), self.n(), self.encoder.dim(), with_neighbors)
    }

    /// Cross-entropy of the batch under the cosine/τ softmax over the
    /// objective's classes.
    pub fn cross_entropy(&self, context: &ContextMatrix<T>, batch: LabeledBatch<T>, tau: T, reduction: CeReduction) -> Result<(T, Matrix<T>)> {
        let fwd = self.forward(context, false)?;
        let mut up = self.upstream(false);
        let loss = self.ce_terms(&fwd, batch, tau, reduction, T::one(), &mut up)?;
        Ok((loss, self.backward(&fwd, &up, context)?))
    }

    /// Intra-class hinge of class `i` against its own neighbors.
    pub fn intra_loss(&self, context: &ContextMatrix<T>, i: usize, flags: &AblationFlags) -> Result<(T, Matrix<T>)> {
        self.index(i)?;
        let fwd = self.forward(context, true)?;
        let mut up = self.upstream(true);
        let loss = self.intra_terms(&fwd, flags, i, T::one(), &mut up)?;
        Ok((loss, self.backward(&fwd, &up, context)?))
    }

    /// Inter-class hinge of class `i` against the neighbors of class `j`.
    pub fn inter_loss(&self, context: &ContextMatrix<T>, i: usize, j: usize, flags: &AblationFlags) -> Result<(T, Matrix<T>)> {
        self.index(i)?;
        self.index(j)?;
        if i == j {
            return Err(Error::Usage("inter loss needs two distinct classes".into()));
        }
        let fwd = self.forward(context, true)?;
        let mut up = self.upstream(true);
        let loss = self.inter_terms(&fwd, flags, i, j, T::one(), &mut up)?;
        Ok((loss, self.backward(&fwd, &up, context)?))
    }

    /// Semantic expansion loss: mean over classes of the intra term plus the
    /// mean inter term against every other class.
    pub fn semantic_expansion_loss(&self, context: &ContextMatrix<T>, flags: &AblationFlags) -> Result<(T, Matrix<T>)> {
        if !flags.any() {
            self.check_context(context)?;
            return Ok((T::zero(), Matrix::zeros(context.len(), context.dim())));
        }
        let fwd = self.forward(context, true)?;
        let mut up = self.upstream(true);
        let (intra, inter) = self.se_terms(&fwd, flags, T::one(), &mut up)?;
        Ok((intra + inter, self.backward(&fwd, &up, context)?))
    }

    /// Mean squared distance between class embeddings and their anchors.
    pub fn kg_regularizer(&self, context: &ContextMatrix<T>) -> Result<(T, Matrix<T>)> {
        let fwd = self.forward(context, false)?;
        let mut up = self.upstream(false);
        let loss = self.kg_terms(&fwd, T::one(), &mut up)?;
        Ok((loss, self.backward(&fwd, &up, context)?))
    }

    /// `ce + λ·se + μ·kg` with its gradient. Terms with zero weight are not
    /// evaluated, so the CE-only path is shared exactly.
    pub fn total_loss(&self, context: &ContextMatrix<T>, batch: LabeledBatch<T>, w: &LossWeights<T>) -> Result<LossBreakdown<T>> {
        if w.lambda < T::zero() || w.mu < T::zero() {
            return Err(Error::Config("λ and μ must be non-negative".into()));
        }
        let with_se = w.lambda > T::zero() && w.flags.any();
        let with_kg = w.mu > T::zero();
        let fwd = self.forward(context, with_se)?;
        let mut up = self.upstream(with_se);
        let ce = self.ce_terms(&fwd, batch, w.tau, w.reduction, T::one(), &mut up)?;
        let (intra, inter) = if with_se { self.se_terms(&fwd, &w.flags, w.lambda, &mut up)? } else { (T::zero(), T::zero()) };
        let kg = if with_kg { self.kg_terms(&fwd, w.mu, &mut up)? } else { T::zero() };
        let se = intra + inter;
        let mut total = ce;
        if with_se {
            total += w.lambda * se;
        }
        if with_kg {
            total += w.mu * kg;
        }
        let gradient = self.backward(&fwd, &up, context)?;
        Ok(LossBreakdown { ce, intra, inter, se, kg, total, gradient })
    }

    fn index(&self, i: usize) -> Result<()> {
        if i >= self.k() {
            return Err(Error::Index(format!("class index {i} out of range for {} classes", self.k())));
        }
        Ok(())
    }
}

/// Cross-entropy over the base classes of `classes`; labels index the full
/// class set and must all be base classes.
pub fn cross_entropy<T: Scalar>(
    encoder: &TextEncoder<T>,
    audio: &[(Vector<T>, usize)],
    context: &ContextMatrix<T>,
    classes: &ClassSet,
    tau: T,
    reduction: CeReduction,
) -> Result<(T, Matrix<T>)> {
    let base = classes.base_indices();
    let batch = relabel(audio, &base)?;
    Objective::new(encoder, classes.names_of(&base), context.len())?.cross_entropy(context, &batch, tau, reduction)
}

/// Maps labels from full class indices to positions within `base`.
pub fn relabel<T: Scalar>(audio: &[(Vector<T>, usize)], base: &[usize]) -> Result<Vec<(Vector<T>, usize)>> {
    audio
        .iter()
        .map(|(x, y)| {
            base.iter()
                .position(|b| b == y)
                .map(|local| (x.clone(), local))
                .ok_or_else(|| Error::Protocol(format!("label {y} is not a base class")))
        })
        .collect()
}
