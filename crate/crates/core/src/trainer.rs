//! Few-shot sampling, heavy-ball SGD over the context matrix and sweep
//! orchestration.

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{self, EvalReport};
use crate::io::manifest::DatasetManifest;
use crate::loss::{compute_margin_table, kg_anchors, AblationFlags, CeReduction, KgMode, LossWeights, MarginMode, Objective};
use crate::numerics::SeededRng;
use crate::prompting::{NeighborSet, TemplatePool};
use crate::{Context, Encoder, Margins, Matrix, Vector};

/// Stream ids derived from the run seed.
const STREAM_FEW_SHOT: u64 = 1;
const STREAM_CONTEXT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

pub const OPTIMIZER_ID: &str = "sgd-heavy-ball";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// `None` trains full-batch on the few-shot set.
    pub batch_size: Option<usize>,
    pub shots: usize,
    pub lambda: f64,
    pub mu: f64,
    pub tau: f64,
    /// Number of learnable context vectors `M`.
    pub context_len: usize,
    /// Neighbors per class `N`.
    pub neighbors: usize,
    /// Templates used for margins and ensemble anchors `T`.
    pub templates: usize,
    pub seed: u64,
    pub fold: usize,
    pub flags: AblationFlags,
    pub kg_mode: KgMode,
    pub ce_reduction: CeReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0125,
            momentum: 0.9,
            epochs: 50,
            batch_size: None,
            shots: 16,
            lambda: 3.0,
            mu: 0.0,
            tau: 0.01,
            context_len: 16,
            neighbors: 10,
            templates: 100,
            seed: 0,
            fold: 0,
            flags: AblationFlags::full(),
            kg_mode: KgMode::Single,
            ce_reduction: CeReduction::Mean,
        }
    }
}

impl TrainConfig {
    /// CE-only prompt tuning with everything else at defaults.
    pub fn baseline() -> Self {
        Self { lambda: 0.0, mu: 0.0, flags: AblationFlags::off(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.shots == 0 {
            return bad("shots must be at least 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return bad("λ and μ must be non-negative");
        }
        if !(self.tau > 0.0) {
            return bad("τ must be positive");
        }
        if self.context_len == 0 {
            return bad("context length must be at least 1");
        }
        if self.templates == 0 {
            return bad("template count must be at least 1");
        }
        Ok(())
    }

    pub fn uses_semantic(&self) -> bool {
        self.lambda > 0.0 && self.flags.any()
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Momentum buffer of the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Matrix,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(context: &Context) -> Self {
        Self { velocity: Matrix::zeros(context.len(), context.dim()), steps: 0 }
    }
}

/// `v ← μ·v + g;  θ ← θ − lr·v`
pub fn sgd_step(context: &mut Context, gradient: &Matrix, state: &mut OptimizerState, lr: f64, momentum: f64) -> Result<()> {
    gradient.check_same_shape(context.matrix())?;
    state.velocity.check_same_shape(gradient)?;
    if !gradient.is_finite() {
        let bad = gradient.as_slice().iter().position(|v| !v.is_finite()).expect("non-finite entry");
        return Err(Error::Numeric(format!(
            "non-finite gradient at step {} (row {}, col {})",
            state.steps,
            bad / gradient.cols(),
            bad % gradient.cols()
        )));
    }
    for (v, &g) in state.velocity.as_mut_slice().iter_mut().zip(gradient.as_slice()) {
        *v = momentum * *v + g;
    }
    let params = context.values_mut();
    for (p, &v) in params.as_mut_slice().iter_mut().zip(state.velocity.as_slice()) {
        *p -= lr * v;
    }
    state.steps += 1;
    Ok(())
}

/// Sample indices per base class for one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSample {
    /// `(class index, sample indices)` in base-class order.
    pub per_class: Vec<(usize, Vec<usize>)>,
}

impl FewShotSample {
    pub fn all_indices(&self) -> Vec<usize> {
        self.per_class.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }
}

/// Draws up to `shots` training samples per base class without replacement
/// from the fold's training partition.
pub fn sample_few_shot(manifest: &DatasetManifest, fold: usize, shots: usize, seed: u64) -> Result<FewShotSample> {
    let train = &manifest.fold(fold)?.train;
    let mut rng = SeededRng::new(seed).stream(STREAM_FEW_SHOT);
    let mut per_class = Vec::new();
    for c in manifest.classes.base_indices() {
        let pool: Vec<usize> = train.iter().copied().filter(|&i| manifest.samples[i].label == c).collect();
        if pool.is_empty() {
            return Err(Error::Data(format!(
                "base class '{}' has no training samples in fold {fold}",
                manifest.classes.name(c)?
            )));
        }
        let mut picked = if pool.len() <= shots {
            if pool.len() < shots {
                info!("class '{}' has {} samples, fewer than {shots} shots; using all", manifest.classes.name(c)?, pool.len());
            }
            pool
        } else {
            rng.sample_indices(pool.len(), shots).into_iter().map(|k| pool[k]).collect()
        };
        picked.sort_unstable();
        per_class.push((c, picked));
    }
    Ok(FewShotSample { per_class })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub ce: f64,
    pub se: f64,
    pub kg: f64,
}

/// Result of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedPrompt {
    pub config: TrainConfig,
    pub dataset: String,
    /// Classes the prompt was trained on, in objective order.
    pub classes: Vec<String>,
    pub context_len: usize,
    pub dim: usize,
    /// Row-major `M×d` context values.
    pub context: Vec<f64>,
    pub margin_hash: Option<String>,
    pub encoder_hash: String,
    pub loss_history: Vec<EpochLoss>,
    pub few_shot: FewShotSample,
    pub seeds: RunSeeds,
    pub optimizer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub encoder: u64,
    pub rng: String,
}

impl TrainedPrompt {
    pub fn context(&self) -> Result<Context> {
        Context::from_matrix(Matrix::from_vec(self.context_len, self.dim, self.context.clone())?)
    }

    /// SHA-256 of the learned context and loss history.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.context_len as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for v in &self.context {
            h.update(v.to_le_bytes());
        }
        for e in &self.loss_history {
            for v in [e.total, e.ce, e.se, e.kg] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().map(|e| e.total)
    }
}

/// Inputs shared by every run on one dataset.
#[derive(Clone, Copy, Debug)]
pub struct TrainInputs<'a> {
    pub manifest: &'a DatasetManifest,
    pub encoder: &'a Encoder,
    pub neighbors: Option<&'a NeighborSet>,
    pub pool: &'a TemplatePool,
}

impl<'a> TrainInputs<'a> {
    fn base_names(&self) -> Vec<String> {
        self.manifest.classes.names_of(&self.manifest.classes.base_indices())
    }

    /// The templates margins and ensemble anchors are computed from.
    pub fn effective_pool(&self, config: &TrainConfig) -> Result<TemplatePool> {
        self.pool.truncated(config.templates.min(self.pool.len()))
    }

    /// Margin table over the base classes for this configuration.
    pub fn margins(&self, config: &TrainConfig) -> Result<Margins> {
        let neighbors = self.base_neighbors(config)?;
        let pool = self.effective_pool(config)?;
        compute_margin_table(self.encoder, &self.base_names(), &neighbors, &pool, config.flags.margin_mode)
    }

    fn base_neighbors(&self, config: &TrainConfig) -> Result<NeighborSet> {
        let nb = self.neighbors.ok_or_else(|| Error::Config("semantic expansion needs a neighbor set".into()))?;
        nb.restricted(&self.base_names())?.truncated(config.neighbors.min(nb.n()))
    }
}

/// The context a run with `config` starts from.
pub fn initial_context(config: &TrainConfig, dim: usize) -> Result<Context> {
    Context::init(config.context_len, dim, &mut SeededRng::new(config.seed).stream(STREAM_CONTEXT))
}

/// Trains the context on the base classes of `config.fold`.
///
/// `margins`, when given, must come from the same template pool, encoder seed
/// and margin mode; it may cover more classes or neighbors than are used.
pub fn train(inputs: &TrainInputs, config: &TrainConfig, margins: Option<&Margins>) -> Result<TrainedPrompt> {
    config.validate()?;
    let manifest = inputs.manifest;
    let encoder = inputs.encoder;
    if manifest.dim != encoder.dim() {
        return Err(Error::Config(format!(
            "manifest dimension {} does not match encoder dimension {}",
            manifest.dim,
            encoder.dim()
        )));
    }
    let base = manifest.classes.base_indices();
    if base.is_empty() {
        return Err(Error::Protocol("manifest has no base classes".into()));
    }
    let base_names = manifest.classes.names_of(&base);
    let few_shot = sample_few_shot(manifest, config.fold, config.shots, config.seed)?;

    let mut objective = Objective::new(encoder, base_names.clone(), config.context_len)?;
    let mut margin_hash = None;
    if config.uses_semantic() {
        let neighbors = inputs.base_neighbors(config)?;
        let table = match margins {
            Some(t) => {
                let pool = config.flags.margin_mode.pool(&inputs.effective_pool(config)?);
                t.check_compatible(&pool.hash(), encoder.seed(), config.flags.margin_mode)?;
                t.restricted(&base_names, neighbors.n())?
            }
            None => inputs.margins(config)?,
        };
        margin_hash = Some(table.hash());
        objective = objective.with_semantic(&neighbors, table)?;
    }
    if config.mu > 0.0 {
        let anchor_pool = match config.kg_mode {
            KgMode::Single => TemplatePool::single_default(),
            KgMode::Ensemble => inputs.effective_pool(config)?,
        };
        objective = objective.with_anchors(kg_anchors(encoder, &base_names, &anchor_pool, config.kg_mode)?)?;
    }

    let local = |label: usize| base.iter().position(|&b| b == label).expect("few-shot labels are base");
    let data: Vec<(Vector, usize)> = few_shot
        .all_indices()
        .into_iter()
        .map(|i| (manifest.samples[i].embedding.clone(), local(manifest.samples[i].label)))
        .collect();

    let mut context = initial_context(config, encoder.dim())?;
    let mut shuffle = SeededRng::new(config.seed).stream(STREAM_SHUFFLE);
    let mut state = OptimizerState::new(&context);
    let weights = LossWeights {
        lambda: config.lambda,
        mu: config.mu,
        tau: config.tau,
        reduction: config.ce_reduction,
        flags: config.flags,
    };
    let batch_size = config.batch_size.unwrap_or(data.len()).min(data.len()).max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if batch_size < data.len() {
            shuffle.shuffle(&mut order);
        }
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(Vector, usize)> = chunk.iter().map(|&i| data[i].clone()).collect();
            let b = objective.total_loss(&context, &batch, &weights)?;
            if !b.total.is_finite() {
                return Err(Error::Numeric(format!("loss became non-finite in epoch {epoch}")));
            }
            for (s, v) in sums.iter_mut().zip([b.total, b.ce, b.se, b.kg]) {
                *s += v;
            }
            steps += 1;
            sgd_step(&mut context, &b.gradient, &mut state, config.lr, config.momentum)?;
        }
        let n = steps as f64;
        history.push(EpochLoss { total: sums[0] / n, ce: sums[1] / n, se: sums[2] / n, kg: sums[3] / n });
    }

    Ok(TrainedPrompt {
        config: config.clone(),
        dataset: manifest.name.clone(),
        classes: base_names,
        context_len: context.len(),
        dim: context.dim(),
        context: context.matrix().as_slice().to_vec(),
        margin_hash,
        encoder_hash: encoder.weights_hash(),
        loss_history: history,
        few_shot,
        seeds: RunSeeds { run: config.seed, encoder: encoder.seed(), rng: SeededRng::ALGORITHM.to_string() },
        optimizer: OPTIMIZER_ID.to_string(),
    })
}

/// What a sweep varies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "axis", content = "values")]
pub enum SweepAxis {
    Lambda(Vec<f64>),
    Neighbors(Vec<usize>),
    FlagGrid,
    MarginMode(Vec<MarginMode>),
    KgMode(Vec<KgMode>),
}

impl SweepAxis {
    fn settings(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            SweepAxis::Lambda(v) => v.iter().map(|&l| (format!("lambda={l}"), TrainConfig { lambda: l, ..base.clone() })).collect(),
            SweepAxis::Neighbors(v) => v.iter().map(|&n| (format!("N={n}"), TrainConfig { neighbors: n, ..base.clone() })).collect(),
            SweepAxis::FlagGrid => AblationFlags::grid()
                .into_iter()
                .map(|f| {
                    let flags = AblationFlags { margin_mode: base.flags.margin_mode, ..f };
                    (f.label(), TrainConfig { flags, ..base.clone() })
                })
                .collect(),
            SweepAxis::MarginMode(v) => v
                .iter()
                .map(|&m| {
                    let flags = AblationFlags { margin_mode: m, ..base.flags };
                    (format!("margins={m:?}"), TrainConfig { flags, ..base.clone() })
                })
                .collect(),
            SweepAxis::KgMode(v) => v.iter().map(|&k| (format!("kg={k:?}"), TrainConfig { kg_mode: k, ..base.clone() })).collect(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            SweepAxis::Lambda(v) => v.is_empty(),
            SweepAxis::Neighbors(v) => v.is_empty(),
            SweepAxis::MarginMode(v) => v.is_empty(),
            SweepAxis::KgMode(v) => v.is_empty(),
            SweepAxis::FlagGrid => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub config: TrainConfig,
    pub report: EvalReport,
}

/// One base-to-new protocol run per setting, each averaged over `seeds` and
/// all folds. Settings run in parallel; the table keeps axis order.
pub fn run_sweep(inputs: &TrainInputs, base: &TrainConfig, axis: &SweepAxis, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if axis.is_empty() {
        return Err(Error::Config("sweep axis has no values".into()));
    }
    axis.settings(base)
        .into_par_iter()
        .map(|(setting, config)| {
            let (report, _) = evaluation::base_to_new_protocol(inputs, &config, seeds)?;
            Ok(SweepRow { setting, config, report })
        })
        .collect()
}
