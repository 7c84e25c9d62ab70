//! Classification, base-to-new and cross-dataset protocols, and neighbor
//! quality analytics.

use std::collections::HashSet;
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::manifest::DatasetManifest;
use crate::numerics::{cosine_sim, stable_softmax};
use crate::prompting::{class_embedding, ensemble_zero_shot_embedding, template_embedding, ClassSet, NeighborSet, Split, TemplatePool, DEFAULT_TEMPLATE};
use crate::trainer::{train, TrainConfig, TrainInputs, TrainedPrompt};
use crate::{Context, Encoder, Vector};

/// Audio embeddings with labels and split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub rows: Vec<EmbeddingRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub embedding: Vector,
    pub label: usize,
    pub split: Split,
}

impl EmbeddingBatch {
    pub fn from_manifest(manifest: &DatasetManifest, indices: &[usize]) -> Self {
        let rows = indices
            .iter()
            .map(|&i| {
                let s = &manifest.samples[i];
                EmbeddingRow { embedding: s.embedding.clone(), label: s.label, split: manifest.classes.split(s.label) }
            })
            .collect();
        Self { rows }
    }

    pub fn of_split(&self, split: Split) -> Self {
        Self { rows: self.rows.iter().filter(|r| r.split == split).cloned().collect() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Cosine/τ softmax head over a fixed set of class embeddings.
#[derive(Clone, Debug)]
pub struct Classifier {
    embeddings: Vec<Vector>,
    tau: f64,
}

impl Classifier {
    pub fn new(embeddings: Vec<Vector>, tau: f64) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Protocol("classifier needs at least one class".into()));
        }
        if !(tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(Self { embeddings, tau })
    }

    /// Prompt-tuned head: `z_i` for each name under `context`.
    pub fn prompted(encoder: &Encoder, names: &[String], context: &Context, tau: f64) -> Result<Self> {
        let classes = ClassSet::all_base(names.to_vec())?;
        let emb = (0..names.len()).map(|i| class_embedding(encoder, &classes, i, context)).collect::<Result<_>>()?;
        Self::new(emb, tau)
    }

    /// Hand-crafted head from one template or a renormalised pool average.
    pub fn zero_shot(encoder: &Encoder, names: &[String], prompt: &ZeroShotPrompt, tau: f64) -> Result<Self> {
        let emb = names
            .iter()
            .map(|n| match prompt {
                ZeroShotPrompt::Template(t) => template_embedding(encoder, t, n),
                ZeroShotPrompt::Ensemble(pool) => ensemble_zero_shot_embedding(encoder, n, pool),
            })
            .collect::<Result<_>>()?;
        Self::new(emb, tau)
    }

    pub fn embeddings(&self) -> &[Vector] {
        &self.embeddings
    }

    /// Predicted index (lowest index wins ties) and class probabilities.
    pub fn predict(&self, x: &Vector) -> Result<(usize, Vec<f64>)> {
        let logits: Vec<f64> = self.embeddings.iter().map(|z| Ok(cosine_sim(x, z)? / self.tau)).collect::<Result<_>>()?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        Ok((best, stable_softmax(&logits)?))
    }

    /// Percentage of rows whose label (mapped through `label_to_local`) is predicted.
    pub fn accuracy(&self, batch: &EmbeddingBatch, label_to_local: impl Fn(usize) -> Option<usize>) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Protocol("accuracy over an empty split".into()));
        }
        let mut correct = 0usize;
        for r in &batch.rows {
            let want = label_to_local(r.label)
                .ok_or_else(|| Error::Protocol(format!("label {} outside the evaluated label space", r.label)))?;
            if self.predict(&r.embedding)?.0 == want {
                correct += 1;
            }
        }
        Ok(100.0 * correct as f64 / batch.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ZeroShotPrompt {
    Template(String),
    Ensemble(TemplatePool),
}

impl Default for ZeroShotPrompt {
    fn default() -> Self {
        ZeroShotPrompt::Template(DEFAULT_TEMPLATE.to_string())
    }
}

/// Prompt-tuned prediction for one embedding over `names`.
pub fn classify(encoder: &Encoder, x: &Vector, context: &Context, names: &[String], tau: f64) -> Result<(usize, Vec<f64>)> {
    Classifier::prompted(encoder, names, context, tau)?.predict(x)
}

/// Zero-shot prediction for one embedding over `names`.
pub fn zero_shot_classify(encoder: &Encoder, x: &Vector, names: &[String], prompt: &ZeroShotPrompt, tau: f64) -> Result<(usize, Vec<f64>)> {
    Classifier::zero_shot(encoder, names, prompt, tau)?.predict(x)
}

/// `2ab/(a+b)`, zero when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0) || !(b >= 0.0) {
        return Err(Error::Domain(format!("harmonic mean of negative accuracy ({a}, {b})")));
    }
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub fold: usize,
    pub base: f64,
    pub new: f64,
    pub h: f64,
}

/// Base/new/H averaged independently over runs; H is computed per run first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub base: f64,
    pub new: f64,
    pub h: f64,
    pub runs: Vec<RunRecord>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_runs(dataset: &str, runs: Vec<RunRecord>, config_hash: String) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Protocol("no runs to aggregate".into()));
        }
        let n = runs.len() as f64;
        let mean = |f: fn(&RunRecord) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Ok(Self { dataset: dataset.to_string(), base: mean(|r| r.base), new: mean(|r| r.new), h: mean(|r| r.h), runs, config_hash })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,fold,base,new,h\n");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{:.4},{:.4},{:.4}", r.seed, r.fold, r.base, r.new, r.h);
        }
        let _ = writeln!(s, "mean,,{:.4},{:.4},{:.4}", self.base, self.new, self.h);
        s
    }
}

fn check_compatible(trained: &TrainedPrompt, manifest: &DatasetManifest, encoder: &Encoder) -> Result<()> {
    if trained.dim != encoder.dim() || manifest.dim != encoder.dim() {
        return Err(Error::Config(format!(
            "dimension mismatch: prompt {}, manifest {}, encoder {}",
            trained.dim,
            manifest.dim,
            encoder.dim()
        )));
    }
    if trained.encoder_hash != encoder.weights_hash() {
        return Err(Error::Config("trained prompt was learned against a different encoder".into()));
    }
    Ok(())
}

/// Accuracy of one trained prompt on its fold's test partition, base and new
/// label spaces evaluated separately.
pub fn evaluate_run(trained: &TrainedPrompt, manifest: &DatasetManifest, encoder: &Encoder) -> Result<RunRecord> {
    check_compatible(trained, manifest, encoder)?;
    let context = trained.context()?;
    let test = EmbeddingBatch::from_manifest(manifest, &manifest.fold(trained.config.fold)?.test);
    let mut acc = [0.0; 2];
    for (slot, split) in [Split::Base, Split::New].into_iter().enumerate() {
        let idx = manifest.classes.indices(split);
        if idx.is_empty() {
            return Err(Error::Protocol(format!("manifest has no {split:?} classes")));
        }
        let head = Classifier::prompted(encoder, &manifest.classes.names_of(&idx), &context, trained.config.tau)?;
        let rows = test.of_split(split);
        if rows.is_empty() {
            return Err(Error::Protocol(format!("fold {} has no {split:?} test samples", trained.config.fold)));
        }
        acc[slot] = head.accuracy(&rows, |l| idx.iter().position(|&c| c == l))?;
    }
    Ok(RunRecord { seed: trained.config.seed, fold: trained.config.fold, base: acc[0], new: acc[1], h: harmonic_mean(acc[0], acc[1])? })
}

/// Per-run base/new/H for each trained prompt, then averaged.
pub fn evaluate_base_to_new(trained: &[TrainedPrompt], manifest: &DatasetManifest, encoder: &Encoder) -> Result<EvalReport> {
    let runs = trained.iter().map(|t| evaluate_run(t, manifest, encoder)).collect::<Result<Vec<_>>>()?;
    let hash = trained.first().map(|t| t.config.hash()).unwrap_or_default();
    EvalReport::from_runs(&manifest.name, runs, hash)
}

/// Trains on every fold for every seed and evaluates base-to-new.
pub fn base_to_new_protocol(inputs: &TrainInputs, config: &TrainConfig, seeds: &[u64]) -> Result<(EvalReport, Vec<TrainedPrompt>)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let margins = if config.uses_semantic() { Some(inputs.margins(config)?) } else { None };
    let mut trained = Vec::new();
    for &seed in seeds {
        for fold in 0..inputs.manifest.folds.len() {
            let cfg = TrainConfig { seed, fold, ..config.clone() };
            trained.push(train(inputs, &cfg, margins.as_ref())?);
        }
    }
    let mut report = evaluate_base_to_new(&trained, inputs.manifest, inputs.encoder)?;
    report.config_hash = config.hash();
    Ok((report, trained))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossReport {
    pub source: String,
    pub target: String,
    pub source_acc: f64,
    pub target_acc: f64,
}

fn all_test(manifest: &DatasetManifest) -> Vec<usize> {
    let mut seen = HashSet::new();
    manifest.folds.iter().flat_map(|f| f.test.iter().copied()).filter(|i| seen.insert(*i)).collect()
}

/// Source accuracy on the source test samples over all source classes, and
/// target accuracy on the target test samples over all target classes, both
/// under the same learned context.
pub fn evaluate_cross_dataset(trained: &TrainedPrompt, source: &DatasetManifest, target: &DatasetManifest, encoder: &Encoder) -> Result<CrossReport> {
    for m in [source, target] {
        if m.dim != trained.dim || m.dim != encoder.dim() {
            return Err(Error::Config(format!(
                "dataset '{}' has dimension {}, trained prompt {} and encoder {}",
                m.name,
                m.dim,
                trained.dim,
                encoder.dim()
            )));
        }
    }
    let context = trained.context()?;
    let acc = |m: &DatasetManifest| -> Result<f64> {
        let batch = EmbeddingBatch::from_manifest(m, &all_test(m));
        if batch.is_empty() {
            return Err(Error::Protocol(format!("dataset '{}' has no test samples", m.name)));
        }
        let head = Classifier::prompted(encoder, m.classes.names(), &context, trained.config.tau)?;
        head.accuracy(&batch, Some)
    };
    Ok(CrossReport { source: source.name.clone(), target: target.name.clone(), source_acc: acc(source)?, target_acc: acc(target)? })
}

/// Mean pairwise dissimilarity `1 − mean sim(p_n, p_m)` over neighbor embeddings.
pub fn diversity_of(embeddings: &[Vector]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Domain(format!("diversity needs at least two neighbors, got {n}")));
    }
    let mut sum = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            sum += cosine_sim(&embeddings[a], &embeddings[b])?;
        }
    }
    Ok(1.0 - sum / (n * (n - 1) / 2) as f64)
}

/// Diversity of one class's neighbors under a hand-crafted template.
pub fn diversity_score(encoder: &Encoder, neighbors: &[String], template: &str) -> Result<f64> {
    let emb = neighbors.iter().map(|p| template_embedding(encoder, template, p)).collect::<Result<Vec<_>>>()?;
    diversity_of(&emb)
}

/// Per-class diversity and the dataset mean.
pub fn dataset_diversity(encoder: &Encoder, neighbors: &NeighborSet, template: &str) -> Result<(IndexMap<String, f64>, f64)> {
    let per: IndexMap<String, f64> =
        neighbors.iter().map(|(c, l)| Ok((c.to_string(), diversity_score(encoder, l, template)?))).collect::<Result<_>>()?;
    if per.is_empty() {
        return Err(Error::Domain("no classes to score".into()));
    }
    let mean = per.values().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;
pub const HISTOGRAM_BINS: usize = 40;

/// Counts over `[-1, 1]` in 0.05-wide bins; bin `k` covers
/// `[-1 + 0.05k, -1 + 0.05(k+1))`, the last bin also includes 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

fn bin_of(s: f64) -> usize {
    (((s + 1.0) / HISTOGRAM_BIN_WIDTH).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub histogram: Histogram,
    pub positive_mean: f64,
    /// Absent with a single class.
    pub negative_mean: Option<f64>,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

/// Similarities of class embeddings to their own neighbors (positive) and to
/// other classes' neighbors (negative), under a hand-crafted template.
pub fn neighbor_similarity_stats(encoder: &Encoder, class_names: &[String], neighbors: &NeighborSet, template: &str) -> Result<SimilarityStats> {
    let cls = class_names.iter().map(|c| template_embedding(encoder, template, c)).collect::<Result<Vec<_>>>()?;
    let nbs = class_names
        .iter()
        .map(|c| neighbors.get(c)?.iter().map(|p| template_embedding(encoder, template, p)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let edges = (0..=HISTOGRAM_BINS).map(|k| -1.0 + HISTOGRAM_BIN_WIDTH * k as f64).collect();
    let mut hist = Histogram { edges, positive: vec![0; HISTOGRAM_BINS], negative: vec![0; HISTOGRAM_BINS] };
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, c) in cls.iter().enumerate() {
        for (j, list) in nbs.iter().enumerate() {
            for p in list {
                let s = cosine_sim(c, p)?;
                if i == j {
                    hist.positive[bin_of(s)] += 1;
                    pos.push(s);
                } else {
                    hist.negative[bin_of(s)] += 1;
                    neg.push(s);
                }
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(SimilarityStats {
        histogram: hist,
        positive_mean: mean(&pos).ok_or_else(|| Error::Domain("no positive pairs".into()))?,
        negative_mean: mean(&neg),
        positive_pairs: pos.len(),
        negative_pairs: neg.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub neighbors: NeighborSet,
    pub removed: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Drops neighbors that equal (after trimming and lowercasing) any new-class
/// name, then re-pads every list to the original length. A class left with no
/// neighbors is a data error.
pub fn filter_overlapping_neighbors(neighbors: &NeighborSet, new_class_names: &[String]) -> Result<FilterOutcome> {
    let norm = |s: &str| s.trim().to_lowercase();
    let banned: HashSet<String> = new_class_names.iter().map(|s| norm(s)).collect();
    let mut removed = 0;
    let mut total = 0;
    let mut kept = IndexMap::new();
    for (class, list) in neighbors.iter() {
        total += list.len();
        let keep: Vec<String> = list.iter().filter(|p| !banned.contains(&norm(p))).cloned().collect();
        removed += list.len() - keep.len();
        if keep.is_empty() && !list.is_empty() {
            return Err(Error::Data(format!("every neighbor of class '{class}' collides with a new class name")));
        }
        kept.insert(class.to_string(), keep);
    }
    let filtered = NeighborSet::with_len(kept, neighbors.n())?;
    let fraction = if total == 0 { 0.0 } else { removed as f64 / total as f64 };
    Ok(FilterOutcome { neighbors: filtered, removed, total, fraction })
}

/// One JSON-lines record of an embedding dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDumpRecord {
    pub name: String,
    pub split: String,
    pub vector: Vec<f64>,
}

/// Class and neighbor prompt embeddings under `context` (or the default
/// template when `context` is `None`), for external plotting.
pub fn dump_embeddings(encoder: &Encoder, classes: &ClassSet, neighbors: Option<&NeighborSet>, context: Option<&Context>) -> Result<Vec<EmbeddingDumpRecord>> {
    let embed = |text: &str| -> Result<Vector> {
        match context {
            Some(ctx) => {
                let p = crate::prompting::context_prompt(encoder, ctx.len(), text)?;
                encoder.encode(&p, ctx)
            }
            None => template_embedding(encoder, DEFAULT_TEMPLATE, text),
        }
    };
    let mut out = Vec::new();
    for (i, name) in classes.names().iter().enumerate() {
        let split = match classes.split(i) {
            Split::Base => "base",
            Split::New => "new",
        };
        out.push(EmbeddingDumpRecord { name: name.clone(), split: split.into(), vector: embed(name)?.to_f64() });
        if let Some(nb) = neighbors {
            if let Ok(list) = nb.get(name) {
                for p in list {
                    out.push(EmbeddingDumpRecord { name: p.clone(), split: format!("{split}-neighbor:{name}"), vector: embed(p)?.to_f64() });
                }
            }
        }
    }
    Ok(out)
}

/// Stable digest used in report metadata.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_f64(x).unwrap()
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(harmonic_mean(50.0, 50.0).unwrap(), 50.0);
        assert_eq!(harmonic_mean(100.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert!((harmonic_mean(97.27, 61.38).unwrap() - 75.27).abs() < 0.01);
        assert!(matches!(harmonic_mean(-1.0, 3.0), Err(Error::Domain(_))));
    }

    #[test]
    fn single_class_and_ties() {
        let head = Classifier::new(vec![v(&[1.0, 0.0])], 0.01).unwrap();
        assert_eq!(head.predict(&v(&[0.3, 0.9])).unwrap(), (0, vec![1.0]));
        let tie = Classifier::new(vec![v(&[1.0, 1.0]), v(&[1.0, -1.0])], 0.5).unwrap();
        assert_eq!(tie.predict(&v(&[1.0, 0.0])).unwrap().0, 0);
    }

    #[test]
    fn crafted_cosines_give_closed_form_probabilities() {
        let a = v(&[0.9, (1.0f64 - 0.81).sqrt(), 0.0]);
        let b = v(&[0.1, 0.0, (1.0f64 - 0.01).sqrt()]);
        let head = Classifier::new(vec![a, b], 1.0).unwrap();
        let (i, p) = head.predict(&v(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(i, 0);
        let want = 0.9f64.exp() / (0.9f64.exp() + 0.1f64.exp());
        assert!((p[0] - want).abs() < 1e-12);
    }

    #[test]
    fn diversity_limits() {
        let same = vec![v(&[0.2, 0.4]); 3];
        assert_eq!(diversity_of(&same).unwrap(), 0.0);
        let ortho = vec![v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0])];
        assert_eq!(diversity_of(&ortho).unwrap(), 1.0);
        // cos(a,b)=0.6, cos(a,c)=0.8, cos(b,c)=0 → 1 - 1.4/3
        let crafted = vec![v(&[1.0, 0.0]), v(&[0.6, 0.8]), v(&[0.8, -0.6])];
        assert!((diversity_of(&crafted).unwrap() - (1.0 - 1.4 / 3.0)).abs() < 1e-12);
        assert!(matches!(diversity_of(&[v(&[1.0])]), Err(Error::Domain(_))));
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(bin_of(-1.0), 0);
        assert_eq!(bin_of(1.0), 39);
        assert_eq!(bin_of(0.0), 20);
        assert_eq!(bin_of(-0.96), 0);
        assert_eq!(bin_of(-0.95), 1);
    }

    fn nb(pairs: &[(&str, &[&str])]) -> NeighborSet {
        NeighborSet::new(pairs.iter().map(|(c, l)| (c.to_string(), l.iter().map(|s| s.to_string()).collect())).collect()).unwrap()
    }

    #[test]
    fn filter_without_collisions_is_identity() {
        let set = nb(&[("dog", &["puppy", "bark"]), ("rain", &["drizzle", "storm"])]);
        let out = filter_overlapping_neighbors(&set, &["siren".into()]).unwrap();
        assert_eq!(out.neighbors, set);
        assert_eq!(out.fraction, 0.0);
    }

    #[test]
    fn filter_counts_and_pads() {
        let set = nb(&[("dog", &["puppy", " Siren "]), ("rain", &["drizzle", "storm"])]);
        let out = filter_overlapping_neighbors(&set, &["siren".into()]).unwrap();
        assert_eq!(out.removed, 1);
        assert_eq!(out.fraction, 0.25);
        assert_eq!(out.neighbors.get("dog").unwrap(), ["puppy", "puppy"]);
        let all = nb(&[("dog", &["siren", "SIREN"])]);
        assert!(matches!(filter_overlapping_neighbors(&all, &["siren".into()]), Err(Error::Data(_))));
    }
}
