//! Synthetic datasets whose audio embeddings cluster around the hand-crafted
//! template embedding of each class name, and paraphrase-style neighbors.

use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::manifest::{DatasetManifest, Fold, Sample};
use crate::prompting::{template_embedding, ClassSet, NeighborSet, DEFAULT_TEMPLATE};
use crate::{Encoder, SeededRng, Vector};

const STREAM_SAMPLES: u64 = 1;
const STREAM_NEIGHBORS: u64 = 2;

/// Built-in class vocabularies, paired for cross-dataset transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    SoundEvent,
    UrbanSound,
    Emotion,
    EmotionAlt,
    Instrument,
    InstrumentFamily,
}

impl Domain {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            Domain::SoundEvent => &[
                "dog", "rain", "crying baby", "clock tick", "helicopter", "rooster", "sea waves", "chainsaw", "crackling fire",
                "church bells", "sneezing", "door knock", "thunderstorm", "vacuum cleaner", "glass breaking", "frog", "airplane",
                "keyboard typing", "crickets", "footsteps",
            ],
            Domain::UrbanSound => &[
                "dog bark", "siren", "car horn", "jackhammer", "air conditioner", "children playing", "drilling", "engine idling",
                "gun shot", "street music",
            ],
            Domain::Emotion => &["angry", "calm", "happy", "sad", "fearful", "disgust", "neutral", "surprised"],
            Domain::EmotionAlt => &["anger", "happiness", "sadness", "fear", "disgusted", "neutral speech"],
            Domain::Instrument => &[
                "guitar", "violin", "piano", "flute", "trumpet", "drums", "cello", "saxophone", "organ", "clarinet",
            ],
            Domain::InstrumentFamily => &["bass", "brass", "mallet", "reed", "string", "vocal", "keyboard", "synth lead"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub name: String,
    pub k: usize,
    pub domain: Domain,
    /// Overrides the domain vocabulary.
    pub classes: Option<Vec<String>>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub folds: usize,
    pub d: usize,
    /// Per-coordinate standard deviation of the sample noise.
    pub sigma: f64,
    pub seed: u64,
    pub n_neighbors: usize,
    /// Probability that a class word is swapped for an unrelated word in a neighbor.
    pub neighbor_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            k: 8,
            domain: Domain::SoundEvent,
            classes: None,
            train_per_class: 16,
            test_per_class: 24,
            folds: 1,
            d: 32,
            sigma: 0.35,
            seed: 0,
            n_neighbors: 5,
            neighbor_noise: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("synthetic data needs K >= 2, got {}", self.k)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be finite and non-negative, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.neighbor_noise) {
            return Err(Error::Config(format!("neighbor noise must lie in [0, 1], got {}", self.neighbor_noise)));
        }
        if self.d == 0 || self.folds == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("d, folds and per-class sample counts must be positive".into()));
        }
        if self.folds > 1 && self.folds * self.test_per_class > self.train_per_class + self.test_per_class {
            return Err(Error::Config(format!(
                "{} folds of {} test samples do not fit in {} samples per class",
                self.folds,
                self.test_per_class,
                self.train_per_class + self.test_per_class
            )));
        }
        let available = self.classes.as_ref().map_or(self.domain.names().len(), Vec::len);
        if self.k > available {
            return Err(Error::Config(format!("K = {} exceeds the {available} available class names", self.k)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        match &self.classes {
            Some(c) => c.iter().take(self.k).cloned().collect(),
            None => self.domain.names().iter().take(self.k).map(|s| s.to_string()).collect(),
        }
    }
}

/// Samples `center + N(0, σ²I)`, renormalised, around the default-template
/// embedding of each class name. The first ⌈K/2⌉ classes are base.
///
/// With one fold the first `train_per_class` samples of each class train and
/// the rest test; with `F` folds, fold `f` tests on the `f`-th block of
/// `test_per_class` samples and trains on the remainder.
pub fn generate_synthetic(spec: &SyntheticSpec, encoder: &Encoder) -> Result<DatasetManifest> {
    spec.validate()?;
    if spec.d != encoder.dim() {
        return Err(Error::Config(format!("synthetic dimension {} does not match encoder dimension {}", spec.d, encoder.dim())));
    }
    let names = spec.class_names();
    let classes = ClassSet::halved(names.clone())?;
    let mut rng = SeededRng::new(spec.seed).stream(STREAM_SAMPLES);
    let per_class = spec.train_per_class + spec.test_per_class;
    let mut samples = Vec::with_capacity(per_class * spec.k);
    for (label, name) in names.iter().enumerate() {
        let center = template_embedding(encoder, DEFAULT_TEMPLATE, name)?;
        for _ in 0..per_class {
            let embedding = if spec.sigma == 0.0 {
                center.clone()
            } else {
                let raw: Vec<f64> = center.as_slice().iter().map(|&c| c + rng.normal(0.0, spec.sigma)).collect();
                let v = Vector::new(raw)?;
                if v.norm() > 0.0 { v.normalized()? } else { center.clone() }
            };
            samples.push(Sample { embedding, label });
        }
    }
    let folds = (0..spec.folds)
        .map(|f| {
            let (lo, hi) = if spec.folds == 1 {
                (spec.train_per_class, per_class)
            } else {
                (f * spec.test_per_class, (f + 1) * spec.test_per_class)
            };
            let mut fold = Fold { train: Vec::new(), test: Vec::new() };
            for c in 0..spec.k {
                for s in 0..per_class {
                    let idx = c * per_class + s;
                    if (lo..hi).contains(&s) {
                        fold.test.push(idx);
                    } else {
                        fold.train.push(idx);
                    }
                }
            }
            fold
        })
        .collect();
    DatasetManifest { name: spec.name.clone(), classes, dim: spec.d, folds, samples, encoder: Some(encoder.config().clone()) }.validated()
}

const DESCRIPTORS: &[&str] = &[
    "loud", "faint", "distant", "nearby", "muffled", "sharp", "steady", "sudden", "echoing", "rhythmic", "soft", "harsh",
    "continuous", "brief", "repeated", "deep", "shrill", "low", "bright", "dull",
];

const SUFFIXES: &[&str] = &["sound", "noise", "audio", "recording", "clip", "tone", "signal", "sample"];

const FILLERS: &[&str] = &[
    "rumble", "hum", "buzz", "chatter", "whistle", "rustle", "clatter", "hiss", "murmur", "thump", "crackle", "drone", "echo",
    "pulse", "whir", "tap", "clang", "roar",
];

/// Paraphrase-style neighbors: a descriptor, the class words (each swapped
/// for an unrelated word with probability `noise`) and an optional suffix.
/// Lists are distinct per class and never equal any class name.
pub fn synthetic_neighbors(class_names: &[String], n: usize, noise: f64, seed: u64) -> Result<NeighborSet> {
    if n == 0 {
        return Err(Error::Config("neighbor count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Config(format!("neighbor noise must lie in [0, 1], got {noise}")));
    }
    let banned: HashSet<String> = class_names.iter().map(|c| c.trim().to_lowercase()).collect();
    let mut rng = SeededRng::new(seed).stream(STREAM_NEIGHBORS);
    let mut map = IndexMap::new();
    for class in class_names {
        let words: Vec<&str> = class.split_whitespace().collect();
        let mut seen = HashSet::new();
        let mut list = Vec::with_capacity(n);
        for _ in 0..1000 {
            if list.len() == n {
                break;
            }
            let mut parts = vec![DESCRIPTORS[rng.below(DESCRIPTORS.len())]];
            for w in &words {
                parts.push(if rng.uniform() < noise { FILLERS[rng.below(FILLERS.len())] } else { w });
            }
            if rng.uniform() < 0.5 {
                parts.push(SUFFIXES[rng.below(SUFFIXES.len())]);
            }
            let text = parts.join(" ");
            if !banned.contains(&text) && seen.insert(text.clone()) {
                list.push(text);
            }
        }
        if list.len() < n {
            return Err(Error::Data(format!("could not build {n} distinct neighbors for '{class}'")));
        }
        map.insert(class.clone(), list);
    }
    NeighborSet::with_len(map, n)
}
