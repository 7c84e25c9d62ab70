//! Random instances and naive-loop reference implementations shared by the
//! integration tests.

#![allow(dead_code, clippy::needless_range_loop)]

use std::path::PathBuf;

use indexmap::IndexMap;
use sept::encoder::EncoderConfig;
use sept::io::manifest::DatasetManifest;
use sept::loss::{compute_margin_table, AblationFlags, CeReduction, MarginDocument, MarginMode, Objective};
use sept::prompting::{class_embedding, neighbor_embedding, template_embedding, ClassSet, NeighborSet, TemplatePool};
use sept::trainer::{initial_context, sample_few_shot, sgd_step, OptimizerState, TrainConfig, TrainInputs};
use sept::{Context, Encoder, Margins, Matrix, SeededRng, Vector};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

const WORDS: &[&str] = &[
    "dog", "cat", "rain", "siren", "piano", "thunder", "bell", "engine", "bird", "wind", "drum", "violin", "horn", "laugh",
    "cough", "train", "clock", "water", "fire", "door", "glass", "crowd", "guitar", "frog", "insect", "motor", "whistle",
    "snore", "knock", "typing",
];

/// A small objective instance with random names, neighbors, audio and context.
pub struct Instance {
    pub encoder: Encoder,
    pub names: Vec<String>,
    pub neighbors: NeighborSet,
    pub pool: TemplatePool,
    pub margins: Margins,
    pub context: Context,
    pub batch: Vec<(Vector, usize)>,
}

pub struct Shape {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub t: usize,
    pub batch: usize,
}

pub const SMALL: Shape = Shape { k: 4, n: 3, m: 2, d: 8, t: 3, batch: 6 };

pub fn random_unit(d: usize, rng: &mut SeededRng) -> Vector {
    loop {
        let v = Vector::new((0..d).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        if v.norm() > 1e-3 {
            return v.normalized().unwrap();
        }
    }
}

/// Margins are the template-derived table scaled entrywise by a random factor
/// in `[lo, hi]`, so that both sides of every hinge are exercised.
pub fn instance(seed: u64, shape: &Shape, scale: (f64, f64)) -> Instance {
    let mut rng = SeededRng::new(seed).stream(99);
    let encoder = Encoder::new(EncoderConfig::mlp(shape.d, seed)).unwrap();
    let picks = rng.sample_indices(WORDS.len(), shape.k + shape.k * shape.n);
    let names: Vec<String> = picks[..shape.k].iter().map(|&i| WORDS[i].to_string()).collect();
    let mut map = IndexMap::new();
    for (c, name) in names.iter().enumerate() {
        let start = shape.k + c * shape.n;
        let list = picks[start..start + shape.n].iter().map(|&i| format!("{} {}", WORDS[i], name)).collect();
        map.insert(name.clone(), list);
    }
    let neighbors = NeighborSet::new(map).unwrap();
    let shipped = TemplatePool::shipped();
    let t_idx = rng.sample_indices(shipped.len(), shape.t);
    let pool = TemplatePool::new(t_idx.iter().map(|&i| shipped.templates()[i].clone()).collect()).unwrap();
    let table = compute_margin_table(&encoder, &names, &neighbors, &pool, MarginMode::Ensemble).unwrap();
    let mut doc = table.to_document();
    for v in doc.values.iter_mut() {
        *v *= scale.0 + (scale.1 - scale.0) * rng.uniform();
    }
    let margins = Margins::from_document(doc).unwrap();
    let ctx = Matrix::from_vec(shape.m, shape.d, (0..shape.m * shape.d).map(|_| rng.normal(0.0, 0.5)).collect()).unwrap();
    let context = Context::from_matrix(ctx).unwrap();
    let batch = (0..shape.batch).map(|_| (random_unit(shape.d, &mut rng), rng.below(shape.k))).collect();
    Instance { encoder, names, neighbors, pool, margins, context, batch }
}

/// Class and neighbor embeddings under the instance's context.
pub fn embeddings(inst: &Instance, context: &Context) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let classes = ClassSet::all_base(inst.names.clone()).unwrap();
    let z = (0..inst.names.len()).map(|i| class_embedding(&inst.encoder, &classes, i, context).unwrap().to_f64()).collect();
    let p = (0..inst.names.len())
        .map(|i| {
            (0..inst.neighbors.n())
                .map(|n| neighbor_embedding(&inst.encoder, &classes, &inst.neighbors, i, n, context).unwrap().to_f64())
                .collect()
        })
        .collect();
    (z, p)
}

pub fn naive_l2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

pub fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

pub fn oracle_intra(z: &[Vec<f64>], p: &[Vec<Vec<f64>>], m: &Margins, i: usize, flags: &AblationFlags) -> f64 {
    let n = p[i].len();
    let mut s = 0.0;
    for k in 0..n {
        let d = naive_l2(&z[i], &p[i][k]);
        s += if flags.intra_margin { (d - m.get(i, i, k)).max(0.0) } else { d };
    }
    s / n as f64
}

pub fn oracle_inter(z: &[Vec<f64>], p: &[Vec<Vec<f64>>], m: &Margins, i: usize, j: usize, flags: &AblationFlags) -> f64 {
    let n = p[j].len();
    let mut s = 0.0;
    for k in 0..n {
        let d = naive_l2(&z[i], &p[j][k]);
        let target = if flags.inter_margin { m.get(i, j, k) } else { 2.0 };
        s += (target - d).max(0.0);
    }
    s / n as f64
}

pub fn oracle_se(z: &[Vec<f64>], p: &[Vec<Vec<f64>>], m: &Margins, flags: &AblationFlags) -> f64 {
    let k = z.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut term = 0.0;
        if flags.use_intra {
            term += oracle_intra(z, p, m, i, flags);
        }
        if flags.use_inter && k > 1 {
            let mut row = 0.0;
            for j in 0..k {
                if j != i {
                    row += oracle_inter(z, p, m, i, j, flags);
                }
            }
            term += row / (k - 1) as f64;
        }
        total += term;
    }
    total / k as f64
}

pub fn oracle_ce(z: &[Vec<f64>], batch: &[(Vector, usize)], tau: f64, reduction: CeReduction) -> f64 {
    let mut total = 0.0;
    for (x, y) in batch {
        let logits: Vec<f64> = z.iter().map(|zi| naive_cos(x.as_slice(), zi) / tau).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for l in &logits {
            denom += (l - mx).exp();
        }
        total += -(logits[*y] - mx - denom.ln());
    }
    match reduction {
        CeReduction::Mean => total / batch.len() as f64,
        CeReduction::Sum => total,
    }
}

pub fn oracle_margins(encoder: &Encoder, names: &[String], neighbors: &NeighborSet, pool: &TemplatePool) -> Vec<f64> {
    let n = neighbors.n();
    let mut out = Vec::new();
    for ci in names {
        for cj in names {
            for k in 0..n {
                let pj = &neighbors.get(cj).unwrap()[k];
                let mut s = 0.0;
                for t in pool.templates() {
                    let a = template_embedding(encoder, t, ci).unwrap().to_f64();
                    let b = template_embedding(encoder, t, pj).unwrap().to_f64();
                    s += naive_l2(&a, &b);
                }
                out.push(s / pool.len() as f64);
            }
        }
    }
    out
}

pub fn margin_doc(m: &Margins) -> MarginDocument {
    m.to_document()
}

pub struct Fixture {
    pub manifest: DatasetManifest,
    pub encoder: Encoder,
    pub neighbors: NeighborSet,
    pub pool: TemplatePool,
}

pub fn load(name: &str) -> Fixture {
    let manifest = DatasetManifest::load(fixture(&format!("{name}.json"))).unwrap();
    let cfg = manifest.encoder.clone().unwrap_or_else(|| EncoderConfig::mlp(manifest.dim, 0));
    let encoder = Encoder::new(cfg).unwrap();
    let text = std::fs::read_to_string(fixture(&format!("{name}_neighbors.json"))).unwrap();
    let neighbors: NeighborSet = serde_json::from_str(&text).unwrap();
    Fixture { manifest, encoder, neighbors, pool: TemplatePool::shipped() }
}

impl Fixture {
    pub fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs { manifest: &self.manifest, encoder: &self.encoder, neighbors: Some(&self.neighbors), pool: &self.pool }
    }
}

/// Plain full-batch CE loop written against the public pieces only.
pub fn reference_ce_run(fx: &Fixture, config: &TrainConfig) -> Vec<f64> {
    let base = fx.manifest.classes.base_indices();
    let names = fx.manifest.classes.names_of(&base);
    let shots = sample_few_shot(&fx.manifest, config.fold, config.shots, config.seed).unwrap();
    let batch: Vec<(Vector, usize)> = shots
        .all_indices()
        .into_iter()
        .map(|i| {
            let s = &fx.manifest.samples[i];
            (s.embedding.clone(), base.iter().position(|&b| b == s.label).unwrap())
        })
        .collect();
    let objective = Objective::new(&fx.encoder, names, config.context_len).unwrap();
    let mut context = initial_context(config, fx.encoder.dim()).unwrap();
    let mut state = OptimizerState::new(&context);
    for _ in 0..config.epochs {
        let (_, grad) = objective.cross_entropy(&context, &batch, config.tau, config.ce_reduction).unwrap();
        sgd_step(&mut context, &grad, &mut state, config.lr, config.momentum).unwrap();
    }
    context.matrix().as_slice().to_vec()
}


/// Smallest distance of any hinge argument from its kink at the instance's
/// context; central differences are only meaningful when this is not tiny.
pub fn min_kink_gap(inst: &Instance) -> f64 {
    let (z, p) = embeddings(inst, &inst.context);
    let k = z.len();
    let mut gap = f64::INFINITY;
    for i in 0..k {
        for j in 0..k {
            for n in 0..p[j].len() {
                gap = gap.min((naive_l2(&z[i], &p[j][n]) - inst.margins.get(i, j, n)).abs());
            }
        }
    }
    gap
}
