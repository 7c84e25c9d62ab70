//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs single-threaded.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use sept::evaluation::{base_to_new_protocol, diversity_of, diversity_score, filter_overlapping_neighbors, harmonic_mean, neighbor_similarity_stats};
use sept::loss::{compute_margin_table, kg_anchors, AblationFlags, CeReduction, KgMode, LossWeights, MarginMode, Objective};
use sept::prompting::{NeighborSet, TemplatePool, DEFAULT_TEMPLATE};
use sept::trainer::{train, TrainConfig, TrainInputs};
use sept::{Context, Margins, Matrix, SeededRng, Vector};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

/// Instances with a hinge argument closer than this to its kink are skipped by
/// the finite-difference check, since a ±1e-5 step can cross the kink.
const KINK_GAP: f64 = 1e-4;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs, format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()))
}

fn objective<'a>(inst: &'a Instance) -> Objective<'a, f64> {
    Objective::new(&inst.encoder, inst.names.clone(), inst.context.len()).unwrap().with_semantic(&inst.neighbors, inst.margins.clone()).unwrap()
}

fn perturbed(ctx: &Context, r: usize, c: usize, delta: f64) -> Context {
    let mut m: Matrix = ctx.matrix().clone();
    m.set(r, c, m.get(r, c) + delta);
    Context::from_matrix(m).unwrap()
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let (mut used, mut skipped, mut seed) = (0, 0, 5000);
    while used < 50 {
        let inst = instance(seed, &SMALL, (0.3, 1.7));
        seed += 1;
        if min_kink_gap(&inst) < KINK_GAP {
            skipped += 1;
            continue;
        }
        used += 1;
        let anchors = kg_anchors(&inst.encoder, &inst.names, &TemplatePool::single_default(), KgMode::Single).unwrap();
        let obj = objective(&inst).with_anchors(anchors).unwrap();
        let w = LossWeights { lambda: 3.0, mu: 0.5, tau: 0.01, reduction: CeReduction::Mean, flags: AblationFlags::full() };
        let grad = obj.total_loss(&inst.context, &inst.batch, &w).unwrap().gradient;
        for r in 0..SMALL.m {
            for c in 0..SMALL.d {
                let up = obj.total_loss(&perturbed(&inst.context, r, c, eps), &inst.batch, &w).unwrap().total;
                let down = obj.total_loss(&perturbed(&inst.context, r, c, -eps), &inst.batch, &w).unwrap().total;
                let fd = (up - down) / (2.0 * eps);
                let a = grad.get(r, c);
                worst = worst.max((a - fd).abs() / (1.0 + a.abs()));
            }
        }
    }
    ensure(worst <= 1e-4, format!("worst relative error {worst:.3e}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("50 instances ({skipped} skipped at a hinge kink), worst relative error {worst:.2e}"))
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut worst = [0.0f64; 5];
    let flags = AblationFlags::full();
    for seed in 0..100 {
        let inst = instance(7000 + seed, &SMALL, (0.3, 1.7));
        let obj = objective(&inst);
        let (z, p) = embeddings(&inst, &inst.context);
        for i in 0..SMALL.k {
            let (v, _) = obj.intra_loss(&inst.context, i, &flags).unwrap();
            worst[0] = worst[0].max((v - oracle_intra(&z, &p, &inst.margins, i, &flags)).abs());
            for j in (0..SMALL.k).filter(|&j| j != i) {
                let (v, _) = obj.inter_loss(&inst.context, i, j, &flags).unwrap();
                worst[1] = worst[1].max((v - oracle_inter(&z, &p, &inst.margins, i, j, &flags)).abs());
            }
        }
        let (se, _) = obj.semantic_expansion_loss(&inst.context, &flags).unwrap();
        worst[2] = worst[2].max((se - oracle_se(&z, &p, &inst.margins, &flags)).abs());
        let (ce, _) = obj.cross_entropy(&inst.context, &inst.batch, 0.01, CeReduction::Mean).unwrap();
        worst[3] = worst[3].max((ce - oracle_ce(&z, &inst.batch, 0.01, CeReduction::Mean)).abs());
        let table = compute_margin_table(&inst.encoder, &inst.names, &inst.neighbors, &inst.pool, MarginMode::Ensemble).unwrap();
        let want = oracle_margins(&inst.encoder, &inst.names, &inst.neighbors, &inst.pool);
        for (a, b) in table.values().iter().zip(&want) {
            worst[4] = worst[4].max((a - b).abs());
        }
    }
    let labels = ["intra", "inter", "se", "ce", "margins"];
    for (l, w) in labels.iter().zip(worst) {
        ensure(w <= 1e-12, format!("{l} differs by {w:.3e}"))?;
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!("100 instances, max abs diff {:.1e}", worst.iter().cloned().fold(0.0, f64::max)))
}

fn reduction() -> Check {
    let fx = load("synthetic_k8");
    let baseline = TrainConfig::baseline();
    let reference = reference_ce_run(&fx, &baseline);
    let variants = [
        ("baseline", baseline.clone()),
        ("lambda=0", TrainConfig { lambda: 0.0, mu: 0.0, flags: AblationFlags::full(), ..TrainConfig::default() }),
        ("flags off", TrainConfig { lambda: 3.0, mu: 0.0, flags: AblationFlags::off(), ..TrainConfig::default() }),
    ];
    for (name, cfg) in variants {
        let t = train(&fx.inputs(), &cfg, None).map_err(|e| e.to_string())?;
        let same = t.context.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("{name} differs from the CE-only loop"))?;
    }
    Ok(format!("{} epochs, three configurations bitwise equal to the CE-only loop", baseline.epochs))
}

fn margin_constancy() -> Check {
    let fx = load("synthetic_k8");
    let cfg = TrainConfig::default();
    let table = fx.inputs().margins(&cfg).map_err(|e| e.to_string())?;
    let before = table.hash();
    let trained = train(&fx.inputs(), &cfg, Some(&table)).map_err(|e| e.to_string())?;
    ensure(table.hash() == before, "table hash changed")?;
    ensure(trained.margin_hash.as_deref() == Some(before.as_str()), "recorded hash differs")?;

    let mut map = fx.neighbors.clone().into_map();
    for (class, list) in map.iter_mut() {
        list[0] = class.clone();
    }
    let nb = NeighborSet::new(map).unwrap();
    let names = fx.manifest.classes.names().to_vec();
    let with_self = compute_margin_table(&fx.encoder, &names, &nb, &fx.pool, MarginMode::Ensemble).unwrap();
    for i in 0..names.len() {
        ensure(with_self.get(i, i, 0) == 0.0, format!("m[{i}][{i}][0] = {}", with_self.get(i, i, 0)))?;
    }
    Ok(format!("hash {} stable over {} epochs; self margins exactly 0", &before[..12], cfg.epochs))
}

fn hinge_properties() -> Check {
    let mut rng = SeededRng::new(11);
    let flags = AblationFlags::full();
    for seed in 0..10_000u64 {
        let lo = 1.5 * rng.uniform();
        let inst = instance(seed, &SMALL, (lo, lo + 1.5 * rng.uniform()));
        let obj = objective(&inst);
        for i in 0..SMALL.k {
            let (v, _) = obj.intra_loss(&inst.context, i, &flags).unwrap();
            ensure(v >= 0.0, format!("instance {seed}: intra {v}"))?;
            for j in (0..SMALL.k).filter(|&j| j != i) {
                let (v, _) = obj.inter_loss(&inst.context, i, j, &flags).unwrap();
                ensure(v >= 0.0, format!("instance {seed}: inter {v}"))?;
            }
        }
        let (se, _) = obj.semantic_expansion_loss(&inst.context, &flags).unwrap();
        ensure(se >= 0.0, format!("instance {seed}: se {se}"))?;
    }

    let inst = instance(7, &SMALL, (1.0, 1.0));
    let mut doc = inst.margins.to_document();
    let (k, n) = (doc.k, doc.n);
    for (idx, v) in doc.values.iter_mut().enumerate() {
        let (i, j) = (idx / (k * n), (idx / n) % k);
        *v = if i == j { 10.0 } else { 0.0 };
    }
    let obj = Objective::new(&inst.encoder, inst.names.clone(), SMALL.m)
        .unwrap()
        .with_semantic(&inst.neighbors, Margins::from_document(doc).unwrap())
        .unwrap();
    let (se, grad) = obj.semantic_expansion_loss(&inst.context, &flags).unwrap();
    ensure(se == 0.0, format!("fixed point loss {se}"))?;
    ensure(grad.as_slice().iter().all(|&g| g == 0.0), "fixed point gradient is non-zero")?;
    Ok("10000 instances non-negative; fixed point exact".into())
}

fn harmonic() -> Check {
    let h = |a, b| harmonic_mean(a, b).map_err(|e| e.to_string());
    ensure(h(50.0, 50.0)? == 50.0, "H(50,50)")?;
    ensure(h(100.0, 0.0)? == 0.0, "H(100,0)")?;
    let v = h(97.27, 61.38)?;
    ensure((v - 75.27).abs() <= 0.01, format!("H(97.27,61.38) = {v}"))?;
    // per-run H averaged never exceeds H of the averaged accuracies
    let runs = [(98.0, 52.0), (96.5, 70.0), (97.3, 62.1)];
    let mean_h = runs.iter().map(|&(b, n)| harmonic_mean(b, n).unwrap()).sum::<f64>() / 3.0;
    let (mb, mn) = (runs.iter().map(|r| r.0).sum::<f64>() / 3.0, runs.iter().map(|r| r.1).sum::<f64>() / 3.0);
    let h_of_means = h(mb, mn)?;
    ensure(mean_h <= h_of_means, "per-run averaging exceeded H of means")?;
    Ok(format!("H(97.27,61.38) = {v:.4}; per-run mean {mean_h:.2} vs H of means {h_of_means:.2}"))
}

fn directional() -> Check {
    let start = Instant::now();
    let fx = load("synthetic_k8");
    let seeds = [0, 1, 2];
    let run = |cfg: &TrainConfig| base_to_new_protocol(&fx.inputs(), cfg, &seeds).map(|r| r.0).map_err(|e| e.to_string());
    let base = run(&TrainConfig { lambda: 0.0, ..TrainConfig::default() })?;
    let sept = run(&TrainConfig { lambda: 3.0, ..TrainConfig::default() })?;
    let detail = format!(
        "lambda=0 base {:.2} new {:.2} H {:.2}; lambda=3 base {:.2} new {:.2} H {:.2}",
        base.base, base.new, base.h, sept.base, sept.new, sept.h
    );
    ensure(sept.h >= base.h, format!("H dropped: {detail}"))?;
    ensure(sept.new - base.new >= 2.0, format!("new-class gain {:.2} < 2: {detail}", sept.new - base.new))?;
    within(start.elapsed(), 120.0)?;
    Ok(detail)
}

fn diversity_and_stats() -> Check {
    let fx = load("synthetic_k8");
    let same = vec!["distant dog bark".to_string(); 4];
    let d0 = diversity_score(&fx.encoder, &same, DEFAULT_TEMPLATE).map_err(|e| e.to_string())?;
    ensure(d0 == 0.0, format!("identical neighbors give {d0}"))?;
    let d = fx.encoder.dim();
    let ortho: Vec<Vector> = (0..4).map(|k| Vector::new((0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect()).unwrap()).collect();
    let d1 = diversity_of(&ortho).map_err(|e| e.to_string())?;
    ensure(d1 == 1.0, format!("orthogonal embeddings give {d1}"))?;
    let names = fx.manifest.classes.names().to_vec();
    let stats = neighbor_similarity_stats(&fx.encoder, &names, &fx.neighbors, DEFAULT_TEMPLATE).map_err(|e| e.to_string())?;
    let neg = stats.negative_mean.ok_or("no negative pairs")?;
    ensure(stats.positive_mean > neg, format!("positive {:.3} vs negative {neg:.3}", stats.positive_mean))?;
    Ok(format!("limits exact; positive mean {:.3} > negative mean {neg:.3}", stats.positive_mean))
}

fn overlap_parity() -> Check {
    let fx = load("synthetic_k8");
    let new_names = fx.manifest.classes.names_of(&fx.manifest.classes.new_indices());
    let outcome = filter_overlapping_neighbors(&fx.neighbors, &new_names).map_err(|e| e.to_string())?;
    ensure(outcome.removed == 0, format!("{} neighbors overlap", outcome.removed))?;
    let cfg = TrainConfig::default();
    let (a, ta) = base_to_new_protocol(&fx.inputs(), &cfg, &[0, 1, 2]).map_err(|e| e.to_string())?;
    let filtered = TrainInputs { neighbors: Some(&outcome.neighbors), ..fx.inputs() };
    let (b, tb) = base_to_new_protocol(&filtered, &cfg, &[0, 1, 2]).map_err(|e| e.to_string())?;
    ensure(a == b, "reports differ")?;
    ensure(ta.iter().zip(&tb).all(|(x, y)| x.content_hash() == y.content_hash()), "contexts differ")?;
    Ok(format!("0 of {} neighbors removed; H {:.2} both ways", outcome.total, a.h))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = fixture("synthetic_k8.json");
    let nb = fixture("synthetic_k8_neighbors.json");
    let mut files = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_sept"))
            .args(["train", "-m"])
            .arg(&manifest)
            .arg("--neighbors")
            .arg(&nb)
            .args(["--seed", "1", "-o"])
            .arg(&out)
            .env("SEPT_THREADS", "1")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), String::from_utf8_lossy(&status.stderr).to_string())?;
        files.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure(files[0] == files[1], "TrainedPrompt files differ")?;
    Ok(format!("{} bytes identical", files[0].len()))
}

fn main() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("thread pool");
    let checks: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("reduction to cross-entropy", reduction),
        ("margin constancy", margin_constancy),
        ("hinge properties", hinge_properties),
        ("harmonic mean", harmonic),
        ("synthetic base-to-new direction", directional),
        ("diversity and similarity stats", diversity_and_stats),
        ("overlap-filter parity", overlap_parity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
