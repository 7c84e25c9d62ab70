mod common;

use std::path::PathBuf;

use common::fixture;
use serde_json::{json, Value};
use sept::encoder::{EncoderConfig, PromptTokens};
use sept::evaluation::{Classifier, EmbeddingBatch, ZeroShotPrompt};
use sept::io::manifest::{read_sidecar, DatasetManifest};
use sept::io::synthetic::{generate_synthetic, synthetic_neighbors, SyntheticSpec};
use sept::loss::{MarginDocument, MarginMode};
use sept::prompting::{
    class_embedding, context_prompt, neighbor_embedding, template_embedding, ClassSet, NeighborSet, TemplatePool, DEFAULT_TEMPLATE,
};
use sept::trainer::{train, TrainConfig, TrainInputs, TrainedPrompt};
use sept::{Context, Encoder, Error, Margins, SeededRng};

fn schema_pointers(err: Error) -> Vec<String> {
    match err {
        Error::Schema { violations, .. } => violations.into_iter().map(|v| v.pointer).collect(),
        other => panic!("expected a schema error, got {other}"),
    }
}

#[test]
fn manifest_round_trips_inline_and_with_sidecar() {
    let m = DatasetManifest::load(fixture("tiny_k4.json")).unwrap();
    let again = DatasetManifest::from_json(&m.to_json().unwrap(), None).unwrap();
    assert_eq!(m, again);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    m.save_with_sidecar(&path, "m.bin").unwrap();
    let (dim, rows) = read_sidecar(&dir.path().join("m.bin")).unwrap();
    assert_eq!(dim, m.dim);
    assert_eq!(rows.len(), m.samples.len());
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    let bytes = std::fs::read(dir.path().join("m.bin")).unwrap();
    assert_eq!(bytes.len(), 16 + m.samples.len() * m.dim * 8);
    assert_eq!(u64::from_le_bytes(bytes[0..8].try_into().unwrap()), m.samples.len() as u64);
}

#[test]
fn shipped_sidecar_fixture_loads() {
    let m = DatasetManifest::load(fixture("synthetic_k8.json")).unwrap();
    assert_eq!(m.num_classes(), 8);
    assert_eq!(m.dim, 32);
    assert!(m.samples.iter().all(|s| (s.embedding.norm() - 1.0).abs() < 1e-12));
}

#[test]
fn manifest_violations_carry_json_pointers() {
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(fixture("tiny_k4.json")).unwrap()).unwrap();
    doc["samples"][0]["label"] = json!(9);
    doc["samples"][1]["embedding"] = json!([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    doc["samples"][2]["embedding"] = json!([1.0]);
    doc["classes"][1]["name"] = json!("ANGRY");
    let t0 = doc["folds"][0]["train"][0].clone();
    doc["folds"][0]["test"].as_array_mut().unwrap().push(t0);
    let err = DatasetManifest::from_json(&doc.to_string(), None).unwrap_err();
    let pointers = schema_pointers(err);
    for want in ["/samples/0/label", "/samples/1/embedding", "/samples/2/embedding", "/classes/1/name", "/folds/0"] {
        assert!(pointers.iter().any(|p| p == want), "missing {want} in {pointers:?}");
    }
}

#[test]
fn truncated_sidecar_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read(fixture("synthetic_k8.bin")).unwrap();
    std::fs::write(dir.path().join("synthetic_k8.bin"), &src[..src.len() - 3]).unwrap();
    std::fs::copy(fixture("synthetic_k8.json"), dir.path().join("synthetic_k8.json")).unwrap();
    assert!(matches!(DatasetManifest::load(dir.path().join("synthetic_k8.json")), Err(Error::Data(_))));
}

#[test]
fn neighbors_templates_and_margins_round_trip() {
    let text = std::fs::read_to_string(fixture("tiny_k4_neighbors.json")).unwrap();
    let nb: NeighborSet = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::from_str::<NeighborSet>(&serde_json::to_string(&nb).unwrap()).unwrap(), nb);
    assert!(serde_json::from_str::<NeighborSet>(r#"{"a": ["x", "y"], "b": []}"#).is_err());

    let pool = TemplatePool::shipped();
    assert_eq!(pool.len(), 100);
    let back: TemplatePool = serde_json::from_str(&serde_json::to_string(&pool).unwrap()).unwrap();
    assert_eq!(back, pool);
    assert_eq!(back.hash(), pool.hash());
    assert!(serde_json::from_str::<TemplatePool>(r#"["no placeholder here"]"#).is_err());

    let m = DatasetManifest::load(fixture("tiny_k4.json")).unwrap();
    let enc = Encoder::new(m.encoder.clone().unwrap()).unwrap();
    let names = m.classes.names().to_vec();
    let table: Margins =
        sept::loss::compute_margin_table(&enc, &names, &nb, &pool.truncated(5).unwrap(), MarginMode::Ensemble).unwrap();
    let doc: MarginDocument = serde_json::from_str(&serde_json::to_string(&table.to_document()).unwrap()).unwrap();
    let back = Margins::from_document(doc.clone()).unwrap();
    assert_eq!(back, table);
    assert_eq!(back.hash(), table.hash());
    let mut bad = doc;
    bad.values.pop();
    assert!(Margins::from_document(bad).is_err());
}

#[test]
fn trained_prompt_round_trips() {
    let m = DatasetManifest::load(fixture("tiny_k4.json")).unwrap();
    let enc = Encoder::new(m.encoder.clone().unwrap()).unwrap();
    let nb: NeighborSet = serde_json::from_str(&std::fs::read_to_string(fixture("tiny_k4_neighbors.json")).unwrap()).unwrap();
    let pool = TemplatePool::shipped();
    let inputs = TrainInputs { manifest: &m, encoder: &enc, neighbors: Some(&nb), pool: &pool };
    let cfg = TrainConfig { epochs: 3, context_len: 2, neighbors: 3, templates: 4, ..TrainConfig::default() };
    let t = train(&inputs, &cfg, None).unwrap();
    let text = serde_json::to_string_pretty(&t).unwrap();
    let back: TrainedPrompt = serde_json::from_str(&text).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.content_hash(), t.content_hash());
    assert_eq!(back.context().unwrap().matrix(), t.context().unwrap().matrix());
    let mut extra: Value = serde_json::from_str(&text).unwrap();
    extra["unexpected"] = json!(1);
    assert!(serde_json::from_str::<TrainedPrompt>(&extra.to_string()).is_err());
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden").join(name)
}

/// Compares against the stored golden, or rewrites it when `SEPT_BLESS=1`.
fn check_golden(name: &str, actual: Value) {
    let path = golden_path(name);
    if std::env::var("SEPT_BLESS").as_deref() == Ok("1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&actual).unwrap() + "\n").unwrap();
        return;
    }
    let stored: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_close(&stored, &actual, name);
}

fn assert_close(want: &Value, got: &Value, at: &str) {
    match (want, got) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{at}: {a} vs {b}");
        }
        (Value::Array(a), Value::Array(b)) => {
            assert_eq!(a.len(), b.len(), "{at}");
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                assert_close(x, y, &format!("{at}[{i}]"));
            }
        }
        (Value::Object(a), Value::Object(b)) => {
            assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>(), "{at}");
            for (k, x) in a {
                assert_close(x, &b[k], &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(want, got, "{at}"),
    }
}

#[test]
fn golden_encoding_of_a_single_word() {
    let enc = Encoder::new(EncoderConfig::mlp(8, 42)).unwrap();
    let prompt = context_prompt(&enc, 4, "a").unwrap();
    let out = enc.encode(&prompt, &Context::zeros(4, 8)).unwrap();
    let fixed = enc.encode_fixed(&PromptTokens::fixed(&enc.tokenizer().tokenize("a").unwrap()).unwrap()).unwrap();
    check_golden("encode_seed42.json", json!({ "context_prompt": out.to_f64(), "fixed": fixed.to_f64() }));
}

#[test]
fn golden_prompt_embeddings() {
    let enc = Encoder::new(EncoderConfig::mlp(8, 7)).unwrap();
    let classes = ClassSet::halved(vec!["dog bark".into(), "rain".into()]).unwrap();
    let nb = synthetic_neighbors(classes.names(), 2, 0.0, 7).unwrap();
    let ctx = Context::init(4, 8, &mut SeededRng::new(7)).unwrap();
    check_golden(
        "prompt_embeddings_seed7.json",
        json!({
            "neighbors": serde_json::to_value(&nb).unwrap(),
            "class": class_embedding(&enc, &classes, 0, &ctx).unwrap().to_f64(),
            "neighbor": neighbor_embedding(&enc, &classes, &nb, 1, 1, &ctx).unwrap().to_f64(),
            "template": template_embedding(&enc, DEFAULT_TEMPLATE, "dog bark").unwrap().to_f64(),
        }),
    );
}

#[test]
fn golden_zero_shot_accuracy_on_generated_data() {
    let enc = Encoder::new(EncoderConfig::mlp(16, 3)).unwrap();
    let spec = SyntheticSpec { k: 8, sigma: 0.3, d: 16, seed: 3, train_per_class: 4, test_per_class: 20, ..SyntheticSpec::default() };
    let m = generate_synthetic(&spec, &enc).unwrap();
    let all: Vec<usize> = (0..m.samples.len()).collect();
    let batch = EmbeddingBatch::from_manifest(&m, &m.fold(0).unwrap().test);
    assert_eq!(batch.len(), 8 * 20);
    let head = Classifier::zero_shot(&enc, m.classes.names(), &ZeroShotPrompt::default(), 0.01).unwrap();
    let acc = head.accuracy(&batch, Some).unwrap();
    let first = m.samples[0].embedding.to_f64();
    check_golden("zero_shot_synth_seed3.json", json!({ "accuracy": acc, "samples": all.len(), "first_sample": first }));
}
