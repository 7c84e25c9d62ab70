//! The `sept` command-line tool.
//!
//! Every command prints `{"metadata": .., "result": ..}` to stdout. Artifacts
//! named with `-o` are written as plain documents so they load back unchanged.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderDocument};
use crate::error::{Error, Result};
use crate::evaluation::{
    dataset_diversity, dump_embeddings, evaluate_base_to_new, evaluate_cross_dataset, filter_overlapping_neighbors,
    harmonic_mean, neighbor_similarity_stats, Classifier, EmbeddingBatch, ZeroShotPrompt,
};
use crate::io::llm::{generate_neighbors, HttpTransport, LlmClientConfig, MockTransport};
use crate::io::manifest::DatasetManifest;
use crate::io::synthetic::{generate_synthetic, synthetic_neighbors, Domain, SyntheticSpec};
use crate::loss::{compute_margin_table, AblationFlags, CeReduction, KgMode, MarginDocument, MarginMode};
use crate::prompting::{NeighborSet, Split, TemplatePool, DEFAULT_TEMPLATE};
use crate::trainer::{run_sweep, train, SweepAxis, TrainConfig, TrainInputs, TrainedPrompt};
use crate::{Encoder, Margins, SeededRng};

pub const THREADS_ENV: &str = "SEPT_THREADS";
pub const GIT_DESCRIBE: &str = match option_env!("SEPT_GIT_DESCRIBE") {
    Some(v) => v,
    None => "unknown",
};

#[derive(Parser, Debug)]
#[command(name = "sept", version, about = "Prompt tuning with semantic expansion on a frozen toy text encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic manifest (and optionally paraphrase neighbors).
    Synth(SynthArgs),
    /// Export the frozen encoder's weights.
    Encoder(EncoderExportArgs),
    /// Precompute the margin table.
    Margins(MarginsArgs),
    /// Train a context on the base classes of one fold.
    Train(TrainArgs),
    /// Evaluate trained contexts.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Hand-crafted prompt accuracy.
    ZeroShot(ZeroShotArgs),
    /// Base-to-new results along one hyperparameter axis.
    Sweep(SweepArgs),
    /// Neighbor generation and analysis.
    #[command(subcommand)]
    Neighbors(NeighborsCommand),
    /// Write class and neighbor prompt embeddings as JSON lines.
    DumpEmbeddings(DumpArgs),
}

#[derive(Args, Debug, Clone)]
struct EncoderArgs {
    /// Encoder weights document; defaults to the manifest's encoder config.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Overrides the encoder seed.
    #[arg(long)]
    encoder_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0.35)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 32)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 1)]
    folds: usize,
    #[arg(long, value_enum, default_value_t = DomainArg::SoundEvent)]
    domain: DomainArg,
    #[arg(long, default_value = "synthetic")]
    name: String,
    #[arg(long, default_value_t = 0)]
    encoder_seed: u64,
    #[arg(long, default_value_t = 5)]
    n_neighbors: usize,
    #[arg(long, default_value_t = 0.2)]
    neighbor_noise: f64,
    /// Also write paraphrase neighbors for every class.
    #[arg(long)]
    neighbors_out: Option<PathBuf>,
    /// Store embeddings in a binary file next to the manifest.
    #[arg(long)]
    sidecar: Option<String>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DomainArg {
    SoundEvent,
    UrbanSound,
    Emotion,
    EmotionAlt,
    Instrument,
    InstrumentFamily,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::SoundEvent => Domain::SoundEvent,
            DomainArg::UrbanSound => Domain::UrbanSound,
            DomainArg::Emotion => Domain::Emotion,
            DomainArg::EmotionAlt => Domain::EmotionAlt,
            DomainArg::Instrument => Domain::Instrument,
            DomainArg::InstrumentFamily => Domain::InstrumentFamily,
        }
    }
}

#[derive(Args, Debug)]
struct EncoderExportArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MarginModeArg {
    Ensemble,
    FixedPrefix,
}

impl From<MarginModeArg> for MarginMode {
    fn from(m: MarginModeArg) -> Self {
        match m {
            MarginModeArg::Ensemble => MarginMode::Ensemble,
            MarginModeArg::FixedPrefix => MarginMode::FixedPrefix,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum KgModeArg {
    Single,
    Ensemble,
}

impl From<KgModeArg> for KgMode {
    fn from(m: KgModeArg) -> Self {
        match m {
            KgModeArg::Single => KgMode::Single,
            KgModeArg::Ensemble => KgMode::Ensemble,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Args, Debug)]
struct MarginsArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    #[arg(long)]
    neighbors: PathBuf,
    /// Template pool; defaults to the shipped pool.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    t: usize,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum, default_value_t = MarginModeArg::Ensemble)]
    mode: MarginModeArg,
    /// Cover every class instead of the base classes only.
    #[arg(long)]
    all_classes: bool,
    #[command(flatten)]
    enc: EncoderArgs,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    /// TrainConfig JSON, or a previous run's stdout whose metadata block is replayed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the CE-only configuration.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    n_neighbors: Option<usize>,
    #[arg(long)]
    templates_used: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    /// `full`, `off`, or a comma list of intra, intra+m, inter, inter+m.
    #[arg(long)]
    flags: Option<String>,
    #[arg(long, value_enum)]
    margin_mode: Option<MarginModeArg>,
    #[arg(long, value_enum)]
    kg_mode: Option<KgModeArg>,
    #[arg(long, value_enum)]
    ce_reduction: Option<ReductionArg>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let v: Value = read_json(p)?;
                let cfg = v.pointer("/metadata/config").cloned().unwrap_or(v);
                serde_json::from_value(cfg).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None if self.baseline => TrainConfig::baseline(),
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $t:ident),*) => { $(if let Some(v) = self.$f { c.$t = v.into(); })* };
        }
        set!(lr => lr, momentum => momentum, epochs => epochs, shots => shots, lambda => lambda, mu => mu, tau => tau,
             context_len => context_len, n_neighbors => neighbors, templates_used => templates, seed => seed, fold => fold,
             kg_mode => kg_mode);
        if let Some(b) = self.batch_size {
            c.batch_size = Some(b);
        }
        if let Some(r) = self.ce_reduction {
            c.ce_reduction = match r {
                ReductionArg::Mean => CeReduction::Mean,
                ReductionArg::Sum => CeReduction::Sum,
            };
        }
        let mode = self.margin_mode.map_or(c.flags.margin_mode, MarginMode::from);
        c.flags = match &self.flags {
            Some(f) => AblationFlags::parse_label(f, mode)?,
            None => AblationFlags { margin_mode: mode, ..c.flags },
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    #[arg(long)]
    neighbors: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Precomputed margin table.
    #[arg(long)]
    margins: Option<PathBuf>,
    /// Treat every class as base (cross-dataset source training).
    #[arg(long)]
    all_base: bool,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    enc: EncoderArgs,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Base and new accuracy with their harmonic mean, averaged over runs.
    B2n(B2nArgs),
    /// Source and target accuracy under one source-trained context.
    Cross(CrossArgs),
}

#[derive(Args, Debug)]
struct B2nArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    /// One or more TrainedPrompt files.
    #[arg(long, required = true, num_args = 1..)]
    trained: Vec<PathBuf>,
    #[command(flatten)]
    enc: EncoderArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CrossArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, required = true)]
    trained: PathBuf,
    #[command(flatten)]
    enc: EncoderArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ZeroShotArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    template: String,
    /// Average over the template pool instead of one template.
    #[arg(long)]
    ensemble: bool,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[command(flatten)]
    enc: EncoderArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AxisArg {
    Lambda,
    Neighbors,
    Flags,
    MarginMode,
    KgMode,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    #[arg(long)]
    neighbors: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated values for lambda/neighbors; ignored for flags.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    enc: EncoderArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum NeighborsCommand {
    /// Per-class diversity and class/neighbor similarity histograms.
    Stats(NeighborStatsArgs),
    /// Drop neighbors equal to a new-class name.
    Filter(NeighborFilterArgs),
    /// Ask a language model (or read a fixture) for neighbors.
    Generate(NeighborGenerateArgs),
}

#[derive(Args, Debug)]
struct NeighborStatsArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    #[arg(long)]
    neighbors: PathBuf,
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    template: String,
    #[command(flatten)]
    enc: EncoderArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NeighborFilterArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    #[arg(long)]
    neighbors: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct NeighborGenerateArgs {
    #[arg(short, long)]
    manifest: Option<PathBuf>,
    /// Comma-separated class names when no manifest is given.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long)]
    offline: Option<PathBuf>,
    /// Build paraphrase neighbors locally instead of calling a model.
    #[arg(long)]
    paraphrase: bool,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "gpt-4o")]
    model: String,
    #[arg(long, default_value = crate::io::llm::DEFAULT_TOKEN_ENV)]
    token_env: String,
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(short, long)]
    manifest: PathBuf,
    #[arg(long)]
    neighbors: Option<PathBuf>,
    /// Use this context instead of the default template.
    #[arg(long)]
    trained: Option<PathBuf>,
    #[command(flatten)]
    enc: EncoderArgs,
    #[arg(short, long)]
    output: PathBuf,
}

/// Provenance attached to every command's output.
#[derive(Debug, Serialize)]
struct Metadata {
    tool: &'static str,
    version: &'static str,
    git_describe: &'static str,
    command: String,
    rng: &'static str,
    seeds: Value,
    config: Value,
    hashes: IndexMap<String, String>,
}

impl Metadata {
    fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            git_describe: GIT_DESCRIBE,
            command: command.to_string(),
            rng: SeededRng::ALGORITHM,
            seeds: Value::Null,
            config: Value::Null,
            hashes: IndexMap::new(),
        }
    }

    fn hash_file(&mut self, key: &str, path: &Path) -> Result<()> {
        self.hashes.insert(key.to_string(), file_hash(path)?);
        Ok(())
    }
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { message: format!("{}: {e}", path.display()), raw: None })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_trained(path: &Path) -> Result<TrainedPrompt> {
    read_json(path)
}

fn load_margins(path: &Path) -> Result<Margins> {
    Margins::from_document(read_json::<MarginDocument>(path)?)
}

fn load_pool(path: Option<&Path>) -> Result<TemplatePool> {
    match path {
        Some(p) => read_json(p),
        None => Ok(TemplatePool::shipped()),
    }
}

fn load_encoder(args: &EncoderArgs, manifest: &DatasetManifest) -> Result<Encoder> {
    let enc = match &args.encoder {
        Some(p) => Encoder::from_document(&read_json::<EncoderDocument>(p)?)?,
        None => {
            let mut cfg = manifest.encoder.clone().unwrap_or_else(|| EncoderConfig::mlp(manifest.dim, 0));
            if let Some(s) = args.encoder_seed {
                cfg.seed = s;
            }
            Encoder::new(cfg)?
        }
    };
    if enc.dim() != manifest.dim {
        return Err(Error::Config(format!("encoder dimension {} does not match manifest dimension {}", enc.dim(), manifest.dim)));
    }
    Ok(enc)
}

/// Runs the tool on `argv` (including the program name), writing the result
/// envelope to `out`. Returns the process exit code.
pub fn run<I, S>(argv: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match dispatch(cli.command) {
        Ok((meta, result)) => {
            let doc = json!({ "metadata": meta, "result": result });
            match serde_json::to_string_pretty(&doc) {
                Ok(s) => {
                    let _ = writeln!(out, "{s}");
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    3
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Parse { raw: Some(p), .. } = &e {
                eprintln!("raw payload saved to {p}");
            }
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    if n == 0 {
        return Err(Error::Config(format!("{THREADS_ENV} must be positive")));
    }
    // A second initialisation in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(Metadata, Value)> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Encoder(a) => export_encoder(a),
        Command::Margins(a) => margins(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(EvalCommand::B2n(a)) => eval_b2n(a),
        Command::Eval(EvalCommand::Cross(a)) => eval_cross(a),
        Command::ZeroShot(a) => zero_shot(a),
        Command::Sweep(a) => sweep(a),
        Command::Neighbors(NeighborsCommand::Stats(a)) => neighbor_stats(a),
        Command::Neighbors(NeighborsCommand::Filter(a)) => neighbor_filter(a),
        Command::Neighbors(NeighborsCommand::Generate(a)) => neighbor_generate(a),
        Command::DumpEmbeddings(a) => dump(a),
    }
}

fn synth(a: SynthArgs) -> Result<(Metadata, Value)> {
    let spec = SyntheticSpec {
        name: a.name,
        k: a.k,
        domain: a.domain.into(),
        classes: None,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        folds: a.folds,
        d: a.d,
        sigma: a.sigma,
        seed: a.seed,
        n_neighbors: a.n_neighbors,
        neighbor_noise: a.neighbor_noise,
    };
    spec.validate()?;
    let encoder = Encoder::new(EncoderConfig::mlp(a.d, a.encoder_seed))?;
    let manifest = generate_synthetic(&spec, &encoder)?;
    match &a.sidecar {
        Some(name) => manifest.save_with_sidecar(&a.output, name)?,
        None => manifest.save(&a.output)?,
    }
    let mut meta = Metadata::new("synth");
    meta.seeds = json!({ "data": a.seed, "encoder": a.encoder_seed });
    meta.config = serde_json::to_value(&spec)?;
    meta.hash_file("manifest", &a.output)?;
    if let Some(name) = &a.sidecar {
        meta.hash_file("embeddings", &a.output.parent().unwrap_or(Path::new(".")).join(name))?;
    }
    meta.hashes.insert("encoder_weights".into(), encoder.weights_hash());
    if let Some(p) = &a.neighbors_out {
        let nb = synthetic_neighbors(&spec.class_names(), spec.n_neighbors, spec.neighbor_noise, spec.seed)?;
        write_json(p, &nb)?;
        meta.hash_file("neighbors", p)?;
    }
    let result = json!({ "manifest": a.output, "classes": manifest.classes.names(), "samples": manifest.samples.len() });
    Ok((meta, result))
}

fn export_encoder(a: EncoderExportArgs) -> Result<(Metadata, Value)> {
    let encoder = Encoder::new(EncoderConfig::mlp(a.dim, a.seed))?;
    write_json(&a.output, &encoder.to_document())?;
    let mut meta = Metadata::new("encoder");
    meta.seeds = json!({ "encoder": a.seed });
    meta.config = serde_json::to_value(encoder.config())?;
    meta.hashes.insert("encoder_weights".into(), encoder.weights_hash());
    Ok((meta, json!({ "encoder": a.output })))
}

fn margins(a: MarginsArgs) -> Result<(Metadata, Value)> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let encoder = load_encoder(&a.enc, &manifest)?;
    let nb: NeighborSet = read_json(&a.neighbors)?;
    let pool = load_pool(a.templates.as_deref())?;
    let pool = pool.truncated(a.t.min(pool.len()))?;
    let idx = if a.all_classes { (0..manifest.num_classes()).collect() } else { manifest.classes.base_indices() };
    let names = manifest.classes.names_of(&idx);
    let nb = nb.restricted(&names)?;
    let nb = match a.n {
        Some(n) => nb.truncated(n)?,
        None => nb,
    };
    let table = compute_margin_table(&encoder, &names, &nb, &pool, a.mode.into())?;
    write_json(&a.output, &table.to_document())?;
    let mut meta = Metadata::new("margins");
    meta.seeds = json!({ "encoder": encoder.seed() });
    meta.config = json!({ "t": pool.len(), "n": nb.n(), "mode": MarginMode::from(a.mode), "classes": names });
    meta.hash_file("manifest", &a.manifest)?;
    meta.hash_file("neighbors", &a.neighbors)?;
    meta.hashes.insert("templates".into(), pool.hash());
    meta.hashes.insert("encoder_weights".into(), encoder.weights_hash());
    meta.hashes.insert("margins".into(), table.hash());
    Ok((meta, json!({ "margins": a.output, "hash": table.hash() })))
}

fn train_cmd(a: TrainArgs) -> Result<(Metadata, Value)> {
    let config = a.train.resolve()?;
    let mut manifest = DatasetManifest::load(&a.manifest)?;
    if a.all_base {
        manifest = manifest.with_all_base();
    }
    let encoder = load_encoder(&a.enc, &manifest)?;
    let nb: Option<NeighborSet> = a.neighbors.as_deref().map(read_json).transpose()?;
    let pool = load_pool(a.templates.as_deref())?;
    let margins = a.margins.as_deref().map(load_margins).transpose()?;
    let inputs = TrainInputs { manifest: &manifest, encoder: &encoder, neighbors: nb.as_ref(), pool: &pool };
    let trained = train(&inputs, &config, margins.as_ref())?;
    write_json(&a.output, &trained)?;
    let mut meta = Metadata::new("train");
    meta.seeds = json!({ "run": config.seed, "encoder": encoder.seed() });
    meta.config = serde_json::to_value(&config)?;
    meta.hash_file("manifest", &a.manifest)?;
    if let Some(p) = &a.neighbors {
        meta.hash_file("neighbors", p)?;
    }
    meta.hashes.insert("templates".into(), pool.hash());
    meta.hashes.insert("encoder_weights".into(), encoder.weights_hash());
    if let Some(h) = &trained.margin_hash {
        meta.hashes.insert("margins".into(), h.clone());
    }
    meta.hashes.insert("trained_content".into(), trained.content_hash());
    meta.hash_file("trained_file", &a.output)?;
    let result = json!({
        "trained": a.output,
        "final_loss": trained.final_loss(),
        "content_hash": trained.content_hash(),
    });
    Ok((meta, result))
}

fn eval_b2n(a: B2nArgs) -> Result<(Metadata, Value)> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let encoder = load_encoder(&a.enc, &manifest)?;
    let trained = a.trained.iter().map(|p| load_trained(p)).collect::<Result<Vec<_>>>()?;
    let report = evaluate_base_to_new(&trained, &manifest, &encoder)?;
    if let Some(p) = &a.output {
        write_json(p, &report)?;
    }
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv())?;
    }
    let mut meta = Metadata::new("eval b2n");
    meta.seeds = json!({ "runs": trained.iter().map(|t| t.config.seed).collect::<Vec<_>>(), "encoder": encoder.seed() });
    meta.config = serde_json::to_value(trained.first().map(|t| &t.config))?;
    meta.hash_file("manifest", &a.manifest)?;
    for (i, p) in a.trained.iter().enumerate() {
        meta.hash_file(&format!("trained_{i}"), p)?;
    }
    Ok((meta, serde_json::to_value(&report)?))
}

fn eval_cross(a: CrossArgs) -> Result<(Metadata, Value)> {
    let source = DatasetManifest::load(&a.source)?;
    let target = DatasetManifest::load(&a.target)?;
    let encoder = load_encoder(&a.enc, &source)?;
    let trained = load_trained(&a.trained)?;
    let report = evaluate_cross_dataset(&trained, &source, &target, &encoder)?;
    if let Some(p) = &a.output {
        write_json(p, &report)?;
    }
    let mut meta = Metadata::new("eval cross");
    meta.seeds = json!({ "run": trained.config.seed, "encoder": encoder.seed() });
    meta.config = serde_json::to_value(&trained.config)?;
    meta.hash_file("source", &a.source)?;
    meta.hash_file("target", &a.target)?;
    meta.hash_file("trained", &a.trained)?;
    Ok((meta, serde_json::to_value(&report)?))
}

fn zero_shot(a: ZeroShotArgs) -> Result<(Metadata, Value)> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let encoder = load_encoder(&a.enc, &manifest)?;
    let prompt = if a.ensemble {
        ZeroShotPrompt::Ensemble(load_pool(a.templates.as_deref())?)
    } else {
        ZeroShotPrompt::Template(a.template.clone())
    };
    let test = EmbeddingBatch::from_manifest(&manifest, &manifest.fold(a.fold)?.test);
    let all = Classifier::zero_shot(&encoder, manifest.classes.names(), &prompt, a.tau)?.accuracy(&test, Some)?;
    let mut split_acc = IndexMap::new();
    for split in [Split::Base, Split::New] {
        let idx = manifest.classes.indices(split);
        let rows = test.of_split(split);
        if idx.is_empty() || rows.is_empty() {
            continue;
        }
        let head = Classifier::zero_shot(&encoder, &manifest.classes.names_of(&idx), &prompt, a.tau)?;
        split_acc.insert(split, head.accuracy(&rows, |l| idx.iter().position(|&c| c == l))?);
    }
    let (base, new) = (split_acc.get(&Split::Base).copied(), split_acc.get(&Split::New).copied());
    let h = match (base, new) {
        (Some(b), Some(n)) => Some(harmonic_mean(b, n)?),
        _ => None,
    };
    let mut meta = Metadata::new("zero-shot");
    meta.seeds = json!({ "encoder": encoder.seed() });
    meta.config = json!({ "fold": a.fold, "tau": a.tau, "ensemble": a.ensemble, "template": (!a.ensemble).then_some(&a.template) });
    meta.hash_file("manifest", &a.manifest)?;
    meta.hashes.insert("encoder_weights".into(), encoder.weights_hash());
    Ok((meta, json!({ "accuracy": all, "base": base, "new": new, "h": h })))
}

fn sweep(a: SweepArgs) -> Result<(Metadata, Value)> {
    let base = a.train.resolve()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let encoder = load_encoder(&a.enc, &manifest)?;
    let nb: Option<NeighborSet> = a.neighbors.as_deref().map(read_json).transpose()?;
    let pool = load_pool(a.templates.as_deref())?;
    let parse_f = |v: &String| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("'{v}' is not a number")));
    let parse_u = |v: &String| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("'{v}' is not a count")));
    let axis = match a.axis {
        AxisArg::Lambda => SweepAxis::Lambda(a.values.iter().map(parse_f).collect::<Result<_>>()?),
        AxisArg::Neighbors => SweepAxis::Neighbors(a.values.iter().map(parse_u).collect::<Result<_>>()?),
        AxisArg::Flags => SweepAxis::FlagGrid,
        AxisArg::MarginMode => SweepAxis::MarginMode(vec![MarginMode::Ensemble, MarginMode::FixedPrefix]),
        AxisArg::KgMode => SweepAxis::KgMode(vec![KgMode::Single, KgMode::Ensemble]),
    };
    let inputs = TrainInputs { manifest: &manifest, encoder: &encoder, neighbors: nb.as_ref(), pool: &pool };
    let rows = run_sweep(&inputs, &base, &axis, &a.seeds)?;
    if let Some(p) = &a.output {
        write_json(p, &rows)?;
    }
    if let Some(p) = &a.csv {
        let mut s = String::from("setting,base,new,h\n");
        for r in &rows {
            s += &format!("{},{:.4},{:.4},{:.4}\n", r.setting, r.report.base, r.report.new, r.report.h);
        }
        write_text(p, &s)?;
    }
    let mut meta = Metadata::new("sweep");
    meta.seeds = json!({ "runs": a.seeds, "encoder": encoder.seed() });
    meta.config = json!({ "base": base, "axis": axis });
    meta.hash_file("manifest", &a.manifest)?;
    if let Some(p) = &a.neighbors {
        meta.hash_file("neighbors", p)?;
    }
    meta.hashes.insert("templates".into(), pool.hash());
    let table: Vec<Value> = rows.iter().map(|r| json!({ "setting": r.setting, "base": r.report.base, "new": r.report.new, "h": r.report.h })).collect();
    Ok((meta, json!({ "rows": table })))
}

fn neighbor_stats(a: NeighborStatsArgs) -> Result<(Metadata, Value)> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let encoder = load_encoder(&a.enc, &manifest)?;
    let nb: NeighborSet = read_json(&a.neighbors)?;
    let names = manifest.classes.names().to_vec();
    let nb = nb.restricted(&names)?;
    let (per_class, mean) = dataset_diversity(&encoder, &nb, &a.template)?;
    let stats = neighbor_similarity_stats(&encoder, &names, &nb, &a.template)?;
    let result = json!({ "diversity": { "per_class": per_class, "mean": mean }, "similarity": stats });
    if let Some(p) = &a.output {
        write_json(p, &result)?;
    }
    let mut meta = Metadata::new("neighbors stats");
    meta.seeds = json!({ "encoder": encoder.seed() });
    meta.config = json!({ "template": a.template });
    meta.hash_file("manifest", &a.manifest)?;
    meta.hash_file("neighbors", &a.neighbors)?;
    Ok((meta, result))
}

fn neighbor_filter(a: NeighborFilterArgs) -> Result<(Metadata, Value)> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let nb: NeighborSet = read_json(&a.neighbors)?;
    let new_names = manifest.classes.names_of(&manifest.classes.new_indices());
    let outcome = filter_overlapping_neighbors(&nb, &new_names)?;
    write_json(&a.output, &outcome.neighbors)?;
    let mut meta = Metadata::new("neighbors filter");
    meta.hash_file("manifest", &a.manifest)?;
    meta.hash_file("neighbors", &a.neighbors)?;
    meta.hash_file("filtered", &a.output)?;
    Ok((meta, json!({ "removed": outcome.removed, "total": outcome.total, "fraction": outcome.fraction })))
}

fn neighbor_generate(a: NeighborGenerateArgs) -> Result<(Metadata, Value)> {
    let classes = match &a.manifest {
        Some(p) => DatasetManifest::load(p)?.classes.names().to_vec(),
        None if !a.classes.is_empty() => a.classes.clone(),
        None => return Err(Error::Usage("give --manifest or --classes".into())),
    };
    let mut meta = Metadata::new("neighbors generate");
    let set = if a.paraphrase {
        meta.seeds = json!({ "paraphrase": a.seed });
        meta.config = json!({ "mode": "paraphrase", "n": a.n, "noise": a.noise });
        synthetic_neighbors(&classes, a.n, a.noise, a.seed)?
    } else {
        let cfg = LlmClientConfig {
            endpoint: a.endpoint.clone(),
            model: a.model.clone(),
            token_env: a.token_env.clone(),
            timeout_secs: a.timeout,
            offline_fixture: a.offline.clone(),
            cache_dir: a.cache_dir.clone(),
        };
        cfg.validate()?;
        meta.config = json!({ "mode": if cfg.is_offline() { "offline" } else { "online" }, "n": a.n, "model": cfg.model, "endpoint": cfg.endpoint });
        if cfg.is_offline() {
            generate_neighbors(&classes, &cfg, a.n, &MockTransport::default())?
        } else {
            generate_neighbors(&classes, &cfg, a.n, &HttpTransport::from_config(&cfg)?)?
        }
    };
    write_json(&a.output, &set)?;
    meta.hash_file("neighbors", &a.output)?;
    Ok((meta, json!({ "neighbors": a.output, "classes": set.len(), "n": set.n() })))
}

fn dump(a: DumpArgs) -> Result<(Metadata, Value)> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let encoder = load_encoder(&a.enc, &manifest)?;
    let nb: Option<NeighborSet> = a.neighbors.as_deref().map(read_json).transpose()?;
    let trained = a.trained.as_deref().map(load_trained).transpose()?;
    let context = trained.as_ref().map(|t| t.context()).transpose()?;
    let records = dump_embeddings(&encoder, &manifest.classes, nb.as_ref(), context.as_ref())?;
    let mut text = String::new();
    for r in &records {
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    write_text(&a.output, &text)?;
    let mut meta = Metadata::new("dump-embeddings");
    meta.seeds = json!({ "encoder": encoder.seed() });
    meta.hash_file("manifest", &a.manifest)?;
    meta.hash_file("embeddings", &a.output)?;
    Ok((meta, json!({ "records": records.len(), "output": a.output })))
}
