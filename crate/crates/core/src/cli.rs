//! The `def` command line: one pipeline stage per command, files in between.
//!
//! Every command resolves a [`RunConfig`] from defaults, an optional TOML
//! file (`--config`) and flags (flags win), runs, and writes
//! `<out>/<command>.manifest.toml`. The manifest is itself a valid config
//! that also records input and artifact digests, so `def rerun <manifest>`
//! repeats the stage and checks that every artifact comes out identical.
//!
//! Exit codes: 0 success, 2 validation or dependency error, 1 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_synthetic, parse_samples, parse_schema, triletter_featurize, write_samples, DataError, Dataset, FeatureSchema,
    Field, GroupKind, Sample, SynthConfig,
};
use crate::fuzzy::{export_fuzzy, init_fuzzy, joint_train, FuzzConfig, FuzzyError};
use crate::gbdt::{export_forest, import_forest, train_gbdt, ForestError, GbdtConfig};
use crate::nn::{
    extract_stacking, load_checkpoint, parse_stacked, save_checkpoint, train_deep_crossing, write_stacked, ArchConfig,
    NnError, TrainConfig,
};
use crate::numfmt::sig17;
use crate::serve::{
    bench, load_bundle, relative_log_loss, save_bundle, time_per_item, BenchConfig, BundleForest, BundleMeta,
    ModelBundle, Predictor, ServeError, CSV_HEADER,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs; exit code 2.
    Invalid(String),
    /// A required artifact from an earlier stage is missing; exit code 2.
    Dependency(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Dependency(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "error: {m}"),
            CliError::Dependency(m) => write!(f, "dependency error: {m}"),
            CliError::Runtime(m) => write!(f, "failed: {m}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Diverged { .. } | NnError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<FuzzyError> for CliError {
    fn from(e: FuzzyError) -> Self {
        match e {
            FuzzyError::Diverged { .. } => CliError::Runtime(e.to_string()),
            FuzzyError::Nn(n) => n.into(),
            FuzzyError::Forest(f) => f.into(),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ServeError> for CliError {
    fn from(e: ServeError) -> Self {
        match e {
            ServeError::Io(_) => CliError::Runtime(e.to_string()),
            ServeError::Nn(n) => n.into(),
            ServeError::Data(d) => d.into(),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

/// Input and output locations. Unset entries default to the conventional
/// file names inside the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub schema: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub stacked: Option<PathBuf>,
    pub forest: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub candidate: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Samples generated after the training set and written as the test split.
    pub test_samples: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_samples: 2_000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Report name; defaults to the model file stem.
    pub name: Option<String>,
    /// Evaluate the Deep Crossing checkpoint instead of a bundle.
    pub deep_crossing: bool,
    pub scorer: Option<String>,
    /// Timed passes for the latency column (skipped in deterministic mode).
    pub timing_reps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides every stage seed when set.
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub arch: ArchConfig,
    pub embed: TrainConfig,
    pub forest: GbdtConfig,
    pub fuzz: FuzzConfig,
    pub bench: BenchConfig,
    pub eval: EvalConfig,
    /// Written by runs; ignored on input.
    pub run: RunInfo,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunConfig {
    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.embed.seed = s;
            self.forest.seed = s;
            self.fuzz.seed = s;
            self.bench.shuffle_seed = s;
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn in_out(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }
}

/// Parsed and validated per-command state.
struct Run {
    cfg: RunConfig,
    command: &'static str,
    /// Manifest file stem; eval runs append the report name.
    stem: String,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    metrics: BTreeMap<String, f64>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        let d = digest_path(path)?;
        self.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    fn artifact(&mut self, path: &Path) -> Result<()> {
        let d = digest_path(path)?;
        self.artifacts.insert(path.display().to_string(), d);
        Ok(())
    }

    fn metric(&mut self, name: &str, v: f64) {
        self.metrics.insert(name.to_string(), v);
    }

    fn finish(self) -> Result<PathBuf> {
        let mut m = self.cfg.clone();
        m.run = RunInfo {
            command: self.command.to_string(),
            version: VERSION.to_string(),
        };
        m.inputs = self.inputs;
        m.artifacts = self.artifacts;
        m.metrics = self.metrics;
        let text = toml::to_string(&m).map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
        let path = self.cfg.in_out(&format!("{}.manifest.toml", self.stem));
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// SHA-256 of a file, or of a directory's files in name order.
pub fn digest_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(fs::read(path).map_err(|e| io_err(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Resolves an input path, turning absence into an explicit pointer at the
/// stage that produces it.
fn need(path: Option<&PathBuf>, default: PathBuf, what: &str, producer: &str, command: &str) -> Result<PathBuf> {
    let p = path.cloned().unwrap_or(default);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Dependency(format!(
            "{command} needs {what} at {}; {producer}",
            p.display()
        )))
    }
}

fn load_dataset(schema: &FeatureSchema, path: &Path) -> Result<Dataset> {
    let text = read_text(path)?;
    parse_samples(text.lines(), schema).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn load_schema(path: &Path) -> Result<FeatureSchema> {
    parse_schema(&read_text(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- clap layer

#[derive(Parser, Debug)]
#[command(name = "def", version, about = "Deep Embedding Forest pipeline")]
struct Cli {
    /// Seed for every stage (overrides per-section seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; a run manifest works too.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fix timestamps and skip latency measurement so artifacts are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn raw text and numbers into sample lines.
    Featurize(FeaturizeArgs),
    /// Generate a synthetic train/test split with a planted rule.
    GenSynth(GenSynthArgs),
    /// Train a Deep Crossing model to initialize the embeddings.
    TrainEmbed(TrainEmbedArgs),
    /// Map samples to stacking vectors with the trained embeddings.
    ExtractStack(ExtractArgs),
    /// Fit a boosted forest on stacking vectors.
    TrainForest(TrainForestArgs),
    /// Jointly refine embeddings and forest through soft splits.
    FuzzTune(FuzzTuneArgs),
    /// Write one probability per sample.
    Predict(PredictArgs),
    /// Log loss of a model on labelled samples.
    Eval(EvalArgs),
    /// Measure per-sample embedding and forest time.
    Bench(BenchArgs),
    /// Put two evaluation reports side by side.
    Compare(CompareArgs),
    /// Repeat a recorded run and check its artifact digests.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Raw lines: label, then one field per group (text for sparse groups,
    /// comma-separated numbers for dense groups), tab-separated.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    n_sparse_dims: Option<usize>,
    #[arg(long)]
    n_dense_dims: Option<usize>,
    #[arg(long)]
    interaction_depth: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainEmbedArgs {
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Samples to map; defaults to the training split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainForestArgs {
    #[arg(long)]
    stacked: Option<PathBuf>,
    /// Also writes a two-step bundle when the embedding checkpoint exists.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    forest: Option<PathBuf>,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long)]
    max_leaves: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
}

#[derive(Args, Debug)]
struct FuzzTuneArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    forest: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Evaluate this Deep Crossing checkpoint instead of a bundle.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Baseline report for relative log loss.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    scorer: Option<String>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    label: Option<String>,
    /// Let the scheduler move the benchmark thread between CPUs.
    #[arg(long)]
    no_pin: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    candidate: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RerunArgs {
    manifest: PathBuf,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn run_cli(cli: Cli) -> Result<()> {
    if let Command::Rerun(a) = &cli.command {
        return rerun(&a.manifest);
    }
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    cfg.deterministic |= cli.deterministic;
    let p = &mut cfg.paths;
    let command = match cli.command {
        Command::Featurize(a) => {
            set_path(&mut p.schema, a.schema);
            set_path(&mut p.input, a.input);
            set_path(&mut p.output, a.output);
            "featurize"
        }
        Command::GenSynth(a) => {
            set(&mut cfg.synth.n_samples, a.n_samples);
            set(&mut cfg.split.test_samples, a.test_samples);
            set(&mut cfg.synth.n_sparse_dims, a.n_sparse_dims);
            set(&mut cfg.synth.n_dense_dims, a.n_dense_dims);
            set(&mut cfg.synth.interaction_depth, a.interaction_depth);
            set(&mut cfg.synth.noise, a.noise);
            "gen-synth"
        }
        Command::TrainEmbed(a) => {
            set_path(&mut p.schema, a.schema);
            set_path(&mut p.train, a.train);
            set_path(&mut p.checkpoint, a.checkpoint);
            set(&mut cfg.embed.epochs, a.epochs);
            set(&mut cfg.embed.learning_rate, a.learning_rate);
            set(&mut cfg.arch.embed_dim, a.embed_dim);
            "train-embed"
        }
        Command::ExtractStack(a) => {
            set_path(&mut p.checkpoint, a.checkpoint);
            set_path(&mut p.data, a.data);
            set_path(&mut p.output, a.output);
            "extract-stack"
        }
        Command::TrainForest(a) => {
            set_path(&mut p.stacked, a.stacked);
            set_path(&mut p.checkpoint, a.checkpoint);
            set_path(&mut p.forest, a.forest);
            set(&mut cfg.forest.n_trees, a.n_trees);
            set(&mut cfg.forest.max_leaves, a.max_leaves);
            set(&mut cfg.forest.max_depth, a.max_depth);
            "train-forest"
        }
        Command::FuzzTune(a) => {
            set_path(&mut p.checkpoint, a.checkpoint);
            set_path(&mut p.forest, a.forest);
            set_path(&mut p.schema, a.schema);
            set_path(&mut p.train, a.train);
            set_path(&mut p.bundle, a.bundle);
            set(&mut cfg.fuzz.epochs, a.epochs);
            set(&mut cfg.fuzz.kappa, a.kappa);
            "fuzz-tune"
        }
        Command::Predict(a) => {
            set_path(&mut p.bundle, a.bundle);
            set_path(&mut p.data, a.data);
            set_path(&mut p.output, a.output);
            "predict"
        }
        Command::Eval(a) => {
            if a.checkpoint.is_some() {
                cfg.eval.deep_crossing = true;
            }
            set_path(&mut p.bundle, a.bundle);
            set_path(&mut p.checkpoint, a.checkpoint);
            set_path(&mut p.data, a.data);
            set_path(&mut p.baseline, a.baseline);
            set_path(&mut p.output, a.output);
            if a.name.is_some() {
                cfg.eval.name = a.name;
            }
            if a.scorer.is_some() {
                cfg.eval.scorer = a.scorer;
            }
            "eval"
        }
        Command::Bench(a) => {
            set_path(&mut p.bundle, a.bundle);
            set_path(&mut p.data, a.data);
            set_path(&mut p.output, a.output);
            set(&mut cfg.bench.reps, a.reps);
            set(&mut cfg.bench.warmup, a.warmup);
            set(&mut cfg.bench.label, a.label);
            if a.no_pin {
                cfg.bench.pin_cpu = false;
            }
            "bench"
        }
        Command::Compare(a) => {
            set_path(&mut p.baseline, a.baseline);
            set_path(&mut p.candidate, a.candidate);
            set_path(&mut p.output, a.output);
            "compare"
        }
        Command::Rerun(_) => unreachable!(),
    };
    let manifest = run_command(command, cfg)?;
    println!("manifest: {}", manifest.display());
    Ok(())
}

/// Runs one stage from a fully resolved config and writes its manifest.
pub fn run_command(command: &str, mut cfg: RunConfig) -> Result<PathBuf> {
    cfg.apply_seed();
    cfg.run = RunInfo::default();
    cfg.inputs.clear();
    cfg.artifacts.clear();
    cfg.metrics.clear();
    let command: &'static str = match command {
        "featurize" => "featurize",
        "gen-synth" => "gen-synth",
        "train-embed" => "train-embed",
        "extract-stack" => "extract-stack",
        "train-forest" => "train-forest",
        "fuzz-tune" => "fuzz-tune",
        "predict" => "predict",
        "eval" => "eval",
        "bench" => "bench",
        "compare" => "compare",
        other => return Err(CliError::Invalid(format!("unknown command `{other}`"))),
    };
    let mut run = Run {
        cfg,
        command,
        stem: command.to_string(),
        inputs: BTreeMap::new(),
        artifacts: BTreeMap::new(),
        metrics: BTreeMap::new(),
    };
    match command {
        "featurize" => featurize(&mut run)?,
        "gen-synth" => gen_synth(&mut run)?,
        "train-embed" => train_embed(&mut run)?,
        "extract-stack" => extract_stack(&mut run)?,
        "train-forest" => train_forest_cmd(&mut run)?,
        "fuzz-tune" => fuzz_tune(&mut run)?,
        "predict" => predict(&mut run)?,
        "eval" => eval(&mut run)?,
        "bench" => bench_cmd(&mut run)?,
        "compare" => compare(&mut run)?,
        _ => unreachable!(),
    }
    run.finish()
}

fn rerun(manifest: &Path) -> Result<()> {
    let cfg = load_config(manifest)?;
    if cfg.run.command.is_empty() {
        return Err(CliError::Invalid(format!("{} is not a run manifest", manifest.display())));
    }
    let recorded = cfg.artifacts.clone();
    let command = cfg.run.command.clone();
    let new_manifest = run_command(&command, cfg)?;
    let fresh = load_config(&new_manifest)?.artifacts;
    let mut mismatched = Vec::new();
    for (path, digest) in &recorded {
        if fresh.get(path) != Some(digest) {
            mismatched.push(path.clone());
        }
    }
    if mismatched.is_empty() {
        println!("{command}: {} artifacts reproduced identically", recorded.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!("artifacts differ from the manifest: {}", mismatched.join(", "))))
    }
}

// ------------------------------------------------------------------ stages

fn featurize(run: &mut Run) -> Result<()> {
    let c = &run.cfg;
    let schema_path = c.paths.schema.clone().ok_or_else(|| CliError::Invalid("featurize needs --schema".into()))?;
    let input = c.paths.input.clone().ok_or_else(|| CliError::Invalid("featurize needs --input".into()))?;
    let output = c.paths.output.clone().unwrap_or_else(|| c.in_out("samples.tsv"));
    let schema = load_schema(&schema_path)?;
    let text = read_text(&input)?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| CliError::Invalid(format!("{}: line {}: {msg}", input.display(), i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != schema.len() + 1 {
            return Err(bad(format!("expected {} fields, found {}", schema.len() + 1, cols.len())));
        }
        let label = match cols[0].trim() {
            "0" => 0,
            "1" => 1,
            l => return Err(bad(format!("label `{l}` is not 0 or 1"))),
        };
        let mut fields = Vec::with_capacity(schema.len());
        for (g, raw) in schema.groups().iter().zip(&cols[1..]) {
            fields.push(match g.kind {
                GroupKind::Sparse => Field::Sparse(triletter_featurize(raw, g.dim)),
                GroupKind::Dense => {
                    let vals: std::result::Result<Vec<f64>, _> =
                        raw.split(',').map(|v| v.trim().parse::<f64>()).collect();
                    Field::Dense(vals.map_err(|_| bad(format!("group {}: bad number", g.name)))?)
                }
            });
        }
        let s = Sample { label, fields };
        s.validate(&schema).map_err(|e| bad(e.to_string()))?;
        samples.push(s);
    }
    let ds = Dataset::new(schema, samples)?;
    let mut buf = Vec::new();
    write_samples(&ds, &mut buf).map_err(|e| io_err(&output, e))?;
    write_file(&output, &buf)?;
    run.input(&schema_path)?;
    run.input(&input)?;
    run.artifact(&output)?;
    println!("featurized {} samples into {}", ds.len(), output.display());
    Ok(())
}

fn gen_synth(run: &mut Run) -> Result<()> {
    let c = run.cfg.clone();
    let n_train = c.synth.n_samples;
    let total = SynthConfig {
        n_samples: n_train + c.split.test_samples,
        ..c.synth
    };
    let ds = gen_synthetic(&total)?;
    let schema_path = c.in_out("schema.txt");
    write_file(&schema_path, ds.schema.to_text().as_bytes())?;
    run.artifact(&schema_path)?;
    let (train, test) = ds.samples.split_at(n_train);
    for (name, part) in [("train.tsv", train), ("test.tsv", test)] {
        if part.is_empty() && name == "test.tsv" {
            continue;
        }
        let d = Dataset {
            schema: ds.schema.clone(),
            samples: part.to_vec(),
        };
        let path = c.in_out(name);
        let mut buf = Vec::new();
        write_samples(&d, &mut buf).map_err(|e| io_err(&path, e))?;
        write_file(&path, &buf)?;
        run.artifact(&path)?;
    }
    let positives = ds.labels().filter(|&l| l == 1).count();
    run.metric("positive_rate", positives as f64 / ds.len().max(1) as f64);
    println!("generated {n_train} train and {} test samples", c.split.test_samples);
    Ok(())
}

fn train_embed(run: &mut Run) -> Result<()> {
    let c = run.cfg.clone();
    let cmd = run.command;
    let schema_path = need(c.paths.schema.as_ref(), c.in_out("schema.txt"), "a schema", "run gen-synth or pass --schema", cmd)?;
    let train_path = need(c.paths.train.as_ref(), c.in_out("train.tsv"), "training samples", "run gen-synth or pass --train", cmd)?;
    let ckpt = c.paths.checkpoint.clone().unwrap_or_else(|| c.in_out("checkpoint"));
    let schema = load_schema(&schema_path)?;
    let ds = load_dataset(&schema, &train_path)?;
    let (model, report) = train_deep_crossing(&ds, &c.arch, &c.embed)?;
    save_checkpoint(&model, &ckpt)?;
    run.input(&schema_path)?;
    run.input(&train_path)?;
    run.artifact(&ckpt)?;
    run.metric("initial_train_loss", report.initial_loss);
    run.metric("final_train_loss", report.final_loss());
    println!(
        "deep crossing: train log loss {:.6} -> {:.6}",
        report.initial_loss,
        report.final_loss()
    );
    Ok(())
}

fn extract_stack(run: &mut Run) -> Result<()> {
    let c = run.cfg.clone();
    let cmd = run.command;
    let ckpt = need(c.paths.checkpoint.as_ref(), c.in_out("checkpoint"), "an embedding checkpoint", "run train-embed first", cmd)?;
    let data = need(
        c.paths.data.as_ref().or(c.paths.train.as_ref()),
        c.in_out("train.tsv"),
        "samples",
        "run gen-synth or pass --data",
        cmd,
    )?;
    let output = c.paths.output.clone().unwrap_or_else(|| c.in_out("train.stack"));
    let model = load_checkpoint(&ckpt)?;
    let ds = load_dataset(model.embedder.schema(), &data)?;
    let st = extract_stacking(&ds, &model.embedder)?;
    let mut buf = Vec::new();
    write_stacked(&st, &mut buf).map_err(|e| io_err(&output, e))?;
    write_file(&output, &buf)?;
    run.input(&ckpt)?;
    run.input(&data)?;
    run.artifact(&output)?;
    println!("{} stacking vectors of width {} in {}", st.len(), st.width(), output.display());
    Ok(())
}

fn train_forest_cmd(run: &mut Run) -> Result<()> {
    let c = run.cfg.clone();
    let cmd = run.command;
    let stacked = need(c.paths.stacked.as_ref(), c.in_out("train.stack"), "stacking vectors", "run extract-stack first", cmd)?;
    let forest_path = c.paths.forest.clone().unwrap_or_else(|| c.in_out("forest.txt"));
    let st = parse_stacked(&read_text(&stacked)?).map_err(|e| CliError::Invalid(format!("{}: {e}", stacked.display())))?;
    let (forest, report) = train_gbdt(&st, &c.forest)?;
    write_file(&forest_path, export_forest(&forest).as_bytes())?;
    run.input(&stacked)?;
    run.artifact(&forest_path)?;
    run.metric("initial_train_loss", report.initial_loss);
    run.metric("final_train_loss", *report.round_losses.last().unwrap_or(&report.initial_loss));

    let ckpt = c.paths.checkpoint.clone().unwrap_or_else(|| c.in_out("checkpoint"));
    if ckpt.exists() {
        let model = load_checkpoint(&ckpt)?;
        let bundle = ModelBundle::new(model.embedder, BundleForest::TwoStep(forest), meta(&c)?)?;
        let path = c.paths.bundle.clone().unwrap_or_else(|| c.in_out("two_step.defb"));
        save_bundle(&bundle, &path)?;
        run.input(&ckpt)?;
        run.artifact(&path)?;
    }
    println!(
        "forest: {} trees, train log loss {:.6} -> {:.6}",
        c.forest.n_trees,
        report.initial_loss,
        report.round_losses.last().unwrap_or(&report.initial_loss)
    );
    Ok(())
}

fn config_digest(c: &RunConfig) -> Result<String> {
    let mut clean = c.clone();
    clean.run = RunInfo::default();
    clean.inputs.clear();
    clean.artifacts.clear();
    clean.metrics.clear();
    let text = toml::to_string(&clean).map_err(|e| CliError::Runtime(format!("config: {e}")))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn meta(c: &RunConfig) -> Result<BundleMeta> {
    let created_unix = if c.deterministic {
        0
    } else {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    };
    Ok(BundleMeta {
        created_unix,
        config_digest: config_digest(c)?,
    })
}

fn fuzz_tune(run: &mut Run) -> Result<()> {
    let c = run.cfg.clone();
    let cmd = run.command;
    let forest_path = need(c.paths.forest.as_ref(), c.in_out("forest.txt"), "a forest document", "run train-forest first", cmd)?;
    let ckpt = need(c.paths.checkpoint.as_ref(), c.in_out("checkpoint"), "an embedding checkpoint", "run train-embed first", cmd)?;
    let train_path = need(c.paths.train.as_ref(), c.in_out("train.tsv"), "training samples", "run gen-synth or pass --train", cmd)?;
    let forest = import_forest(&read_text(&forest_path)?)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", forest_path.display())))?;
    let model = load_checkpoint(&ckpt)?;
    let ds = load_dataset(model.embedder.schema(), &train_path)?;
    let st = extract_stacking(&ds, &model.embedder)?;
    let soft = init_fuzzy(&forest, &st, c.fuzz.kappa)?;
    let (embedder, refined, report) = joint_train(&ds, model.embedder, soft, &c.fuzz)?;
    let fuzzy_path = c.in_out("fuzzy.txt");
    write_file(&fuzzy_path, export_fuzzy(&refined).as_bytes())?;
    let bundle = ModelBundle::new(embedder, BundleForest::ThreeStep(refined), meta(&c)?)?;
    let path = c.paths.bundle.clone().unwrap_or_else(|| c.in_out("three_step.defb"));
    save_bundle(&bundle, &path)?;
    run.input(&forest_path)?;
    run.input(&ckpt)?;
    run.input(&train_path)?;
    run.artifact(&fuzzy_path)?;
    run.artifact(&path)?;
    run.metric("two_step_train_loss", report.hard_initial_loss);
    run.metric("initial_soft_train_loss", report.initial_loss);
    run.metric("final_soft_train_loss", report.final_loss());
    run.metric("final_hard_train_loss", report.hard_final_loss);
    println!(
        "fuzz-tune: two-step train loss {:.6}; soft {:.6} -> {:.6}; refined hard {:.6}",
        report.hard_initial_loss,
        report.initial_loss,
        report.final_loss(),
        report.hard_final_loss
    );
    Ok(())
}

fn default_bundle(c: &RunConfig) -> PathBuf {
    c.paths.bundle.clone().unwrap_or_else(|| c.in_out("two_step.defb"))
}

fn predict(run: &mut Run) -> Result<()> {
    let c = run.cfg.clone();
    let cmd = run.command;
    let bundle_path = need(Some(&default_bundle(&c)), PathBuf::new(), "a model bundle", "run train-forest or fuzz-tune first", cmd)?;
    let data = need(c.paths.data.as_ref().or(c.paths.test.as_ref()), c.in_out("test.tsv"), "samples", "pass --data", cmd)?;
    let output = c.paths.output.clone().unwrap_or_else(|| c.in_out("predictions.txt"));
    let bundle = load_bundle(&bundle_path)?;
    let p = Predictor::compile(&bundle)?;
    let ds = load_dataset(bundle.embedder.schema(), &data)?;
    let mut out = String::new();
    for s in &ds.samples {
        out.push_str(&sig17(p.predict(s)?));
        out.push('\n');
    }
    write_file(&output, out.as_bytes())?;
    run.input(&bundle_path)?;
    run.input(&data)?;
    run.artifact(&output)?;
    println!("{} predictions in {}", ds.len(), output.display());
    Ok(())
}

/// Log loss of one model on one labelled file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub name: String,
    pub log_loss: f64,
    pub n: usize,
    pub model_digest: String,
    pub test_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ns_per_sample: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_log_loss: Option<f64>,
}

pub fn read_eval(path: &Path) -> Result<EvalReport> {
    toml::from_str(&read_text(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn eval(run: &mut Run) -> Result<()> {
    let c = run.cfg.clone();
    let cmd = run.command;
    let data = need(c.paths.data.as_ref().or(c.paths.test.as_ref()), c.in_out("test.tsv"), "labelled samples", "pass --data", cmd)?;
    let test_digest = digest_path(&data)?;
    let reps = if c.deterministic { 0 } else { c.eval.timing_reps.max(3) };
    let (model_path, log_loss, n, ns) = if c.eval.deep_crossing {
        let ckpt = need(c.paths.checkpoint.as_ref(), c.in_out("checkpoint"), "an embedding checkpoint", "run train-embed first", cmd)?;
        let model = load_checkpoint(&ckpt)?;
        let ds = load_dataset(model.embedder.schema(), &data)?;
        if ds.is_empty() {
            return Err(CliError::Invalid("evaluation set is empty".into()));
        }
        let ll = model.mean_log_loss(&ds);
        let ns = (reps > 0).then(|| time_per_item(ds.len(), 1, reps, |i| model.predict(&ds.samples[i])));
        (ckpt, ll, ds.len(), ns)
    } else {
        let bp = need(Some(&default_bundle(&c)), PathBuf::new(), "a model bundle", "run train-forest or fuzz-tune first", cmd)?;
        let bundle = load_bundle(&bp)?;
        let p = match &c.eval.scorer {
            Some(s) => Predictor::with_scorer(&bundle, s)?,
            None => Predictor::compile(&bundle)?,
        };
        let ds = load_dataset(bundle.embedder.schema(), &data)?;
        let ll = p.log_loss(&ds)?;
        let ns = (reps > 0).then(|| time_per_item(ds.len(), 1, reps, |i| p.predict(&ds.samples[i]).unwrap_or(0.0)));
        (bp, ll, ds.len(), ns)
    };
    let name = c.eval.name.clone().unwrap_or_else(|| {
        model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
    });
    let mut report = EvalReport {
        name: name.clone(),
        log_loss,
        n,
        model_digest: digest_path(&model_path)?,
        test_digest,
        ns_per_sample: ns,
        baseline: None,
        relative_log_loss: None,
    };
    if let Some(bp) = &c.paths.baseline {
        let base = read_eval(bp)?;
        if base.test_digest != report.test_digest {
            return Err(CliError::Invalid(format!(
                "baseline {} was evaluated on a different test set",
                bp.display()
            )));
        }
        report.relative_log_loss = Some(relative_log_loss(log_loss, base.log_loss)?);
        report.baseline = Some(base.name);
        run.input(bp)?;
    }
    run.stem = format!("eval-{name}");
    let output = c.paths.output.clone().unwrap_or_else(|| c.in_out(&format!("{name}.eval.toml")));
    let text = toml::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&output, text.as_bytes())?;
    run.input(&model_path)?;
    run.input(&data)?;
    run.artifact(&output)?;
    run.metric("log_loss", log_loss);
    print!("{name}: log loss {log_loss:.6} on {n} samples");
    if let Some(r) = report.relative_log_loss {
        print!(", relative {r:.2}");
    }
    println!();
    Ok(())
}

fn bench_cmd(run: &mut Run) -> Result<()> {
    let c = run.cfg.clone();
    let cmd = run.command;
    let bp = need(Some(&default_bundle(&c)), PathBuf::new(), "a model bundle", "run train-forest or fuzz-tune first", cmd)?;
    let data = need(c.paths.data.as_ref().or(c.paths.test.as_ref()), c.in_out("test.tsv"), "samples", "pass --data", cmd)?;
    let output = c.paths.output.clone().unwrap_or_else(|| c.in_out("bench.csv"));
    let bundle = load_bundle(&bp)?;
    let p = match &c.eval.scorer {
        Some(s) => Predictor::with_scorer(&bundle, s)?,
        None => Predictor::compile(&bundle)?,
    };
    let ds = load_dataset(bundle.embedder.schema(), &data)?;
    let report = bench(&p, &ds, &c.bench)?;
    write_file(&output, format!("{CSV_HEADER}\n{}\n", report.csv_row()).as_bytes())?;
    run.input(&bp)?;
    run.input(&data)?;
    print!("{}", report.summary());
    println!("csv: {}", output.display());
    Ok(())
}

/// Side-by-side text table and CSV row of two reports on the same test set.
pub fn compare_reports(base: &EvalReport, cand: &EvalReport) -> Result<(String, String)> {
    if base.test_digest != cand.test_digest {
        return Err(CliError::Invalid(format!(
            "reports {} and {} were evaluated on different test sets",
            base.name, cand.name
        )));
    }
    let rel = relative_log_loss(cand.log_loss, base.log_loss)?;
    let ratio = match (base.ns_per_sample, cand.ns_per_sample) {
        (Some(b), Some(c)) if c > 0.0 => Some(b / c),
        _ => None,
    };
    let ns = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.1}"));
    let mut text = format!(
        "{:<16} {:>12} {:>10} {:>12} {:>8}\n",
        "model", "log_loss", "relative", "ns/sample", "speedup"
    );
    text.push_str(&format!(
        "{:<16} {:>12.6} {:>10.2} {:>12} {:>8.2}\n",
        base.name,
        base.log_loss,
        100.0,
        ns(base.ns_per_sample),
        1.0
    ));
    text.push_str(&format!(
        "{:<16} {:>12.6} {:>10.2} {:>12} {:>8}\n",
        cand.name,
        cand.log_loss,
        rel,
        ns(cand.ns_per_sample),
        ratio.map_or("n/a".to_string(), |r| format!("{r:.2}"))
    ));
    let row = format!(
        "{},{},{},{},{},{},{},{}",
        base.name,
        cand.name,
        base.log_loss,
        cand.log_loss,
        rel,
        base.ns_per_sample.map_or(String::new(), |v| v.to_string()),
        cand.ns_per_sample.map_or(String::new(), |v| v.to_string()),
        ratio.map_or(String::new(), |v| v.to_string()),
    );
    Ok((text, row))
}

pub const COMPARE_HEADER: &str =
    "baseline,candidate,baseline_log_loss,candidate_log_loss,relative_log_loss,baseline_ns,candidate_ns,speedup";

fn compare(run: &mut Run) -> Result<()> {
    let c = run.cfg.clone();
    let bp = c.paths.baseline.clone().ok_or_else(|| CliError::Invalid("compare needs --baseline".into()))?;
    let cp = c.paths.candidate.clone().ok_or_else(|| CliError::Invalid("compare needs --candidate".into()))?;
    let (base, cand) = (read_eval(&bp)?, read_eval(&cp)?);
    let (text, row) = compare_reports(&base, &cand)?;
    let output = c.paths.output.clone().unwrap_or_else(|| c.in_out("compare.csv"));
    write_file(&output, format!("{COMPARE_HEADER}\n{row}\n").as_bytes())?;
    run.input(&bp)?;
    run.input(&cp)?;
    run.artifact(&output)?;
    print!("{text}");
    Ok(())
}
