//! Command-line entry point.
//!
//! Every command writes into an output directory holding its results and a
//! single `manifest.json` describing the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{Denoiser, GaussianOracle};
use crate::error::Error;
use crate::layout::{fit_stats, group_magnitudes, group_weights, normalize, overall_magnitude, FeatureLayout, NormScheme, NormStats};
use crate::likelihood::{nll, round_trip_error, unnormalized, NllConfig};
use crate::losses::LossMode;
use crate::metrics::{build_embedder, evaluate, Embedder, MetricsReport, SkatingThresholds, EMBED_DIMS};
use crate::motion::io::{hex, read_dataset, write_dataset, LoadedDataset};
use crate::motion::{generate_dataset, MotionSample, Skeleton, SynthConfig};
use crate::par::{self, Exec};
use crate::sampler::{build_schedule, generate, ScheduleConfig};
use crate::seeding::{self, tag};
use crate::train::{self, log_grid, probe_csv, TrainConfig, TrainOutput};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "groupdiff", version, about = "Grouped-feature diffusion: data, training, sampling, likelihoods and metrics")]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic motion dataset (train/val/test splits).
    GenData(GenDataArgs),
    /// Fit normalization statistics and report group magnitudes.
    Stats(StatsArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Generate sequences from a checkpoint.
    Sample(SampleArgs),
    /// Negative log-likelihood via the probability-flow ODE.
    Nll(NllArgs),
    /// Round-trip error data -> noise -> data.
    Rte(RteArgs),
    /// Gradient norms of the loss with respect to the network output.
    ProbeGrads(ProbeArgs),
    /// Score generated sequences against a reference split.
    Eval(EvalArgs),
    /// Train, sample and score all four loss configurations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Structured,
    Baseline,
}

impl From<SchemeArg> for NormScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Structured => NormScheme::Structured,
            SchemeArg::Baseline => NormScheme::Baseline,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, value_enum, default_value_t = SchemeArg::Structured)]
    scheme: SchemeArg,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Overrides on top of a JSON training config.
#[derive(Args, Debug, Default, Clone)]
struct TrainOverrides {
    /// JSON file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    attention: Option<bool>,
    #[arg(long)]
    weight_norm: Option<bool>,
    #[arg(long)]
    column_path: Option<bool>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    keep_last: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    /// Epochs at which gradient norms are probed, comma separated.
    #[arg(long, value_delimiter = ',')]
    probe_epochs: Option<Vec<usize>>,
}

impl TrainOverrides {
    fn resolve(&self, mode: Option<LossMode>) -> CliResult<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => serde_json::from_slice(&read(p)?)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $($target:ident).+),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$($target).+ = v; })*
            };
        }
        set!(epochs => epochs, batch_size => batch_size, lr => max_lr, warmup_epochs => warmup_epochs,
             seed => seed, channels => net.channels, blocks => net.blocks_per_level, attention => net.attention,
             weight_norm => net.weight_norm, column_path => net.column_path, augment => augment, keep_last => keep_last,
             val_samples => val_samples, probe_epochs => probe_epochs);
        if let Some(m) = mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<LossMode>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug, Clone)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 9.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.02)]
    t_min: f64,
    #[arg(long, default_value_t = 80.0)]
    t_max: f64,
}

impl ScheduleArgs {
    fn config(&self) -> ScheduleConfig {
        ScheduleConfig { n_steps: self.steps, rho: self.rho, t_min: self.t_min, t_max: self.t_max }
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skeleton to store with the samples (defaults to the built-in one).
    #[arg(long)]
    skeleton: Option<PathBuf>,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

/// Which model drives an ODE solve.
#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    /// Use the exact denoiser of N(0, I) instead of a checkpoint; evaluated
    /// sequences are then drawn from that Gaussian.
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Space {
    Normalized,
    Unnormalized,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Report {
    PerDim,
    Total,
}

#[derive(Args, Debug)]
struct NllArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Function evaluations per solve, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    nfe: Vec<usize>,
    #[arg(long, default_value_t = 9.0)]
    rho: f64,
    #[arg(long, default_value_t = 80.0)]
    t_max: f64,
    #[arg(long, default_value_t = 16)]
    probes: usize,
    #[arg(long, value_enum, default_value_t = Space::Unnormalized)]
    space: Space,
    #[arg(long, value_enum, default_value_t = Report::PerDim)]
    report: Report,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RteArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    fwd_nfe: usize,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    bwd_nfe: Vec<usize>,
    #[arg(long, default_value_t = 9.0)]
    rho_fwd: f64,
    #[arg(long, default_value_t = 9.0)]
    rho_bwd: f64,
    #[arg(long, default_value_t = 80.0)]
    t_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 25)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of generated sequences (as written by `sample`).
    #[arg(long)]
    samples: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Reference split.
    #[arg(long, default_value = "val")]
    split: String,
    /// Frozen embedder; built from the training split when absent.
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Generated sequences per configuration.
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 300)]
    pairs: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub build_id: String,
    pub dataset_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    /// SHA-256 of every file written, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn build_id() -> String {
    let base = format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    match option_env!("GROUPDIFF_BUILD_ID") {
        Some(id) => format!("{base}+{id}"),
        None => base,
    }
}

struct Run {
    manifest: RunManifest,
    dir: PathBuf,
}

impl Run {
    fn start(command: &str, argv: &[String], dir: &Path, seed: u64) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            manifest: RunManifest {
                command: command.into(),
                argv: argv.to_vec(),
                config: serde_json::Value::Null,
                seed,
                build_id: build_id(),
                dataset_hash: None,
                checkpoint_hash: None,
                outputs: BTreeMap::new(),
                started_unix: now(),
                finished_unix: 0,
            },
            dir: dir.to_path_buf(),
        })
    }

    fn config<T: Serialize>(&mut self, cfg: &T) -> CliResult<()> {
        self.manifest.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.record(name, bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.manifest.outputs.insert(name.into(), hex(&Sha256::digest(bytes)));
    }

    fn record_file(&mut self, name: &str) -> CliResult<()> {
        let bytes = read(&self.dir.join(name))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn finish(mut self) -> CliResult<()> {
        self.manifest.finished_unix = now();
        fs::write(self.dir.join(MANIFEST), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }
}

fn read(p: &Path) -> CliResult<Vec<u8>> {
    fs::read(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))
}

fn load_split(root: &Path, split: &str) -> CliResult<LoadedDataset> {
    let dir = root.join(split);
    if !dir.join("data.bin").exists() {
        return Err(CliError::Usage(format!("no dataset split at {}", dir.display())));
    }
    Ok(read_dataset(&dir)?)
}

fn load_ckpt(p: &Path) -> CliResult<(Checkpoint, [u8; 32])> {
    if !p.exists() {
        return Err(CliError::Usage(format!("no checkpoint at {}", p.display())));
    }
    Ok(Checkpoint::load(p)?)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 success, 1 usage error, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(t) = cli.threads {
        par::set_threads(t);
    }
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command, argv: &[String]) -> CliResult<()> {
    let exec = Exec::default();
    match cmd {
        Command::GenData(a) => gen_data(a, argv),
        Command::Stats(a) => stats(a, argv),
        Command::Train(a) => train_cmd(a, argv, exec),
        Command::Sample(a) => sample(a, argv, exec),
        Command::Nll(a) => nll_cmd(a, argv, exec),
        Command::Rte(a) => rte_cmd(a, argv, exec),
        Command::ProbeGrads(a) => probe(a, argv, exec),
        Command::Eval(a) => eval(a, argv, exec),
        Command::Ablate(a) => ablate(a, argv, exec),
    }
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => serde_json::from_slice(&read(p)?)?,
        None => SynthConfig::default(),
    };
    for (v, slot) in [(a.n_train, &mut cfg.n_train), (a.n_val, &mut cfg.n_val), (a.n_test, &mut cfg.n_test), (a.l_max, &mut cfg.l_max)] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    let mut run = Run::start("gen-data", argv, &a.out, a.seed)?;
    run.config(&cfg)?;
    let ds = generate_dataset(&cfg, a.seed)?;
    let mut h = Sha256::new();
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let hash = write_dataset(&a.out.join(name), &ds.layout, &ds.skeleton, &split.batch.samples)?;
        h.update(hash);
        run.manifest.outputs.insert(format!("{name}/data.bin"), hex(&hash));
    }
    run.manifest.dataset_hash = Some(hex(&h.finalize()));
    run.finish()
}

#[derive(Serialize)]
struct StatsReport<'a> {
    scheme: NormScheme,
    samples: usize,
    stats: serde_json::Value,
    group_names: Vec<&'a str>,
    group_magnitudes: Vec<f64>,
    overall_magnitude: f64,
    group_weights: Vec<f64>,
}

fn stats(a: StatsArgs, argv: &[String]) -> CliResult<()> {
    let ds = load_split(&a.data.data, &a.split)?;
    let scheme: NormScheme = a.scheme.into();
    let mut run = Run::start("stats", argv, &a.out, 0)?;
    run.manifest.dataset_hash = Some(hex(&ds.hash));
    run.config(&serde_json::json!({ "split": a.split, "scheme": scheme }))?;
    let st = fit_stats(&ds.samples, &ds.layout, scheme)?;
    let norm = ds.samples.iter().map(|s| normalize(s, &st)).collect::<crate::Result<Vec<_>>>()?;
    let report = StatsReport {
        scheme,
        samples: ds.samples.len(),
        stats: st.to_json(),
        group_names: ds.layout.groups.iter().map(|g| g.name.as_str()).collect(),
        group_magnitudes: group_magnitudes(&norm, &ds.layout),
        overall_magnitude: overall_magnitude(&norm),
        group_weights: group_weights(&ds.layout),
    };
    run.write("stats.json", &serde_json::to_vec_pretty(&report)?)?;
    run.finish()
}

fn train_cmd(a: TrainArgs, argv: &[String], exec: Exec) -> CliResult<()> {
    let cfg = a.overrides.resolve(a.mode)?;
    let tr = load_split(&a.data.data, "train")?;
    let val = load_split(&a.data.data, "val").ok();
    let mut run = Run::start("train", argv, &a.out, cfg.seed)?;
    run.config(&cfg)?;
    run.manifest.dataset_hash = Some(hex(&tr.hash));
    let out = run_training(&cfg, &tr, val.as_ref(), &a.out, exec)?;
    let hash = save_selected(&cfg, &tr.layout, &out, &a.out)?;
    run.manifest.checkpoint_hash = Some(hex(&hash));
    for f in ["train_log.csv", "u_curves.csv", "grad_probe.csv", "model.gdkw"] {
        if a.out.join(f).exists() {
            run.record_file(f)?;
        }
    }
    for (p, h) in &out.checkpoints {
        if let Some(name) = p.file_name() {
            run.manifest.outputs.insert(name.to_string_lossy().into_owned(), hex(h));
        }
    }
    run.finish()
}

fn run_training(cfg: &TrainConfig, tr: &LoadedDataset, val: Option<&LoadedDataset>, dir: &Path, exec: Exec) -> CliResult<TrainOutput> {
    let setup = train::setup(cfg, &tr.layout, &tr.samples)?;
    let val_samples: &[MotionSample] = val.map_or(&[], |v| &v.samples);
    Ok(train::train(cfg, setup, &tr.samples, val_samples, Some(dir), exec)?)
}

/// Writes the validation-selected weights as `model.gdkw`.
fn save_selected(cfg: &TrainConfig, layout: &FeatureLayout, out: &TrainOutput, dir: &Path) -> CliResult<[u8; 32]> {
    let ckpt = Checkpoint {
        model: out.selected.clone(),
        layout: layout.clone(),
        stats: out.stats.clone(),
        mode: cfg.mode,
        epoch: out.selected_epoch,
        optimizer: None,
    };
    Ok(ckpt.save(&dir.join("model.gdkw"))?)
}

fn load_skeleton(p: Option<&Path>, layout: &FeatureLayout) -> CliResult<Skeleton> {
    let sk = match p {
        Some(p) => serde_json::from_slice(&read(p)?)?,
        None => Skeleton::default_k8(),
    };
    sk.validate()?;
    if sk.feature_dim() != layout.n() {
        return Err(CliError::Usage(format!("skeleton has {} features, checkpoint expects {}", sk.feature_dim(), layout.n())));
    }
    Ok(sk)
}

fn sample(a: SampleArgs, argv: &[String], exec: Exec) -> CliResult<()> {
    let (ckpt, hash) = load_ckpt(&a.ckpt)?;
    let skeleton = load_skeleton(a.skeleton.as_deref(), &ckpt.layout)?;
    let schedule = build_schedule(a.schedule.config(), true)?;
    let mut run = Run::start("sample", argv, &a.out, a.seed)?;
    run.manifest.checkpoint_hash = Some(hex(&hash));
    run.config(&serde_json::json!({ "count": a.count, "schedule": schedule, "nfe": schedule.nfe() }))?;
    let gen = generate(&ckpt.model, &ckpt.stats, a.count, ckpt.layout.l_max, a.seed, &schedule, exec)?;
    let h = write_dataset(&a.out, &ckpt.layout, &skeleton, &gen)?;
    run.manifest.outputs.insert("data.bin".into(), hex(&h));
    run.record_file("layout.json")?;
    run.record_file("skeleton.json")?;
    run.finish()
}

/// The model behind an ODE solve and the normalized sequences it scores.
struct Subject {
    model: Box<dyn Denoiser>,
    stats: Option<NormStats>,
    samples: Vec<MotionSample>,
    ckpt_hash: Option<[u8; 32]>,
}

fn subject(m: &ModelArgs, ds: &LoadedDataset, count: usize, seed: u64) -> CliResult<Subject> {
    let take = count.min(ds.samples.len());
    if m.oracle {
        let n = ds.layout.n();
        let samples = (0..count)
            .map(|i| {
                let mut rng = seeding::stream(seed, &[tag::SAMPLE, i as u64]);
                let frames = (0..ds.layout.l_max * n).map(|_| StandardNormal.sample(&mut rng)).collect();
                MotionSample::new(frames, ds.layout.l_max, n)
            })
            .collect::<crate::Result<_>>()?;
        return Ok(Subject { model: Box::new(GaussianOracle::new(vec![0.0; n], 1.0)?), stats: None, samples, ckpt_hash: None });
    }
    let path = m.ckpt.as_ref().ok_or_else(|| CliError::Usage("--ckpt or --oracle is required".into()))?;
    let (ck, hash) = load_ckpt(path)?;
    if ck.layout.hash() != ds.layout.hash() {
        return Err(CliError::Usage("dataset layout differs from the checkpoint's".into()));
    }
    let samples = ds.samples[..take].iter().map(|s| normalize(s, &ck.stats)).collect::<crate::Result<_>>()?;
    Ok(Subject { model: Box::new(ck.model), stats: Some(ck.stats), samples, ckpt_hash: Some(hash) })
}

fn csv_header() -> &'static str {
    "sample_id,nfe_fwd,nfe_bwd,rho_fwd,rho_bwd,value\n"
}

fn nll_cmd(a: NllArgs, argv: &[String], exec: Exec) -> CliResult<()> {
    let ds = load_split(&a.data.data, &a.split)?;
    let subj = subject(&a.model, &ds, a.count, a.seed)?;
    let mut run = Run::start("nll", argv, &a.out, a.seed)?;
    run.manifest.dataset_hash = Some(hex(&ds.hash));
    run.manifest.checkpoint_hash = subj.ckpt_hash.map(|h| hex(&h));
    let configs = a
        .nfe
        .iter()
        .map(|&nfe| Ok(NllConfig { probes: a.probes, schedule: ScheduleConfig::for_likelihood(nfe, a.rho, a.t_max)? }))
        .collect::<crate::Result<Vec<_>>>()?;
    run.config(&serde_json::json!({ "split": a.split, "configs": configs, "space": a.space, "report": a.report, "oracle": a.model.oracle }))?;
    let jobs: Vec<(usize, usize)> = (0..configs.len()).flat_map(|c| (0..subj.samples.len()).map(move |i| (c, i))).collect();
    let results = par::map_slice(exec, &jobs, |&(c, i)| nll(subj.model.as_ref(), &subj.samples[i], &configs[c], a.seed, i as u64));
    let mut s = String::from(csv_header());
    for (&(c, i), r) in jobs.iter().zip(results) {
        let mut r = r?;
        if let (Space::Unnormalized, Some(st)) = (a.space, &subj.stats) {
            r = unnormalized(r, st, subj.samples[i].valid_len);
        }
        let v = match a.report {
            Report::PerDim => r.per_dim,
            Report::Total => r.total,
        };
        s.push_str(&format!("{i},{},0,{},0,{v:e}\n", r.nfe, configs[c].schedule.rho));
    }
    run.write("nll.csv", s.as_bytes())?;
    run.finish()
}

fn rte_cmd(a: RteArgs, argv: &[String], exec: Exec) -> CliResult<()> {
    let ds = load_split(&a.data.data, &a.split)?;
    let subj = subject(&a.model, &ds, a.count, a.seed)?;
    let fwd = ScheduleConfig::for_likelihood(a.fwd_nfe, a.rho_fwd, a.t_max)?;
    let bwds = a.bwd_nfe.iter().map(|&n| ScheduleConfig::for_likelihood(n, a.rho_bwd, a.t_max)).collect::<crate::Result<Vec<_>>>()?;
    let mut run = Run::start("rte", argv, &a.out, a.seed)?;
    run.manifest.dataset_hash = Some(hex(&ds.hash));
    run.manifest.checkpoint_hash = subj.ckpt_hash.map(|h| hex(&h));
    run.config(&serde_json::json!({ "split": a.split, "fwd": fwd, "bwd": bwds, "oracle": a.model.oracle }))?;
    let jobs: Vec<(usize, usize)> = (0..subj.samples.len()).flat_map(|i| (0..bwds.len()).map(move |b| (i, b))).collect();
    let results = par::map_slice(exec, &jobs, |&(i, b)| round_trip_error(subj.model.as_ref(), &subj.samples[i], fwd, bwds[b]));
    let mut s = String::from(csv_header());
    for (&(i, b), r) in jobs.iter().zip(results) {
        s.push_str(&format!("{i},{},{},{},{},{:e}\n", a.fwd_nfe, a.bwd_nfe[b], a.rho_fwd, a.rho_bwd, r?));
    }
    run.write("rte.csv", s.as_bytes())?;
    run.finish()
}

fn probe(a: ProbeArgs, argv: &[String], exec: Exec) -> CliResult<()> {
    let (ck, hash) = load_ckpt(&a.ckpt)?;
    let ds = load_split(&a.data.data, &a.split)?;
    if ck.layout.hash() != ds.layout.hash() {
        return Err(CliError::Usage("dataset layout differs from the checkpoint's".into()));
    }
    let mut run = Run::start("probe-grads", argv, &a.out, a.seed)?;
    run.manifest.dataset_hash = Some(hex(&ds.hash));
    run.manifest.checkpoint_hash = Some(hex(&hash));
    let pc = ck.model.precond;
    let grid = log_grid(pc.p_mean - 3.0 * pc.p_std, pc.p_mean + 3.0 * pc.p_std, a.points);
    run.config(&serde_json::json!({ "split": a.split, "samples": a.samples, "t_grid": grid, "mode": ck.mode }))?;
    let take = a.samples.min(ds.samples.len());
    let norm = ds.samples[..take].iter().map(|s| normalize(s, &ck.stats)).collect::<crate::Result<Vec<_>>>()?;
    let g = ck.layout.num_groups();
    let gw = if ck.mode.uses_group_weights() { group_weights(&ck.layout) } else { vec![1.0; g] };
    let rows = train::probe_gradient_norms(&ck.model, &ck.layout, ck.mode, &gw, &norm, &grid, a.seed, exec)?;
    let names: Vec<&str> = ck.layout.groups.iter().map(|g| g.name.as_str()).collect();
    run.write("grad_probe.csv", probe_csv(&[(ck.epoch, rows)], &names).as_bytes())?;
    run.finish()
}

fn reference_embedder(root: &Path, exec: Exec) -> CliResult<(Embedder, LoadedDataset)> {
    let tr = load_split(root, "train")?;
    let st = fit_stats(&tr.samples, &tr.layout, NormScheme::Structured)?;
    let emb = build_embedder(&tr.samples, &tr.layout, &st, EMBED_DIMS, exec)?;
    Ok((emb, tr))
}

fn eval(a: EvalArgs, argv: &[String], exec: Exec) -> CliResult<()> {
    let gen = read_dataset(&a.samples)?;
    let reference = load_split(&a.data.data, &a.split)?;
    let mut run = Run::start("eval", argv, &a.out, a.seed)?;
    run.manifest.dataset_hash = Some(hex(&reference.hash));
    let emb = match &a.embedder {
        Some(p) => Embedder::from_json(&serde_json::from_slice(&read(p)?)?)?,
        None => {
            let (emb, _) = reference_embedder(&a.data.data, exec)?;
            run.write("embedder.json", &serde_json::to_vec(&emb.to_json())?)?;
            emb
        }
    };
    if emb.layout.hash() != gen.layout.hash() || gen.layout.hash() != reference.layout.hash() {
        return Err(CliError::Usage("generated, reference and embedder layouts differ".into()));
    }
    run.config(&serde_json::json!({ "split": a.split, "pairs": a.pairs, "samples_hash": hex(&gen.hash) }))?;
    let report = evaluate(&gen.samples, &reference.samples, &emb, &gen.skeleton, SkatingThresholds::default(), a.pairs, a.seed, exec)?;
    run.write("metrics.json", &serde_json::to_vec_pretty(&report)?)?;
    run.write("metrics.csv", format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()).as_bytes())?;
    run.finish()
}

fn ablate(a: AblateArgs, argv: &[String], exec: Exec) -> CliResult<()> {
    let base = a.overrides.resolve(None)?;
    let (emb, tr) = reference_embedder(&a.data.data, exec)?;
    let val = load_split(&a.data.data, "val")?;
    let schedule = build_schedule(a.schedule.config(), true)?;
    let mut run = Run::start("ablate", argv, &a.out, base.seed)?;
    run.manifest.dataset_hash = Some(hex(&tr.hash));
    run.config(&serde_json::json!({ "train": base, "schedule": schedule, "count": a.count, "pairs": a.pairs }))?;
    run.write("embedder.json", &serde_json::to_vec(&emb.to_json())?)?;
    let mut csv = String::from("mode,frechet,diversity,foot_skating,limb_sigma\n");
    for mode in LossMode::ALL {
        let cfg = TrainConfig { mode, ..base.clone() };
        let dir = a.out.join(mode.name());
        let mut sub = Run::start("ablate/train", argv, &dir, cfg.seed)?;
        sub.config(&cfg)?;
        sub.manifest.dataset_hash = Some(hex(&tr.hash));
        let out = run_training(&cfg, &tr, Some(&val), &dir, exec)?;
        let hash = save_selected(&cfg, &tr.layout, &out, &dir)?;
        sub.manifest.checkpoint_hash = Some(hex(&hash));
        let gen = generate(&out.selected, &out.stats, a.count, tr.layout.l_max, cfg.seed, &schedule, exec)?;
        let samples_hash = write_dataset(&dir.join("samples"), &tr.layout, &tr.skeleton, &gen)?;
        sub.manifest.outputs.insert("samples/data.bin".into(), hex(&samples_hash));
        let r = evaluate(&gen, &val.samples, &emb, &tr.skeleton, SkatingThresholds::default(), a.pairs, cfg.seed, exec)?;
        sub.write("metrics.json", &serde_json::to_vec_pretty(&r)?)?;
        sub.finish()?;
        log::info!("{}: frechet {:.4} diversity {:.4}", mode.name(), r.frechet, r.diversity);
        csv.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", mode.name(), r.frechet, r.diversity, r.foot_skating_pct, r.limb_sigma_mm));
    }
    run.write("ablate.csv", csv.as_bytes())?;
    run.finish()
}
