//! Command-line front end. Each subcommand is a plain function so tests can
//! drive it without spawning the binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, MANIFEST_FILE};
use crate::data::{
    export_dataset, index_casia_b, split_lt, synth_dataset, DatasetIndex, SplitRule, SynthManifest, SynthSpec,
    SYNTH_MANIFEST,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, extract_features, matrix_csv, report_csv, sweep, FramePolicy, Protocol, SweepOptions,
    DEFAULT_DROP_NUMBERS,
};
use crate::gradcheck::SuiteEntry;
use crate::gradsuite::{run_suite, SuiteConfig};
use crate::training::{train_loop, write_trace, TrainConfig};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_MANIFEST: &str = "run.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const THREADS_ENV: &str = "GAITCHD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gaitchd", version, about = "Horizontal dropout for silhouette gait recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset in the CASIA-B directory layout.
    Synth(SynthArgs),
    /// Train a backbone and write checkpoint, loss trace and run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and evaluate once per drop number.
    Sweep(SweepArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub subjects: usize,
    /// Comma separated view angles.
    #[arg(long, value_delimiter = ',', default_values_t = [18u16, 54, 90, 126, 162])]
    pub views: Vec<u16>,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Dataset root in the CASIA-B layout, or a synthetic manifest (JSON)
    /// whose dataset is regenerated in memory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Auto)]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Auto,
    Lt,
    Fraction,
}

impl From<SplitArg> for SplitRule {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Auto => SplitRule::Auto,
            SplitArg::Lt => SplitRule::Lt,
            SplitArg::Fraction => SplitRule::Fraction,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A training output directory or a bare checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// cross-view or reid; there is no default so reports always name it.
    #[arg(long)]
    pub protocol: Protocol,
    /// Put nm-04 in the probe set as well as the gallery.
    #[arg(long)]
    pub include_nm04: bool,
    /// Report CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per view-pair matrix CSV.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Label for the report row; read from the run manifest when omitted.
    #[arg(long)]
    pub drop_number: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DROP_NUMBERS)]
    pub drop_numbers: Vec<usize>,
    /// cross-view or reid; there is no default so reports always name it.
    #[arg(long)]
    pub protocol: Protocol,
    #[arg(long)]
    pub include_nm04: bool,
    /// Run points concurrently, seeding each with seed + drop_number.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Dataset provenance recorded in manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    Root { path: PathBuf },
    Synthetic { seed: u64, spec: SynthSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub data: DataSource,
    pub split: SplitRule,
    pub train_subjects: Vec<String>,
    pub config: TrainConfig,
    /// Sweep only: seed used for every drop number.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub point_seeds: Vec<(usize, u64)>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 1,
        Error::Numeric(_) | Error::AtKink { .. } => 3,
        Error::Shape { .. } | Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Json(_) => 2,
    }
}

/// Caps the global worker pool from `GAITCHD_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a pool built earlier in the process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|_| ()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty (use --force to write into it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec::new(a.subjects, &a.views, a.frames);
    spec.validate()?;
    prepare_out_dir(&a.out, a.force)?;
    let index = synth_dataset(&spec, a.seed)?;
    export_dataset(&index, &a.out)?;
    let manifest = SynthManifest {
        generator: concat!("gaitchd ", env!("CARGO_PKG_VERSION")).into(),
        seed: a.seed,
        spec,
    };
    write(&a.out.join(SYNTH_MANIFEST), to_json(&manifest)?)?;
    eprintln!("wrote {} sequences to {}", index.sequences.len(), a.out.display());
    Ok(())
}

/// Resolves `--data`: a JSON file is a synthetic manifest, anything else a
/// dataset root.
pub fn load_data(path: &Path) -> Result<(DatasetIndex, DataSource)> {
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SynthManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let index = synth_dataset(&m.spec, m.seed)?;
        return Ok((
            index,
            DataSource::Synthetic {
                seed: m.seed,
                spec: m.spec,
            },
        ));
    }
    let (index, report) = index_casia_b(path)?;
    for s in &report.skipped {
        eprintln!("warning: skipped {}: {}", s.path.display(), s.reason);
    }
    let (index, skipped) = index.materialize()?;
    for s in &skipped {
        eprintln!("warning: skipped {}: {}", s.path.display(), s.reason);
    }
    Ok((index, DataSource::Root { path: path.to_path_buf() }))
}

fn load_split(a: &DataArgs) -> Result<(DatasetIndex, DatasetIndex, DataSource)> {
    let (index, source) = load_data(&a.data)?;
    let (train, test) = split_lt(&index, a.split.into())?;
    Ok((train, test, source))
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => {
            let cfg = TrainConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (train, _, source) = load_split(&a.data)?;
    let out = train_loop(&cfg, &train)?;
    out.checkpoint.save(&a.out.join(CHECKPOINT_DIR))?;
    write_trace(&out.trace, &a.out.join(LOSS_FILE))?;
    let manifest = RunManifest {
        command: "train".into(),
        data: source,
        split: a.data.split.into(),
        train_subjects: train.subjects.clone(),
        config: cfg,
        point_seeds: Vec::new(),
    };
    write(&a.out.join(RUN_MANIFEST), to_json(&manifest)?)?;
    if let Some(last) = out.trace.last() {
        eprintln!("final loss {:.6} ({} active triplets)", last.loss, last.active_triplets);
    }
    Ok(())
}

/// Finds the checkpoint inside a training output directory, together with
/// its run manifest when present.
fn resolve_checkpoint(dir: &Path) -> Result<(PathBuf, Option<RunManifest>)> {
    let nested = dir.join(CHECKPOINT_DIR);
    if nested.join(MANIFEST_FILE).is_file() {
        let run = dir.join(RUN_MANIFEST);
        let manifest = if run.is_file() {
            let text = fs::read_to_string(&run).map_err(|e| Error::io(&run, e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        return Ok((nested, manifest));
    }
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok((dir.to_path_buf(), None));
    }
    Err(Error::Data(format!("no checkpoint found at {}", dir.display())))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (ckpt_dir, run) = resolve_checkpoint(&a.checkpoint)?;
    let ckpt = Checkpoint::load(&ckpt_dir)?;
    let (_, test, _) = load_split(&a.data)?;
    if let Some(run) = &run {
        if let Some(s) = test.subjects.iter().find(|s| run.train_subjects.contains(s)) {
            eprintln!("warning: test subject {s} was used for training");
        }
    }
    let (table, skipped) = extract_features(&ckpt.params, &test, FramePolicy::default())?;
    for s in &skipped {
        eprintln!("warning: skipped {}: {}", s.path.display(), s.reason);
    }
    let report = evaluate(&table, a.protocol, a.include_nm04);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let d = a.drop_number.or(run.map(|r| r.config.drop_number)).unwrap_or(0);
    write(&a.out, report_csv(&[report.row(d)]))?;
    if let Some(m) = &a.matrix {
        write(m, matrix_csv(&report))?;
    }
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (train, test, source) = load_split(&a.data)?;
    let opts = SweepOptions {
        drop_numbers: a.drop_numbers.clone(),
        protocol: a.protocol,
        include_nm04: a.include_nm04,
        parallel: a.parallel,
        frames: FramePolicy::default(),
    };
    let manifest = RunManifest {
        command: "sweep".into(),
        data: source,
        split: a.data.split.into(),
        train_subjects: train.subjects.clone(),
        point_seeds: opts
            .drop_numbers
            .iter()
            .map(|&d| (d, crate::evaluation::sweep_seed(&cfg, d, opts.parallel)))
            .collect(),
        config: cfg.clone(),
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write(&a.out.join(RUN_MANIFEST), to_json(&manifest)?)?;
    sweep(&cfg, &train, &test, &opts, Some(&a.out.join(SWEEP_FILE)))?;
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Vec<SuiteEntry>> {
    let entries = run_suite(&SuiteConfig {
        instances: a.instances,
        seed: a.seed,
        ..SuiteConfig::default()
    })?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        println!(
            "{:<32} {:>3} instances {:>5} coords  max rel err {:.3e}  {}",
            e.name,
            e.instances,
            e.coordinates,
            e.max_rel_error,
            if e.passed { "ok" } else { "FAIL" }
        );
        worst = worst.max(e.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    if let Some(bad) = entries.iter().find(|e| !e.passed) {
        return Err(Error::Numeric(format!(
            "gradient check failed for {} (max relative error {:.3e})",
            bad.name, bad.max_rel_error
        )));
    }
    Ok(entries)
}
