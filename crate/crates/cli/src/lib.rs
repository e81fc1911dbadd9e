//! The `ssnet` command line.

pub mod error;
pub mod fetch;

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ssnet::checkpoint::{Checkpoint, CheckpointMeta};
use ssnet::data::{load_records, split_train_val, ColumnLayout, NormStats, ProteinRecord};
use ssnet::decode::{
    conditional_beam_search, decode_all, decoded_report, ensemble_beam_search, ensemble_pair_uniform, evaluate,
    greedy_decode,
};
use ssnet::experiment::ExperimentConfig;
use ssnet::gradcheck::standard_suite;
use ssnet::model::Model;
use ssnet::optim::{train_loop, Sinks};
use ssnet::rng::RngStream;

pub use error::{exit, CliError, CliResult};
use fetch::{fetch_all, FetchStatus, Manifest};

/// Environment variable overriding the data directory.
pub const DATA_DIR_ENV: &str = "SSNET_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "ssnet", version, about = "Protein secondary structure prediction with multi-scale convolutional networks")]
pub struct Cli {
    /// Directory holding dataset files; relative data paths resolve against it.
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = "data")]
    pub data_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download dataset files and verify their checksums.
    Fetch(FetchArgs),
    /// Summarize an array file.
    Inspect(InspectArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Decode label sequences with greedy, beam or ensemble decoders.
    Decode(DecodeArgs),
    /// Finite-difference check of every layer's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// JSON manifest `{base_url, files: [{name, sha256}]}`; defaults to the public dataset.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Destination directory (defaults to the data directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    /// Column layout JSON.
    #[arg(long)]
    pub layout: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Output directory for the log, checkpoints and summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Primary model. Conditioned models are beam-decoded; unconditional ones
    /// are decoded greedily unless a partner model is given.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Conditioned partner for ensemble beam search.
    #[arg(long, conflicts_with = "pair_checkpoint")]
    pub cond_checkpoint: Option<PathBuf>,
    /// Unconditional partner for the equal-weight ensemble.
    #[arg(long)]
    pub pair_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Weight on the conditioned model's log-probabilities.
    #[arg(long)]
    pub blend: Option<f64>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    /// Label file (one `id<TAB>labels` line per protein); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of seeds (0..N).
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let c = context.into();
    move |e| CliError::io(c, e)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> CliResult<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(CliError::io("writing to stdout", e)),
        _ => Ok(()),
    }
}

fn resolve_existing(data_dir: &Path, p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        data_dir.join(p)
    } else {
        p.to_path_buf()
    }
}

fn load_config(run: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &run.config {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingFile(p.clone()));
            }
            ExperimentConfig::load(p)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= run.deterministic;
    if cfg.deterministic {
        // Kernels reduce in a fixed order regardless of threads; one thread
        // additionally removes scheduling from the picture.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

/// Records of one split, standardized with `stats` (fitted on the training
/// split when `None`). Returns the statistics used.
fn split_records(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    split: Split,
    stats: Option<&NormStats>,
) -> CliResult<(Vec<ProteinRecord>, NormStats)> {
    let needs_train = split != Split::Test || stats.is_none();
    let (train, val) = if needs_train {
        let all = cfg.data.load_train(data_dir, cfg.seed)?;
        let (t, v) = split_train_val(all, cfg.seed, cfg.data.validation())?;
        (t, v)
    } else {
        (Vec::new(), Vec::new())
    };
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(&train)?,
    };
    let mut records = match split {
        Split::Train => train,
        Split::Val => val,
        Split::Test => cfg
            .data
            .load_test(data_dir, cfg.seed)?
            .ok_or_else(|| CliError::Usage("the configured data source has no test set".into()))?,
    };
    stats.apply(&mut records)?;
    Ok((records, stats))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    architecture: &'a str,
    parameters: usize,
    iterations: u64,
    best_iteration: u64,
    best_val_q8: f64,
    stopped_early: bool,
    checkpoint: PathBuf,
    log: PathBuf,
}

pub fn cmd_train(args: &TrainArgs, data_dir: &Path) -> CliResult<()> {
    let cfg = load_config(&args.run)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let name = if cfg.architecture.name.is_empty() {
            "run"
        } else {
            cfg.architecture.name.as_str()
        };
        PathBuf::from("runs").join(name)
    });
    fs::create_dir_all(&out).map_err(io_err(format!("creating {}", out.display())))?;
    write_file(&out.join("config.json"), cfg.to_json().as_bytes())?;

    let all = cfg.data.load_train(data_dir, cfg.seed)?;
    let (mut train, mut val) = split_train_val(all, cfg.seed, cfg.data.validation())?;
    let stats = NormStats::fit(&train)?;
    stats.apply(&mut train)?;
    stats.apply(&mut val)?;
    log::info!("{} training and {} validation proteins", train.len(), val.len());

    let model = Model::build(&cfg.architecture, &RngStream::new(cfg.seed).derive(0))?;
    log::info!("{}: {} parameters", cfg.architecture.name, model.param_count());
    let parameters = model.param_count();

    let log_path = out.join("log.csv");
    let ckpt_path = out.join("best.ckpt");
    let mut csv = BufWriter::new(fs::File::create(&log_path).map_err(io_err(format!("creating {}", log_path.display())))?);
    let mut save = |m: &Model, iteration: u64, q8: f64| -> ssnet::Result<()> {
        Checkpoint::new(
            m.clone(),
            CheckpointMeta {
                norm_stats: Some(stats.clone()),
                iteration,
                val_q8: Some(q8),
            },
        )
        .save(&ckpt_path)
    };
    let outcome = train_loop(
        model,
        &train,
        &val,
        &cfg.plan(),
        Sinks {
            csv: Some(&mut csv),
            on_improvement: Some(&mut save),
        },
    )?;
    csv.flush().map_err(io_err("writing log"))?;
    let summary = TrainSummary {
        architecture: &cfg.architecture.name,
        parameters,
        iterations: outcome.iterations,
        best_iteration: outcome.best_iteration,
        best_val_q8: outcome.best_val_q8,
        stopped_early: outcome.stopped_early,
        checkpoint: ckpt_path,
        log: log_path,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("summary.json"), text.as_bytes())?;
    emit(&format!("{text}\n"))?;
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, data_dir: &Path) -> CliResult<()> {
    let cfg = load_config(&args.run)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let (records, _) = split_records(&cfg, data_dir, args.split, ck.meta.norm_stats.as_ref())?;
    let report = evaluate(&ck.model, &records)?;
    let text = report.to_json();
    if let Some(p) = &args.out {
        write_file(p, text.as_bytes())?;
    }
    emit(&format!("{text}\n"))?;
    Ok(())
}

pub fn cmd_decode(args: &DecodeArgs, data_dir: &Path) -> CliResult<()> {
    let cfg = load_config(&args.run)?;
    let beam = args.beam.unwrap_or(cfg.decode.beam);
    let blend = args.blend.unwrap_or(cfg.decode.blend);
    let primary = load_checkpoint(&args.checkpoint)?;
    let partner = match (&args.cond_checkpoint, &args.pair_checkpoint) {
        (Some(p), _) | (_, Some(p)) => Some(load_checkpoint(p)?),
        _ => None,
    };
    if let Some(p) = &partner {
        if p.meta.norm_stats != primary.meta.norm_stats {
            log::warn!("partner checkpoint was trained with different feature statistics; using the primary's");
        }
    }
    let (records, _) = split_records(&cfg, data_dir, args.split, primary.meta.norm_stats.as_ref())?;
    let m = &primary.model;
    let decoded = match (&partner, m.config().conditioned) {
        (None, true) => decode_all(&records, |r| conditional_beam_search(m, r, beam))?,
        (Some(_), true) => {
            return Err(CliError::Usage(
                "the primary checkpoint must be unconditional when a partner model is given".into(),
            ))
        }
        (None, false) => decode_all(&records, |r| greedy_decode(m, r))?,
        (Some(p), false) if args.cond_checkpoint.is_some() => {
            decode_all(&records, |r| ensemble_beam_search(m, &p.model, r, beam, blend))?
        }
        (Some(p), false) => decode_all(&records, |r| ensemble_pair_uniform(m, &p.model, r))?,
    };
    let mut text = String::new();
    for (r, labels) in records.iter().zip(&decoded) {
        text.push_str(&r.id);
        text.push('\t');
        text.extend(labels.iter().map(|&l| char::from(b'0' + l)));
        text.push('\n');
    }
    match &args.out {
        Some(p) => write_file(p, text.as_bytes())?,
        None => emit(&text)?,
    }
    match decoded_report(&records, &decoded) {
        Ok(rep) => eprintln!("decoded Q8 {:.4} over {} residues", rep.q8, rep.residues),
        Err(ssnet::Error::UndefinedMetric) => {}
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let results = standard_suite(&seeds)?;
    let mut table = format!("{:<22} {:>5} {:>14} {:>10}  status\n", "op", "seed", "max_rel_error", "tolerance");
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        table += &format!("{:<22} {:>5} {:>14.3e} {:>10.0e}  {status}\n", r.name, r.seed, r.max_rel_error, r.tolerance);
    }
    emit(&table)?;
    if failed > 0 {
        return Err(CliError::GradcheckFailed(failed));
    }
    Ok(())
}

#[derive(Serialize)]
struct InspectSummary {
    path: PathBuf,
    proteins: usize,
    grid_length: usize,
    residues: usize,
    min_length: usize,
    max_length: usize,
    mean_length: f64,
    class_counts: [u64; 8],
    non_prefix_masks: usize,
}

pub fn cmd_inspect(args: &InspectArgs, data_dir: &Path) -> CliResult<()> {
    let path = resolve_existing(data_dir, &args.path);
    if !path.exists() {
        return Err(CliError::MissingFile(path));
    }
    let layout: ColumnLayout = match &args.layout {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(io_err(format!("reading {}", p.display())))?)
            .map_err(ssnet::Error::from)?,
        None => ColumnLayout::default(),
    };
    let records = load_records(&path, &layout, None)?;
    let lengths: Vec<usize> = records.iter().map(|r| r.length).collect();
    let mut class_counts = [0u64; 8];
    for r in &records {
        for (l, _) in r.labels.iter().zip(&r.mask).filter(|(_, &m)| m) {
            class_counts[usize::from(*l)] += 1;
        }
    }
    let residues: usize = lengths.iter().sum();
    let summary = InspectSummary {
        path,
        proteins: records.len(),
        grid_length: layout.grid_length,
        residues,
        min_length: lengths.iter().copied().min().unwrap_or(0),
        max_length: lengths.iter().copied().max().unwrap_or(0),
        mean_length: residues as f64 / records.len().max(1) as f64,
        class_counts,
        non_prefix_masks: records.iter().filter(|r| r.mask[..r.length].iter().any(|m| !m)).count(),
    };
    emit(&(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))
}

pub fn cmd_fetch(args: &FetchArgs, data_dir: &Path) -> CliResult<()> {
    let manifest: Manifest = match &args.manifest {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingFile(p.clone()));
            }
            serde_json::from_str(&fs::read_to_string(p).map_err(io_err(format!("reading {}", p.display())))?)
                .map_err(ssnet::Error::from)?
        }
        None => Manifest::default(),
    };
    let out = args.out.clone().unwrap_or_else(|| data_dir.to_path_buf());
    for (name, status) in fetch_all(&manifest, &out)? {
        let what = match status {
            FetchStatus::AlreadyPresent => "present, verified",
            FetchStatus::Downloaded => "downloaded, verified",
        };
        emit(&format!("{name}: {what}\n"))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let d = &cli.data_dir;
    match &cli.command {
        Command::Fetch(a) => cmd_fetch(a, d),
        Command::Inspect(a) => cmd_inspect(a, d),
        Command::Train(a) => cmd_train(a, d),
        Command::Eval(a) => cmd_eval(a, d),
        Command::Decode(a) => cmd_decode(a, d),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}
