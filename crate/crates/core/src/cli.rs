//! Command-line surface: `synth`, `train`, `probe`, `finetune`,
//! `gradcheck`, `codebook-stats`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::{Preset, RunConfig};
use crate::data::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::eval::{self, ProbeSettings, Protocol};
use crate::model::{image_constant, ModelState};
use crate::train::{self, Event, MetricsRecord};
use crate::vq;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "coboom", version, about = "Codebook-guided bootstrapping at desk scale")]
pub struct Cli {
    /// JSON file of RunConfig overrides (may name a `preset`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// desk, paper or tiny.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// Output directory (synth, train) or report file (probe, finetune, gradcheck, codebook-stats).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic PGM dataset with labels and manifest.
    Synth(SynthArgs),
    /// Pre-train and write a checkpoint plus JSONL metrics.
    Train(TrainArgs),
    /// Frozen-encoder linear probe.
    Probe(EvalArgs),
    /// Fine-tune encoder and linear head together.
    Finetune(EvalArgs),
    /// Finite-difference check of the full symmetric loss.
    Gradcheck(GradcheckArgs),
    /// Codeword usage of a checkpoint over a dataset.
    CodebookStats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory or manifest path.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub no_decoder: bool,
    #[arg(long)]
    pub no_diversifuse: bool,
    #[arg(long)]
    pub no_predictor: bool,
    /// Stop after this many optimizer steps (the schedule spans them).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = ProbeSettings::default().fraction)]
    pub fraction: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Test fixture: negate the codebook gradient through the lookup.
    #[arg(long, hide = true)]
    pub inject_sign_bug: bool,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

/// Preset (flag, then config file key, then desk), config overrides, seed.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), preset) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let base = match preset {
                Some(p) => RunConfig::preset(p),
                None => return RunConfig::from_json_file(path).and_then(|c| with_seed(c, cli.seed)),
            };
            base.merge_json(&value)?
        }
        (None, preset) => RunConfig::preset(preset.unwrap_or(Preset::Desk)),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> Result<RunConfig> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Prints `value` to stdout and, when `--out` is set, writes it there.
fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(p) = out {
        write_json(p, value)?;
    }
    Ok(())
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out <dir> is required".into()))
}

pub fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let ds = data::generate_synthetic(a.n, a.classes, a.size, cli.seed.unwrap_or(0))?;
    data::write_dataset(&ds, dir)?;
    eprintln!("wrote {} images to {}", ds.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
pub struct TrainSummaryJson {
    pub steps: usize,
    pub epochs_run: usize,
    pub final_epoch_perplexity: f64,
    pub first_total: f64,
    pub last_total: f64,
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    if a.no_decoder {
        cfg.use_decoder = false;
    }
    if a.no_diversifuse {
        cfg.use_diversifuse = false;
    }
    if a.no_predictor {
        cfg.use_predictor = false;
    }
    if let Some(s) = a.steps {
        cfg.max_steps = Some(s);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let dir = out_dir(cli)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dataset = data::load_dataset(&a.data)?;
    let mut state = ModelState::init(&cfg)?;

    let mpath = dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&mpath).map_err(|e| Error::io(&mpath, e))?);
    let every = cfg.checkpoint_every;
    let ckpt_cfg = cfg.clone();
    let result = train::train(&cfg, &dataset, &AugmentConfig::default(), &mut state, &mut |ev| match ev {
        Event::Step(rec) => {
            let line = serde_json::to_string(rec)?;
            writeln!(metrics, "{line}").map_err(|e| Error::io(&mpath, e))
        }
        Event::EpochEnd { epoch, state } => {
            if every > 0 && epoch % every == 0 {
                checkpoint::save(state, &ckpt_cfg, &dir.join(format!("checkpoint_epoch{epoch:04}.bin")))?;
            }
            Ok(())
        }
    });
    metrics.flush().map_err(|e| Error::io(&mpath, e))?;
    let summary = result?;
    checkpoint::save(&state, &cfg, &dir.join(CHECKPOINT_FILE))?;
    let totals: Vec<f64> = summary.records.iter().map(|r| r.total).collect();
    write_json(
        &dir.join(SUMMARY_FILE),
        &TrainSummaryJson {
            steps: summary.steps,
            epochs_run: summary.epochs_run,
            final_epoch_perplexity: summary.final_epoch_perplexity,
            first_total: totals.first().copied().unwrap_or(f64::NAN),
            last_total: totals.last().copied().unwrap_or(f64::NAN),
        },
    )?;
    eprintln!(
        "trained {} steps; total {:.4} -> {:.4}; final-epoch perplexity {:.3}",
        summary.steps,
        totals.first().unwrap_or(&f64::NAN),
        totals.last().unwrap_or(&f64::NAN),
        summary.final_epoch_perplexity
    );
    Ok(())
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs, protocol: Protocol) -> Result<()> {
    let (state, cfg) = checkpoint::load(&a.ckpt)?;
    let dataset = data::load_dataset(&a.data)?;
    let d = ProbeSettings::default();
    let settings = ProbeSettings {
        fraction: a.fraction,
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        seed: cli.seed.unwrap_or(0),
    };
    if !(settings.lr >= 0.0) || !settings.lr.is_finite() {
        return Err(Error::Config(format!("lr must be finite and ≥ 0, got {}", settings.lr)));
    }
    let report = eval::evaluate(&state, &cfg, &dataset, protocol, &settings)?;
    emit(cli.out.as_deref(), &report)
}

pub fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let mut cfg = if cli.config.is_some() || cli.preset.is_some() {
        resolve_config(cli)?
    } else {
        with_seed(RunConfig::preset(Preset::Tiny), cli.seed)?
    };
    cfg.inject_codebook_sign_bug = a.inject_sign_bug;
    let report = train::gradcheck(&cfg, a.eps)?;
    emit(cli.out.as_deref(), &report)?;
    if report.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        let w = report.worst_param().expect("nonempty parameter list");
        Err(Error::Numeric(format!(
            "gradient check failed: `{}`[{}] analytic {:e} vs numeric {:e} (relative error {:e})",
            w.name, w.worst_index, w.analytic, w.numeric, w.max_rel_error
        )))
    }
}

#[derive(Serialize)]
pub struct CodebookStats {
    pub k: usize,
    pub tokens: usize,
    pub used: usize,
    pub perplexity: f64,
    pub histogram: Vec<usize>,
}

/// Assignments of the target encoder's tokens over every image.
pub fn codebook_stats(state: &ModelState, dataset: &data::Dataset) -> Result<CodebookStats> {
    let cb = state.codebook()?;
    let size = state.arch.encoder.image_size;
    let mut indices = Vec::new();
    for chunk in dataset.samples.chunks(32) {
        let mut g = Graph::new();
        let phi = state.phi.bind(&mut g, false);
        for s in chunk {
            let x = image_constant(&mut g, &s.pixels, size)?;
            let y = state.arch.encoder.forward(&mut g, &phi, x)?;
            indices.extend(vq::quantize(g.value(y), &cb)?.indices);
        }
    }
    let histogram = vq::usage_histogram(&indices, cb.k())?;
    Ok(CodebookStats {
        k: cb.k(),
        tokens: indices.len(),
        used: histogram.iter().filter(|&&c| c > 0).count(),
        perplexity: vq::codebook_perplexity(&indices, cb.k())?,
        histogram,
    })
}

pub fn cmd_codebook_stats(cli: &Cli, a: &StatsArgs) -> Result<()> {
    let (state, _) = checkpoint::load(&a.ckpt)?;
    let dataset = data::load_dataset(&a.data)?;
    emit(cli.out.as_deref(), &codebook_stats(&state, &dataset)?)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Probe(a) => cmd_eval(cli, a, Protocol::Linear),
        Command::Finetune(a) => cmd_eval(cli, a, Protocol::Finetune),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::CodebookStats(a) => cmd_codebook_stats(cli, a),
    }
}

/// Parses `args`, runs, and maps the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Reads a metrics JSONL stream.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}
