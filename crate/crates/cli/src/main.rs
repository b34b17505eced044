//! `cdnet`: train, evaluate, synthesise data, audit published metrics and
//! plot validation curves.
//!
//! Exit status is 0 on success, 1 for usage and configuration errors and 2
//! for failures while running (including a non-finite training loss).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdnet::audit;
use cdnet::curves;
use cdnet::data::{generate_dataset, load_manifest, Split, SynthConfig};
use cdnet::interaction::FusionCore;
use cdnet::train::{
    evaluate_model, load_model, load_model_as, train_with, write_per_image_csv, RunConfig,
    TrainOptions, DETERMINISTIC_ENV,
};

#[derive(Parser)]
#[command(name = "cdnet", version, about = "Bi-temporal change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.toml, history.csv, last.ckpt and best.ckpt.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write a synthetic dataset in the standard A/B/label layout.
    Synth(SynthArgs),
    /// Check reported F1 against reported IoU for a table of results.
    Audit(AuditArgs),
    /// Merge history files into a long CSV and an SVG chart of val IoU.
    Curves(CurvesArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML); defaults are used for missing keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    freeze_encoder_epochs: Option<usize>,
    #[arg(long)]
    fusion_core: Option<FusionCore>,
    #[arg(long)]
    lambda_set: Option<f64>,
    #[arg(long)]
    lambda_pixel: Option<f64>,
    /// Dataset root (replaces any synthetic data section).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint written by this configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Build the model from this configuration instead of the one stored in
    /// the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Score the ground truth against itself (pipeline check).
    #[arg(long)]
    oracle: bool,
    /// Also write per-image counts and scores.
    #[arg(long)]
    per_image: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator settings (TOML); flags below override it.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    #[arg(long, default_value_t = 16)]
    n_val: usize,
    #[arg(long, default_value_t = 16)]
    n_test: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_offset_px: Option<f64>,
    #[arg(long)]
    brightness_jitter: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Args)]
struct AuditArgs {
    /// Table with columns method,dataset,f1,iou,oa,decimals. Without it the
    /// bundled M-CD table is audited.
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// One or more history.csv files.
    #[arg(required = true)]
    history: Vec<PathBuf>,
    /// Output stem; `.csv` and `.svg` are written next to it.
    #[arg(short, long)]
    out: PathBuf,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    cdnet::Error::Config(msg.into()).into()
}

/// An unreadable configuration file is a usage error like an invalid one.
fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        cdnet::Error::Io { .. } => usage(e.to_string()),
        other => other.into(),
    })
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let o = &mut cfg.optim;
    o.seed = a.seed.unwrap_or(o.seed);
    o.epochs = a.epochs.unwrap_or(o.epochs);
    o.base_lr = a.base_lr.unwrap_or(o.base_lr);
    o.batch_size = a.batch_size.unwrap_or(o.batch_size);
    o.freeze_encoder_epochs = a.freeze_encoder_epochs.unwrap_or(o.freeze_encoder_epochs);
    if a.max_steps.is_some() {
        o.max_steps = a.max_steps;
    }
    if let Some(f) = a.fusion_core {
        cfg.model.interaction.fusion_core = f;
    }
    cfg.loss.lambda_set = a.lambda_set.unwrap_or(cfg.loss.lambda_set);
    cfg.loss.lambda_pixel = a.lambda_pixel.unwrap_or(cfg.loss.lambda_pixel);
    if let Some(root) = a.data {
        cfg.data.root = Some(root);
        cfg.data.synth = None;
    }
    if let Some(out) = a.out_dir {
        cfg.io.out_dir = out;
    }
    cfg.validate()?;
    if a.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    log::info!(
        "seed {} ({}={})",
        cfg.optim.seed,
        DETERMINISTIC_ENV,
        std::env::var(DETERMINISTIC_ENV).unwrap_or_default()
    );
    let out = train_with(
        &cfg,
        &TrainOptions {
            resume_from: a.resume,
            stop_after_epoch: a.stop_after,
            write: true,
        },
    )?;
    if let Some(last) = out.history.last() {
        println!(
            "seed {}  epochs {}  steps {}  val F1 {:.4}  IoU {:.4}  OA {:.3}  best IoU {:.4}",
            cfg.optim.seed,
            last.epoch,
            out.steps,
            last.val_f1,
            last.val_iou,
            100.0 * last.val_oa,
            out.best_val_iou
        );
    }
    println!("run files in {}", cfg.io.out_dir.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = match &a.config {
        Some(p) => load_model_as(&a.checkpoint, &load_config(p)?.model)?,
        None => load_model(&a.checkpoint)?.1,
    };
    let manifest = load_manifest(&a.data, a.split)?;
    let outcome = evaluate_model(&model, &manifest, a.oracle)?;
    println!("{} ({} images)", outcome.report, outcome.per_image.len());
    if let Some(p) = &a.per_image {
        write_per_image_csv(p, &outcome)?;
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            toml::from_str::<SynthConfig>(&text)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.max_offset_px = a.max_offset_px.unwrap_or(cfg.max_offset_px);
    cfg.brightness_jitter = a.brightness_jitter.unwrap_or(cfg.brightness_jitter);
    cfg.noise_sigma = a.noise_sigma.unwrap_or(cfg.noise_sigma);
    cfg.validate()?;
    let mut next = cfg.seed;
    for (split, n) in [
        (Split::Train, a.n_train),
        (Split::Val, a.n_val),
        (Split::Test, a.n_test),
    ] {
        if n == 0 {
            continue;
        }
        generate_dataset(&cfg.with_seed(next), n, &a.out, split)?;
        println!("{split}: {n} pairs (seeds {next}..{})", next + n as u64);
        next += n as u64;
    }
    Ok(())
}

fn run_audit(a: AuditArgs) -> anyhow::Result<()> {
    let rows = match &a.csv {
        Some(p) => audit::read_table(p)?,
        None => audit::bundled_table(),
    };
    print!("{}", audit::render_table(&audit::audit_rows(&rows)?));
    Ok(())
}

fn run_curves(a: CurvesArgs) -> anyhow::Result<()> {
    let (csv, svg) = curves::emit(&a.history, Path::new(&a.out))?;
    println!("{}\n{}", csv.display(), svg.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<cdnet::Error>() {
        Some(e) if e.is_usage() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
        Command::Audit(a) => run_audit(a),
        Command::Curves(a) => run_curves(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
