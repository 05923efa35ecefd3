use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pfmg::ablate::{ablate, HoldOut};
use pfmg::cmra::ScaleMode;
use pfmg::eval::{evaluate, write_predictions, MetricsReport};
use pfmg::features::synth::{synth_dataset, SynthConfig};
use pfmg::features::{Dataset, FeatureDims};
use pfmg::gradcheck::{run_all, run_suite, GradCheckConfig, SuiteResult};
use pfmg::model::{HiddenDims, ModelConfig, Motion, Supervision};
use pfmg::train::{train, Parallelism, TrainConfig};
use pfmg::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "pfmg", version, about = "Motion-guided audio-visual event localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature dataset with a planted signal.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train the four motion variants over several seeds.
    Ablate(AblateArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    videos: usize,
    #[arg(long = "T", default_value_t = 10)]
    t: usize,
    #[arg(long, default_value_t = 32)]
    da: usize,
    #[arg(long, default_value_t = 64)]
    dv: usize,
    #[arg(long, default_value_t = 3)]
    h: usize,
    #[arg(long, default_value_t = 3)]
    w: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Signal-to-noise ratio; `inf` disables noise.
    #[arg(long, default_value_t = 3.0)]
    snr: f64,
    /// Chance that a non-event segment carries a distractor.
    #[arg(long, default_value_t = 0.5)]
    distractor_prob: f64,
    /// Fraction of background-only videos.
    #[arg(long, default_value_t = 0.0)]
    negative_fraction: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Supervised,
    Weak,
}

#[derive(Clone, Copy, ValueEnum)]
enum MotionArg {
    Pfme,
    FutureOnly,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Sqrt,
    Linear,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "supervised")]
    mode: ModeArg,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Audio-guided attention width.
    #[arg(long, default_value_t = 64)]
    d_h: usize,
    /// Relation-aware attention width.
    #[arg(long, default_value_t = 64)]
    d_m: usize,
    /// Run each batch element on the thread pool.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "pfme")]
    motion: MotionArg,
    #[arg(long, value_enum, default_value = "on")]
    temporal_attention: Switch,
    #[arg(long, value_enum, default_value = "sqrt")]
    scale_mode: ScaleArg,
    /// Also save a checkpoint every N epochs under `OUT/epoch-NNNN`.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop early once training accuracy reaches this value.
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of tensor, pfme, mgaa, agva, cmra, interaction, losses, model.
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 10)]
    points: usize,
}

fn model_config(dims: FeatureDims, args: &ModelArgs) -> ModelConfig {
    let mut c = ModelConfig::new(dims);
    c.hidden = HiddenDims { d_h: args.d_h, d_m: args.d_m };
    c.mode = match args.mode {
        ModeArg::Supervised => Supervision::Supervised,
        ModeArg::Weak => Supervision::Weak,
    };
    c
}

fn train_config(model: ModelConfig, args: &ModelArgs, epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(model);
    c.epochs = epochs;
    c.batch_size = args.batch;
    c.learning_rate = args.lr;
    c.seed = seed;
    if args.parallel {
        c.parallelism = Parallelism::DataParallel;
    }
    c
}

fn predictions_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    report.with_file_name(format!("{stem}.predictions.jsonl"))
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        seed: a.seed,
        videos: a.videos,
        dims: FeatureDims {
            t: a.t,
            d_a: a.da,
            d_v: a.dv,
            h: a.h,
            w: a.w,
            classes: a.classes,
        },
        snr: a.snr,
        distractor_prob: a.distractor_prob,
        negative_fraction: a.negative_fraction,
    };
    let (manifest, path) = synth_dataset(&config, &a.out)?;
    println!("wrote {} videos to {}", manifest.entries.len(), path.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&a.manifest)?;
    let mut model = model_config(dataset.dims(), &a.model);
    model.motion = match a.motion {
        MotionArg::Pfme => Motion::Pfme,
        MotionArg::FutureOnly => Motion::FutureOnly,
        MotionArg::Off => Motion::Off,
    };
    model.temporal_attention = matches!(a.temporal_attention, Switch::On);
    model.scale_mode = match a.scale_mode {
        ScaleArg::Sqrt => ScaleMode::InvSqrtDm,
        ScaleArg::Linear => ScaleMode::InvDm,
    };
    let mut config = train_config(model, &a.model, a.epochs, a.seed);
    config.checkpoint_every = a.checkpoint_every;
    config.target_accuracy = a.target_accuracy;
    let outcome = train(&config, &dataset, Some(&a.out))?;
    checkpoint::save(&a.out, &outcome.params, &model, Some(outcome.report.epochs_run))?;
    let report_path = a.out.join("metrics.json");
    outcome.report.write(&report_path)?;
    println!(
        "epochs {} final loss {:.6} training accuracy {:.4} ({:.1}s); checkpoint in {}",
        outcome.report.epochs_run,
        outcome.report.loss_curve.last().copied().unwrap_or(f64::NAN),
        outcome.report.accuracy,
        outcome.report.wall_time_secs,
        a.out.display()
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (params, config) = checkpoint::load(&a.checkpoint)?;
    let dataset = Dataset::load(&a.manifest)?;
    let eval = evaluate(&params, &config, &dataset)?;
    let report = MetricsReport::from_evaluation(&eval, config, started.elapsed().as_secs_f64());
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    report.write(&a.report)?;
    write_predictions(&predictions_path(&a.report), &eval.predictions)?;
    println!(
        "segment accuracy {:.4} ({} / {} segments)",
        report.accuracy, report.correct, report.segments
    );
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let dataset = Dataset::load(&a.manifest)?;
    let model = model_config(dataset.dims(), &a.model);
    let base = train_config(model, &a.model, a.epochs, 0);
    let table = ablate(&base, &dataset, &a.seeds, HoldOut::default())?;
    table.write(&a.out)?;
    println!("{:<12} {:>8} {:>8}", "variant", "mean", "sd");
    for row in &table.rows {
        println!("{:<12} {:>8.4} {:>8.4}", row.variant, row.mean, row.sd);
    }
    Ok(())
}

fn print_suite(s: &SuiteResult) {
    for c in &s.cases {
        println!(
            "{} {}/{}: max rel error {:.2e} over {} coordinates{}",
            if c.passed { "ok  " } else { "FAIL" },
            s.suite,
            c.name,
            c.max_rel_error,
            c.coordinates,
            if c.passed { String::new() } else { format!(" ({})", c.worst) }
        );
    }
}

fn run_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let config = GradCheckConfig {
        points: a.points,
        ..GradCheckConfig::default()
    };
    let suites = match &a.module {
        Some(m) => vec![run_suite(m, &config)?],
        None => run_all(&config)?,
    };
    suites.iter().for_each(print_suite);
    let passed = suites.iter().all(SuiteResult::passed);
    println!("{}", if passed { "all gradient checks passed" } else { "gradient checks FAILED" });
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Ablate(a) => run_ablate(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
