//! Command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memmlp::data::{MotionKind, DEFAULT_FPS};
use memmlp::model::MemMlp;
use memmlp::pipeline::{self, RunConfig};
use memmlp::Error;

#[derive(Parser, Debug)]
#[command(name = "memmlp", version, about = "Full-body motion from head and hand tracking")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic motion clips.
    Synth(SynthArgs),
    /// Train the motion prior.
    TrainPrior(TrainPriorArgs),
    /// Train the network against a frozen prior.
    Train(TrainArgs),
    /// Evaluate a model on clips and print metrics.
    Eval(EvalArgs),
    /// Stream a clip's tracking signals through a model.
    Infer(InferArgs),
    /// Measure per-frame streaming latency.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "walk")]
    kind: MotionKind,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    fps: f64,
    /// Write the binary clip format instead of JSON.
    #[arg(long)]
    binary: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainPriorArgs {
    /// Clip file or directory of clips.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Prior checkpoint; required when the model has memory blocks.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct IkArgs {
    /// Refine rotations toward the predicted positions.
    #[arg(long)]
    ik: bool,
    /// Iteration cap of the refinement.
    #[arg(long)]
    ik_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    ik: IkArgs,
    /// Print JSON instead of key=value lines.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Clip whose tracked joints drive the model.
    #[arg(long)]
    input: PathBuf,
    /// Predicted clip; binary when the extension is `.mclp`.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    ik: IkArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    frames: usize,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    /// Only single-threaded timing is supported.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    json: bool,
}

/// Exit code for each failure class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Parse { .. } => 4,
        Error::Config(_) | Error::Contract(_) => 5,
        Error::Shape(_) | Error::Range(_) => 6,
        Error::Checkpoint(_) | Error::Frozen(_) => 7,
        Error::NonFinite(_) | Error::DegenerateRotation(_) | Error::Optimizer(_) => 8,
        Error::InvalidInput(_) => 9,
    }
}

fn load_config(cli: &Cli) -> memmlp::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                msg: e.message().to_string(),
            })?
        }
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    Ok(cfg.resolved())
}

fn threads_from_env() -> memmlp::Result<usize> {
    match std::env::var("MEMMLP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("MEMMLP_THREADS must be a positive integer, got {v:?}"))),
    }
}

fn ik_config(cfg: &RunConfig, args: &IkArgs) -> Option<memmlp::ik::LbfgsConfig> {
    args.ik.then(|| {
        let mut ik = cfg.ik;
        if let Some(n) = args.ik_iters {
            ik.max_iters = n;
        }
        ik
    })
}

fn load_model(model: &Path, prior: Option<&Path>) -> memmlp::Result<(MemMlp<f32>, Option<memmlp::prior::VqVae<f32>>)> {
    let m = MemMlp::<f32>::load(model)?;
    let p = pipeline::load_prior(prior, &m.cfg)?;
    Ok((m, p))
}

fn run(cli: Cli) -> memmlp::Result<()> {
    let mut cfg = load_config(&cli)?;
    let threads = match &cli.command {
        Command::Bench(b) => {
            if b.threads != 1 {
                return Err(Error::Config("bench runs single-threaded; use --threads 1".into()));
            }
            1
        }
        _ => threads_from_env()?,
    };
    pipeline::configure_threads(threads)?;
    let seed = cfg.seed.unwrap_or(0);
    match cli.command {
        Command::Synth(a) => {
            let skel = cfg.skeleton()?;
            let paths = pipeline::synth(a.kind, seed, a.count, a.duration, a.fps, a.binary, &a.out, &skel)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::TrainPrior(a) => {
            if let Some(e) = a.epochs {
                cfg.prior_train.epochs = e;
            }
            if let Some(b) = a.batch {
                cfg.prior_train.batch = b;
            }
            cfg.prior.validate()?;
            let clips = pipeline::load_clips(&a.data)?;
            let (_, log) = pipeline::train_prior(&clips, &cfg, &a.out)?;
            let used = log.usage.iter().filter(|&&n| n > 0).count();
            println!(
                "final_loss={:.6}\ncodes_used={used}/{}",
                log.epoch_losses.last().copied().unwrap_or(f64::NAN),
                log.usage.len()
            );
        }
        Command::Train(a) => {
            if let Some(s) = a.steps {
                cfg.train.schedule.total = s;
                cfg.train.schedule.drop_at = cfg.train.schedule.drop_at.min(s * 3 / 4);
            }
            if let Some(b) = a.batch {
                cfg.train.batch = b;
            }
            if let Some(lr) = a.lr {
                cfg.train.schedule.lr0 = lr;
            }
            cfg.model.validate()?;
            cfg.train.validate()?;
            let prior = pipeline::load_prior(a.prior.as_deref(), &cfg.model)?;
            let clips = pipeline::load_clips(&a.data)?;
            let (_, log) = pipeline::train(&clips, prior.as_ref(), &cfg, &a.out)?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!(
                    "initial_loss={:.6}\nfinal_loss={:.6}\nsteps={}",
                    first.total,
                    last.total,
                    log.len()
                );
            }
        }
        Command::Eval(a) => {
            let (model, prior) = load_model(&a.model, a.prior.as_deref())?;
            let skel = cfg.skeleton()?;
            let clips = pipeline::load_clips(&a.data)?;
            let ik = ik_config(&cfg, &a.ik);
            let report = pipeline::eval(&model, prior.as_ref(), &clips, &skel, ik.as_ref())?;
            if a.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Infer(a) => {
            let (model, prior) = load_model(&a.model, a.prior.as_deref())?;
            let skel = cfg.skeleton()?;
            let clip = memmlp::data::MotionClip::load(&a.input)?;
            let ik = ik_config(&cfg, &a.ik);
            let out = pipeline::infer(&model, prior.as_ref(), &clip, &skel, ik.as_ref())?;
            out.save(&a.output)?;
            println!("{}", a.output.display());
        }
        Command::Bench(a) => {
            let (model, prior) = load_model(&a.model, a.prior.as_deref())?;
            let skel = cfg.skeleton()?;
            let report = pipeline::bench(&model, prior.as_ref(), &skel, a.frames, a.warmup, seed)?;
            if a.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
