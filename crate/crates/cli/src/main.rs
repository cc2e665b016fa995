use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rlgssm::arm::write_trajectory_csv;
use rlgssm::benchmarks::{run_kink_benchmark, variant_name};
use rlgssm::harness::{
    provenance, run_ab_experiment, Checkpoint, ExperimentConfig, TrackingSchedule, Trainer,
};
use rlgssm::sac::Mode;
use rlgssm::transitions::TransitionKind;

#[derive(Parser)]
#[command(
    name = "rlgssm",
    version,
    about = "Fatigue-aware arm control with a learned state-space filter"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vanilla,
    Gssm,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vanilla => Mode::Vanilla,
            ModeArg::Gssm => Mode::Gssm,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write metrics.csv, checkpoint.bin and config.resolved.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<output_dir>/<mode>_seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["mode", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Deterministic-policy RMSE of a checkpoint on its fixed test episodes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Run the tracking trial and write trajectory.csv next to the checkpoint.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV with `t,shoulder_deg,elbow_deg`; the built-in schedule if absent.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Vanilla against GSSM on seeds 0..N; writes report.csv and learning_curve.csv.
    Ab {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Defaults to `<output_dir>/ab`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gated against ensemble transition on the kink system; writes report.csv.
    BenchKink {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train(
    config: Option<PathBuf>,
    mode: Option<ModeArg>,
    seed: u64,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let trainer = match &resume {
        Some(ckpt) => Checkpoint::load(ckpt)
            .and_then(Checkpoint::into_trainer)
            .with_context(|| format!("resuming from {}", ckpt.display()))?,
        None => {
            let c = load_config(&config.context("--config is required")?)?;
            let mode = mode.map_or(c.harness.mode, Mode::from);
            Trainer::new(c, mode, seed)?
        }
    };
    let out = out.unwrap_or_else(|| {
        trainer.config.harness.output_dir.join(format!(
            "{}_seed{}",
            trainer.mode.name(),
            trainer.seed
        ))
    });
    if resume.is_some() {
        println!("resuming at episode {}", trainer.episode);
    }
    let done = trainer.run_to_end(&out)?;
    let last = done
        .trainer
        .metrics
        .iter()
        .rev()
        .find_map(|m| m.eval_rmse_deg);
    println!(
        "{} seed {}: {} episodes, final eval rmse {} deg",
        done.trainer.mode.name(),
        done.trainer.seed,
        done.trainer.episode,
        last.map_or("n/a".into(), |v| format!("{v:.2}"))
    );
    println!(
        "wrote {} and {}",
        done.metrics_path.display(),
        done.checkpoint_path.display()
    );
    Ok(())
}

fn load_trainer(ckpt: &Path) -> Result<Trainer> {
    Checkpoint::load(ckpt)
        .and_then(Checkpoint::into_trainer)
        .with_context(|| format!("loading {}", ckpt.display()))
}

fn eval(ckpt: &Path, episodes: usize) -> Result<()> {
    if episodes == 0 {
        bail!("--episodes must be positive");
    }
    let t = load_trainer(ckpt)?;
    let rmse = t.evaluate(episodes)?;
    println!(
        "{} seed {} after {} episodes: rmse {rmse:.3} deg over {episodes} test episodes",
        t.mode.name(),
        t.seed,
        t.episode
    );
    Ok(())
}

fn track(ckpt: &Path, schedule: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let t = load_trainer(ckpt)?;
    let schedule = match schedule {
        Some(p) => {
            TrackingSchedule::load(&p).with_context(|| format!("loading {}", p.display()))?
        }
        None => t.config.schedule()?,
    };
    let result = t.track(&schedule)?;
    let out = out.unwrap_or_else(|| {
        ckpt.parent()
            .unwrap_or(Path::new("."))
            .join("trajectory.csv")
    });
    let mut f =
        std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    write_trajectory_csv(&mut f, &result.rows)?;
    let segments: Vec<String> = result
        .segment_rmse_deg
        .iter()
        .map(|v| format!("{v:.2}"))
        .collect();
    println!(
        "tracking rmse {:.2} deg, segments [{}] deg, degradation {:+.2} deg",
        result.rmse_deg,
        segments.join(", "),
        result.degradation()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn ab(config: &Path, seeds: u64, out: Option<PathBuf>) -> Result<()> {
    let c = load_config(config)?;
    let out = out.unwrap_or_else(|| c.harness.output_dir.join("ab"));
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = run_ab_experiment(&c, &seeds, &out)?;
    for mode in [Mode::Vanilla, Mode::Gssm] {
        let s = report.summary(mode.name());
        println!(
            "{:<8} final rmse {:.2} +- {:.2} deg, tracking median {:.2} deg, degradation median {:+.2} deg ({} ok, {} failed)",
            mode.name(),
            s.final_mean,
            s.final_std,
            s.tracking_median,
            s.degradation_median,
            s.ok,
            s.failed
        );
    }
    println!("wrote {}", out.join("report.csv").display());
    Ok(())
}

fn bench_kink(seeds: u64, config: Option<PathBuf>, out: &Path) -> Result<()> {
    let c = match config {
        Some(p) => load_config(&p)?,
        None => ExperimentConfig::default(),
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), c.resolved()?)?;
    let report = run_kink_benchmark(&c.kink, &seeds)?;
    report.save_csv(&out.join("report.csv"))?;
    for k in [TransitionKind::Gated, TransitionKind::Ensemble] {
        let s = report.summary(k);
        println!(
            "{:<8} mean kl {:.4} +- {:.4}, median kl {:.4}, median coverage {:.3} ({} seeds)",
            variant_name(k),
            s.mean_kl,
            s.std_kl,
            s.median_kl,
            s.median_coverage,
            s.ok_seeds
        );
    }
    println!("wrote {}", out.join("report.csv").display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    log::debug!("{}", provenance());
    match cli.command {
        Command::Train {
            config,
            mode,
            seed,
            out,
            resume,
        } => train(config, mode, seed, out, resume),
        Command::Eval { ckpt, episodes } => eval(&ckpt, episodes),
        Command::Track {
            ckpt,
            schedule,
            out,
        } => track(&ckpt, schedule, out),
        Command::Ab { config, seeds, out } => ab(&config, seeds, out),
        Command::BenchKink { seeds, config, out } => bench_kink(seeds, config, &out),
    }
}
