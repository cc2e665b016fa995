//! Experiment orchestration: configuration, the interaction/update loop,
//! evaluation, the tracking trial, checkpoints and the vanilla-vs-GSSM
//! comparison.

mod ab;
mod checkpoint;
mod rollout;
mod trainer;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ab::{run_ab_arms, run_ab_experiment, AbArm, AbReport, AbRun, ArmSummary};
pub use checkpoint::{AgentState, Checkpoint, GssmState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use rollout::{
    evaluate_rmse, run_tracking_trial, AgentController, Controller, OnlineFilter, TrackingError,
    TrackingResult, TrackingSchedule,
};
pub use trainer::{run_training, RunRngs, TrainOutcome, Trainer};

use crate::arm::{ArmConfig, N_MUSCLES, OBS_DIM};
use crate::benchmarks::KinkBenchConfig;
use crate::error::{Error, Result};
use crate::gssm::{GssmConfig, GssmTrainConfig};
use crate::sac::{Mode, SacConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    /// GSSM update, relabel and evaluation happen every this many episodes.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub output_dir: PathBuf,
    /// Tracking schedule CSV; the built-in schedule when absent.
    pub schedule: Option<PathBuf>,
    pub tracking_seconds: f64,
    pub tracking_segment_seconds: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Gssm,
            seeds: (0..10).collect(),
            episodes: 100,
            eval_every: 5,
            eval_episodes: 50,
            output_dir: PathBuf::from("runs"),
            schedule: None,
            tracking_seconds: 60.0,
            tracking_segment_seconds: 20.0,
        }
    }
}

/// Everything one run needs, one TOML section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub harness: HarnessConfig,
    pub arm: ArmConfig,
    pub gssm: GssmConfig,
    pub gssm_train: GssmTrainConfig,
    pub sac: SacConfig,
    pub kink: KinkBenchConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a TOML file. A relative `harness.schedule` is taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut c = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(s), Some(dir)) = (&c.harness.schedule, path.parent()) {
            if s.is_relative() {
                c.harness.schedule = Some(dir.join(s));
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.harness;
        if h.episodes == 0 || h.eval_every == 0 || h.eval_episodes == 0 {
            return Err(Error::Config(
                "harness.episodes, eval_every and eval_episodes must be positive".into(),
            ));
        }
        if h.seeds.is_empty() {
            return Err(Error::Config("harness.seeds is empty".into()));
        }
        if !(h.tracking_segment_seconds > 0.0 && h.tracking_seconds >= h.tracking_segment_seconds) {
            return Err(Error::Config(format!(
                "tracking segment {} s does not fit a {} s trial",
                h.tracking_segment_seconds, h.tracking_seconds
            )));
        }
        self.arm.validate()?;
        self.sac.validate()?;
        let g = &self.gssm;
        if g.obs_dim != OBS_DIM || g.action_dim != N_MUSCLES {
            return Err(Error::Config(format!(
                "gssm dims must match the arm: obs {OBS_DIM}, action {N_MUSCLES} (got {}, {})",
                g.obs_dim, g.action_dim
            )));
        }
        if g.latent_dim == 0 {
            return Err(Error::Config("gssm.latent_dim must be positive".into()));
        }
        if self.gssm_train.lr <= 0.0 || self.gssm_train.kl_weight < 0.0 {
            return Err(Error::Config(
                "gssm_train needs lr > 0 and kl_weight >= 0".into(),
            ));
        }
        Ok(())
    }

    /// The configured tracking schedule, or the built-in one.
    pub fn schedule(&self) -> Result<TrackingSchedule> {
        match &self.harness.schedule {
            Some(p) => TrackingSchedule::load(p),
            None => Ok(TrackingSchedule::default()),
        }
    }

    /// Width of the RL state `[o; x̄; c]`.
    pub fn state_dim(&self) -> usize {
        OBS_DIM + self.gssm.latent_dim + 2
    }

    /// The resolved config as TOML, headed by the provenance string.
    pub fn resolved(&self) -> Result<String> {
        Ok(format!("# {}\n{}", provenance(), self.to_toml()?))
    }
}

/// Library version plus a hash over its source files.
pub fn provenance() -> String {
    format!(
        "rlgssm {} source {}",
        env!("CARGO_PKG_VERSION"),
        env!("RLGSSM_SOURCE_HASH")
    )
}

pub const METRICS_HEADER: &str =
    "seed,mode,episode,return,critic_loss,actor_loss,alpha,gssm_loss,eval_rmse_deg";

/// One training episode. Evaluation fields are filled on cadence episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub mode: Mode,
    /// Episodes completed, counting this one.
    pub episode: usize,
    pub episode_return: f64,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha: f64,
    pub gssm_loss: Option<f64>,
    pub eval_rmse_deg: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("# {}\n{METRICS_HEADER}\n", provenance());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.mode.name(),
            r.episode,
            r.episode_return,
            opt(r.critic_loss),
            opt(r.actor_loss),
            r.alpha,
            opt(r.gssm_loss),
            opt(r.eval_rmse_deg)
        );
    }
    s
}

/// Writes through a temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub const RAD_TO_DEG: f64 = 180.0 / std::f64::consts::PI;
