use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rollout::{
    evaluate_rmse, run_tracking_trial, AgentController, OnlineFilter, TrackingResult,
    TrackingSchedule,
};
use super::{metrics_csv, write_atomic, Checkpoint, ExperimentConfig, MetricsRow};
use crate::arm::{ArmEnv, N_MUSCLES};
use crate::error::{Error, Result};
use crate::gssm::{train_gssm, Gssm};
use crate::nn::Tensor;
use crate::sac::{
    build_rl_state, relabel_experience, Episode, ExperienceTuple, Mode, ReplayBuffer, ReplayTuple,
    SacAgent, TrajectoryBuffer,
};

// Stream salts, so each consumer of randomness has its own generator and the
// environment stream is shared by both modes of the same seed.
const ENV_SALT: u64 = 0x0e17;
const AGENT_INIT_SALT: u64 = 0xa6e7_0001;
const AGENT_SALT: u64 = 0xa6e7_0002;
const GSSM_INIT_SALT: u64 = 0x6553_0001;
const GSSM_SALT: u64 = 0x6553_0002;
const NOISE_SALT: u64 = 0x7015e;
const EVAL_SALT: u64 = 0xe7a1;

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

/// Seed of the fixed evaluation episodes of a run.
pub(crate) fn eval_seed(seed: u64) -> u64 {
    stream(seed, EVAL_SALT).gen()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRngs {
    pub env: ChaCha8Rng,
    pub agent: ChaCha8Rng,
    pub gssm: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

/// Complete state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub mode: Mode,
    pub seed: u64,
    pub agent: SacAgent,
    /// Never constructed in vanilla mode.
    pub gssm: Option<Gssm>,
    pub trajectories: TrajectoryBuffer,
    pub replay: ReplayBuffer,
    pub rngs: RunRngs,
    /// Training episodes completed.
    pub episode: usize,
    pub metrics: Vec<MetricsRow>,
    /// Number of GSSM training calls so far.
    pub gssm_calls: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate()?;
        let agent = SacAgent::new(
            config.sac.clone(),
            config.state_dim(),
            N_MUSCLES,
            &mut stream(seed, AGENT_INIT_SALT),
        )?;
        let gssm = match mode {
            Mode::Gssm => Some(Gssm::new(
                config.gssm.clone(),
                &mut stream(seed, GSSM_INIT_SALT),
            )?),
            Mode::Vanilla => None,
        };
        Ok(Self {
            trajectories: TrajectoryBuffer::new(config.sac.trajectory_capacity),
            replay: ReplayBuffer::new(config.sac.replay_capacity),
            rngs: RunRngs {
                env: stream(seed, ENV_SALT),
                agent: stream(seed, AGENT_SALT),
                gssm: stream(seed, GSSM_SALT),
                noise: stream(seed, NOISE_SALT),
            },
            config,
            mode,
            seed,
            agent,
            gssm,
            episode: 0,
            metrics: Vec::new(),
            gssm_calls: 0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.gssm.latent_dim
    }

    pub fn is_done(&self) -> bool {
        self.episode >= self.config.harness.episodes
    }

    /// Runs one interaction episode (with SAC updates once past the start
    /// episode) and, on cadence, the GSSM update, relabel and evaluation.
    pub fn run_episode(&mut self) -> Result<MetricsRow> {
        let Trainer {
            config,
            mode,
            agent,
            gssm,
            trajectories,
            replay,
            rngs,
            ..
        } = self;
        let mode = *mode;
        let ld = config.gssm.latent_dim;
        let mut env = ArmEnv::new(config.arm.clone())?;
        let mut obs = env.reset(&mut rngs.env);
        let noise_seed: u64 = rngs.noise.gen();
        let mut filter = gssm.as_ref().map(|g| OnlineFilter::new(g, &[noise_seed]));
        let observe = |filter: &mut Option<OnlineFilter>, o| -> Result<Option<Vec<f64>>> {
            match (filter, gssm.as_ref()) {
                (Some(f), Some(g)) => Ok(Some(f.observe(g, &[o])?.remove(0))),
                _ => Ok(None),
            }
        };
        let mut latent = observe(&mut filter, obs)?;
        let learn = self.episode >= config.sac.start_episode;
        let mut steps = Vec::with_capacity(config.arm.episode_steps);
        let (mut ret, mut critic, mut actor, mut updates) = (0.0, 0.0, 0.0, 0usize);
        loop {
            let target = env.target;
            let s = build_rl_state(mode, &obs, latent.as_deref(), &target, ld)?;
            let (a, _) = agent.sample(&Tensor::row(&s), &mut rngs.agent)?;
            let action: [f64; N_MUSCLES] = std::array::from_fn(|m| a.get(0, m));
            if let Some(f) = &mut filter {
                f.record_actions(&[action]);
            }
            let tr = env.step(&action, &mut rngs.env)?;
            let next_latent = observe(&mut filter, tr.observation)?;
            let next_target = env.target;
            replay.push(ReplayTuple {
                state: s,
                action: action.to_vec(),
                reward: tr.reward,
                next_state: build_rl_state(
                    mode,
                    &tr.observation,
                    next_latent.as_deref(),
                    &next_target,
                    ld,
                )?,
                terminal: false,
            });
            steps.push(ExperienceTuple {
                observation: obs.to_vec(),
                target: target.to_vec(),
                action: action.to_vec(),
                reward: tr.reward,
                next_observation: tr.observation.to_vec(),
                next_target: next_target.to_vec(),
                done: tr.done,
                terminal: false,
            });
            ret += tr.reward;
            if learn {
                for _ in 0..config.sac.updates_per_step {
                    let batch = replay.sample(config.sac.batch_size, &mut rngs.agent)?;
                    let st = agent.update(&batch, &mut rngs.agent)?;
                    critic += st.critic_loss;
                    actor += st.actor_loss;
                    updates += 1;
                }
            }
            obs = tr.observation;
            latent = next_latent;
            if tr.done {
                break;
            }
        }
        trajectories.push(Episode { steps, noise_seed });
        self.episode += 1;
        let per_update = |v: f64| (updates > 0).then(|| v / updates as f64);
        let mut row = MetricsRow {
            seed: self.seed,
            mode,
            episode: self.episode,
            episode_return: ret,
            critic_loss: per_update(critic),
            actor_loss: per_update(actor),
            alpha: self.agent.alpha(),
            gssm_loss: None,
            eval_rmse_deg: None,
        };
        if self.episode.is_multiple_of(self.config.harness.eval_every) {
            row.gssm_loss = self.update_phase()?;
            row.eval_rmse_deg = Some(self.evaluate(self.config.harness.eval_episodes)?);
        }
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// GSSM training (gssm mode only) followed by a full relabel. Returns the
    /// mean GSSM loss of the update.
    fn update_phase(&mut self) -> Result<Option<f64>> {
        let mut loss = None;
        if let Some(g) = &mut self.gssm {
            self.gssm_calls += 1;
            let seqs = self.trajectories.sequences();
            if !seqs.is_empty() {
                let hist = train_gssm(g, &seqs, &self.config.gssm_train, &mut self.rngs.gssm)?;
                if !hist.is_empty() {
                    loss = Some(hist.iter().sum::<f64>() / hist.len() as f64);
                }
            }
        }
        self.replay = relabel_experience(
            &self.trajectories,
            self.mode,
            self.gssm.as_ref(),
            self.latent_dim(),
            self.config.sac.replay_capacity,
        )?;
        Ok(loss)
    }

    /// Deterministic-policy RMSE (degrees) on the run's fixed test episodes.
    pub fn evaluate(&self, episodes: usize) -> Result<f64> {
        let mut ctl = AgentController::new(&self.agent, self.mode, self.gssm.as_ref())?;
        evaluate_rmse(&mut ctl, &self.config.arm, episodes, eval_seed(self.seed))
    }

    /// The tracking trial with the configured duration and segment length.
    pub fn track(&self, schedule: &TrackingSchedule) -> Result<TrackingResult> {
        let h = &self.config.harness;
        run_tracking_trial(
            &mut self.controller()?,
            &self.config.arm,
            schedule,
            h.tracking_seconds,
            h.tracking_segment_seconds,
            eval_seed(self.seed),
        )
    }

    pub fn controller(&self) -> Result<AgentController<'_>> {
        AgentController::new(&self.agent, self.mode, self.gssm.as_ref())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    /// Trains until the configured episode count, writing `metrics.csv` and
    /// `checkpoint.bin` into `out` at every evaluation and at the end. On a
    /// failure the state is saved to `checkpoint.abort.bin` before the error
    /// is returned.
    pub fn run_to_end(mut self, out: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out)?;
        write_atomic(
            &out.join("config.resolved"),
            self.config.resolved()?.as_bytes(),
        )?;
        let metrics_path = out.join("metrics.csv");
        let checkpoint_path = out.join("checkpoint.bin");
        while !self.is_done() {
            let ep = self.episode;
            match self.run_episode() {
                Ok(row) => {
                    if row.eval_rmse_deg.is_some() {
                        log::info!(
                            "seed {} {} episode {}: eval rmse {:.2} deg",
                            self.seed,
                            self.mode.name(),
                            row.episode,
                            row.eval_rmse_deg.unwrap_or(f64::NAN)
                        );
                        write_atomic(&metrics_path, self.metrics_csv().as_bytes())?;
                        self.checkpoint().save(&checkpoint_path)?;
                    }
                }
                Err(e) => {
                    let abort = out.join("checkpoint.abort.bin");
                    let saved = self.checkpoint().save(&abort);
                    write_atomic(&metrics_path, self.metrics_csv().as_bytes())?;
                    return Err(Error::Training(format!(
                        "seed {} {} failed in episode {}: {e}; state saved to {} ({})",
                        self.seed,
                        self.mode.name(),
                        ep + 1,
                        abort.display(),
                        if saved.is_ok() { "ok" } else { "save failed" }
                    )));
                }
            }
        }
        write_atomic(&metrics_path, self.metrics_csv().as_bytes())?;
        self.checkpoint().save(&checkpoint_path)?;
        Ok(TrainOutcome {
            trainer: self,
            metrics_path,
            checkpoint_path,
        })
    }
}

/// Fresh run of `mode` with `seed`, outputs under `out`.
pub fn run_training(
    config: &ExperimentConfig,
    mode: Mode,
    seed: u64,
    out: &Path,
) -> Result<TrainOutcome> {
    Trainer::new(config.clone(), mode, seed)?.run_to_end(out)
}
