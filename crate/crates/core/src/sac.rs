//! Soft actor-critic with sigmoid-squashed actions, plus the replay and
//! trajectory buffers and the relabeling step that rebuilds replay from raw
//! episodes with fresh latents.
//!
//! Actions leaving the agent are clamped to `[1e-6, 1 − 1e-6]` so they stay
//! inside the open unit interval even when the sigmoid saturates.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gssm::{Gssm, ObsActionSeq};
use crate::nn::{Activation, Adam, AdamConfig, Gradients, Graph, Mlp, ParameterSet, Tensor, Var};

/// Clamp applied to actions before the sigmoid log-Jacobian.
pub const ACTION_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Gssm,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Gssm => "gssm",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "gssm" => Ok(Mode::Gssm),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected vanilla or gssm)"
            ))),
        }
    }
}

/// `[o; x̄; c]`. In vanilla mode `x̄` must be `None` and a zero slot of
/// `latent_dim` is inserted, so both modes share one network shape.
pub fn build_rl_state(
    mode: Mode,
    o: &[f64],
    latent: Option<&[f64]>,
    target: &[f64],
    latent_dim: usize,
) -> Result<Vec<f64>> {
    let mut s = Vec::with_capacity(o.len() + latent_dim + target.len());
    s.extend_from_slice(o);
    match (mode, latent) {
        (Mode::Gssm, Some(x)) if x.len() == latent_dim => s.extend_from_slice(x),
        (Mode::Gssm, Some(x)) => return Err(Error::dim("rl state latent", latent_dim, x.len())),
        (Mode::Gssm, None) => return Err(Error::Contract("gssm mode needs a latent mean".into())),
        (Mode::Vanilla, None) => s.resize(o.len() + latent_dim, 0.0),
        (Mode::Vanilla, Some(_)) => {
            return Err(Error::Contract("vanilla mode takes no latent".into()))
        }
    }
    s.extend_from_slice(target);
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite rl state".into()));
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub init_alpha: f64,
    /// Learn α toward `target_entropy`; otherwise α stays at `init_alpha`.
    pub auto_alpha: bool,
    /// Defaults to `−action_dim`.
    pub target_entropy: Option<f64>,
    pub log_std_bounds: [f64; 2],
    pub replay_capacity: usize,
    pub trajectory_capacity: usize,
    pub updates_per_step: usize,
    /// First (0-based) training episode in which gradient updates run.
    pub start_episode: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            gamma: 0.99,
            lr: 3e-4,
            tau: 0.005,
            batch_size: 256,
            init_alpha: 1.0,
            auto_alpha: true,
            target_entropy: None,
            log_std_bounds: [-20.0, 2.0],
            replay_capacity: 100_000,
            trajectory_capacity: 500,
            updates_per_step: 1,
            start_episode: 1,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "sac.gamma must be in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "sac.tau must be in (0, 1], got {}",
                self.tau
            )));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.trajectory_capacity == 0 {
            return Err(Error::Config(
                "sac batch and buffer sizes must be > 0".into(),
            ));
        }
        if !(self.init_alpha > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config(
                "sac.init_alpha and sac.lr must be > 0".into(),
            ));
        }
        if self.log_std_bounds[0] >= self.log_std_bounds[1] {
            return Err(Error::Config(format!(
                "sac.log_std_bounds must be ordered, got {:?}",
                self.log_std_bounds
            )));
        }
        Ok(())
    }
}

/// A training minibatch. `terminals` holds 1 where bootstrapping stops.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub terminals: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacAgent {
    pub config: SacConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub target_q1: Mlp,
    pub target_q2: Mlp,
    pub params: ParameterSet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub alpha_opt: Adam,
    pub updates: u64,
}

pub const LOG_ALPHA: &str = "log_alpha";

impl SacAgent {
    pub fn new(
        config: SacConfig,
        state_dim: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        use Activation::*;
        let h = &config.hidden;
        let actor = Mlp::uniform("actor", state_dim, h, 2 * action_dim, Relu, Identity);
        let critic = |p: &str| Mlp::uniform(p, state_dim + action_dim, h, 1, Relu, Identity);
        let (q1, q2, target_q1, target_q2) = (
            critic("q1"),
            critic("q2"),
            critic("target_q1"),
            critic("target_q2"),
        );
        let mut params = ParameterSet::new();
        actor.init(&mut params, rng, true);
        q1.init(&mut params, rng, true);
        q2.init(&mut params, rng, true);
        target_q1.init(&mut params, rng, false);
        target_q2.init(&mut params, rng, false);
        params.insert(LOG_ALPHA, Tensor::scalar(config.init_alpha.ln()), true);
        let adam = AdamConfig::with_lr(config.lr);
        let mut agent = Self {
            config,
            state_dim,
            action_dim,
            actor,
            q1,
            q2,
            target_q1,
            target_q2,
            params,
            actor_opt: Adam::new(adam),
            critic_opt: Adam::new(adam),
            alpha_opt: Adam::new(adam),
            updates: 0,
        };
        agent.soft_update(1.0);
        Ok(agent)
    }

    pub fn alpha(&self) -> f64 {
        self.params
            .get(LOG_ALPHA)
            .expect("log_alpha exists")
            .item()
            .exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.config
            .target_entropy
            .unwrap_or(-(self.action_dim as f64))
    }

    /// Pre-squash mean and clamped log-std.
    pub fn policy_on(&self, g: &mut Graph, params: &ParameterSet, s: Var) -> Result<(Var, Var)> {
        let out = self.actor.forward(g, params, s)?;
        let a = self.action_dim;
        let mean = g.slice_cols(out, 0, a);
        let raw = g.slice_cols(out, a, 2 * a);
        let [lo, hi] = self.config.log_std_bounds;
        let floored = g.clamp_min(raw, lo);
        let flipped = g.neg(floored);
        let capped = g.clamp_min(flipped, -hi);
        Ok((mean, g.neg(capped)))
    }

    /// Reparameterised sample `a = sigmoid(μ + σ·eps)` and its log-density
    /// per row (`B x 1`), including the sigmoid change of variables.
    pub fn sample_on(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        s: Var,
        eps: &Tensor,
    ) -> Result<(Var, Var)> {
        let (mean, log_std) = self.policy_on(g, params, s)?;
        if eps.shape() != g.shape(mean) {
            return Err(Error::dim(
                "policy noise",
                format!("{:?}", g.shape(mean)),
                format!("{:?}", eps.shape()),
            ));
        }
        let std = g.exp(log_std);
        let e = g.constant(eps.clone());
        let scaled = g.mul(std, e);
        let u = g.add(mean, scaled);
        let a = g.sigmoid(u);
        // log N(u; μ, σ) = −ε²/2 − ln σ − ln(2π)/2 with ε held fixed
        let base = g.constant(eps.map(|v| -0.5 * v * v - 0.5 * LN_2PI));
        let gauss = g.sub(base, log_std);
        let a_lo = g.clamp_min(a, ACTION_EPS);
        let ln_a = g.ln(a_lo);
        let na = g.neg(a);
        let one_minus = g.add_scalar(na, 1.0);
        let b_lo = g.clamp_min(one_minus, ACTION_EPS);
        let ln_b = g.ln(b_lo);
        let t = g.sub(gauss, ln_a);
        let t = g.sub(t, ln_b);
        Ok((a, g.sum_cols(t)))
    }

    pub fn draw_eps(&self, rows: usize, rng: &mut impl Rng) -> Tensor {
        let n = rows * self.action_dim;
        Tensor::new(
            rows,
            self.action_dim,
            (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        )
    }

    /// Stochastic actions and log-probabilities for each row of `states`.
    pub fn sample(&self, states: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, Vec<f64>)> {
        let eps = self.draw_eps(states.rows(), rng);
        self.sample_with(states, &eps)
    }

    pub fn sample_with(&self, states: &Tensor, eps: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let s = g.constant(states.clone());
        let (a, lp) = self.sample_on(&mut g, &self.params, s, eps)?;
        let a = g.value(a).map(|v| v.clamp(ACTION_EPS, 1.0 - ACTION_EPS));
        Ok((a, g.value(lp).data().to_vec()))
    }

    /// Exploration-free action `sigmoid(μ(s))`.
    pub fn act_deterministic(&self, states: &Tensor) -> Result<Tensor> {
        let out = self.actor.eval(&self.params, states)?;
        let mean = out.slice_cols(0, self.action_dim);
        Ok(mean.map(|u| crate::nn::sigmoid(u).clamp(ACTION_EPS, 1.0 - ACTION_EPS)))
    }

    fn q_input(g: &mut Graph, s: Var, a: Var) -> Var {
        g.concat_cols(&[s, a])
    }

    /// `min(Q1_target, Q2_target)(s', a')` evaluated without a tape.
    pub fn target_min_q(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let x = Tensor::concat_cols(&[states, actions]);
        let a = self.target_q1.eval(&self.params, &x)?;
        let b = self.target_q2.eval(&self.params, &x)?;
        Ok(a.zip_map(&b, f64::min))
    }

    /// Soft Bellman targets `y = r + γ(1 − terminal)(min Q_t(s', a') − α log π(a'|s'))`
    /// with `a'` drawn using `eps_next`.
    pub fn critic_targets(&self, batch: &Batch, eps_next: &Tensor) -> Result<Tensor> {
        let (a_next, logp) = self.sample_with(&batch.next_states, eps_next)?;
        let q = self.target_min_q(&batch.next_states, &a_next)?;
        let alpha = self.alpha();
        let gamma = self.config.gamma;
        let n = batch.rewards.rows();
        let y = (0..n)
            .map(|i| {
                let r = batch.rewards.get(i, 0);
                let cont = 1.0 - batch.terminals.get(i, 0);
                if cont == 0.0 || gamma == 0.0 {
                    r
                } else {
                    r + gamma * cont * (q.get(i, 0) - alpha * logp[i])
                }
            })
            .collect();
        Ok(Tensor::new(n, 1, y))
    }

    /// `mean (Q1 − y)² + mean (Q2 − y)²`.
    pub fn critic_loss_on(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        batch: &Batch,
        y: &Tensor,
    ) -> Result<Var> {
        let s = g.constant(batch.states.clone());
        let a = g.constant(batch.actions.clone());
        let yv = g.constant(y.clone());
        let x = Self::q_input(g, s, a);
        let mut total = None;
        for q in [&self.q1, &self.q2] {
            let out = q.forward(g, params, x)?;
            let d = g.sub(out, yv);
            let d2 = g.square(d);
            let m = g.mean(d2);
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m),
            });
        }
        Ok(total.expect("two critics"))
    }

    /// `mean(α log π(a|s) − min(Q1, Q2)(s, a))` with `a` reparameterised by `eps`.
    /// Returns the loss and the per-row log-probabilities.
    pub fn actor_loss_on(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        states: &Tensor,
        eps: &Tensor,
        alpha: f64,
    ) -> Result<(Var, Var)> {
        let s = g.constant(states.clone());
        let (a, logp) = self.sample_on(g, params, s, eps)?;
        let x = Self::q_input(g, s, a);
        let q1 = self.q1.forward(g, params, x)?;
        let q2 = self.q2.forward(g, params, x)?;
        let q = g.minimum(q1, q2);
        let ent = g.scale(logp, alpha);
        let d = g.sub(ent, q);
        Ok((g.mean(d), logp))
    }

    fn restrict(grads: &mut Gradients, prefixes: &[&str]) {
        grads.retain(|k, _| prefixes.iter().any(|p| k.starts_with(p)));
    }

    pub fn critic_update(&mut self, batch: &Batch, rng: &mut impl Rng) -> Result<f64> {
        let eps = self.draw_eps(batch.next_states.rows(), rng);
        let y = self.critic_targets(batch, &eps)?;
        let mut g = Graph::new();
        let loss = self.critic_loss_on(&mut g, &self.params, batch, &y)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "critic loss {value} at update {}",
                self.updates
            )));
        }
        let mut grads = g.backward(loss)?;
        Self::restrict(&mut grads, &["q1.", "q2."]);
        self.critic_opt.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// One actor step (critics untouched) followed by the α step when
    /// auto-tuning. Returns the actor loss and mean log-probability.
    pub fn actor_update(&mut self, states: &Tensor, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let eps = self.draw_eps(states.rows(), rng);
        let alpha = self.alpha();
        let mut g = Graph::new();
        let (loss, logp) = self.actor_loss_on(&mut g, &self.params, states, &eps, alpha)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "actor loss {value} at update {}",
                self.updates
            )));
        }
        let mean_logp = g.value(logp).sum() / states.rows() as f64;
        let mut grads = g.backward(loss)?;
        Self::restrict(&mut grads, &["actor."]);
        self.actor_opt.step(&mut self.params, &grads)?;
        if self.config.auto_alpha {
            let grad = -(mean_logp + self.target_entropy());
            let mut ag = Gradients::new();
            ag.insert(LOG_ALPHA.to_string(), Tensor::scalar(grad));
            self.alpha_opt.step(&mut self.params, &ag)?;
        }
        Ok((value, mean_logp))
    }

    /// `target ← τ·online + (1 − τ)·target`.
    pub fn soft_update(&mut self, tau: f64) {
        for (online, target) in [("q1.", "target_q1."), ("q2.", "target_q2.")] {
            let src = self.params.subset(online);
            self.params.blend_from(&src, online, target, tau);
        }
    }

    pub fn update(&mut self, batch: &Batch, rng: &mut impl Rng) -> Result<UpdateStats> {
        let critic_loss = self.critic_update(batch, rng)?;
        let (actor_loss, mean_logp) = self.actor_update(&batch.states, rng)?;
        self.soft_update(self.config.tau);
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            alpha: self.alpha(),
            entropy: -mean_logp,
        })
    }
}

/// Raw interaction record. Carries no latent, so replay can always be rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperienceTuple {
    pub observation: Vec<f64>,
    pub target: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_observation: Vec<f64>,
    pub next_target: Vec<f64>,
    /// Last step of its episode.
    pub done: bool,
    /// True environment termination; time-limit ends are not terminal.
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<ExperienceTuple>,
    /// Seeds the filter sampling noise, so relabeling is reproducible.
    pub noise_seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Observations `o_0..o_T` with the actions taken between them.
    pub fn to_sequence(&self) -> ObsActionSeq {
        let mut observations: Vec<Vec<f64>> =
            self.steps.iter().map(|t| t.observation.clone()).collect();
        if let Some(last) = self.steps.last() {
            observations.push(last.next_observation.clone());
        }
        ObsActionSeq {
            observations,
            actions: self.steps.iter().map(|t| t.action.clone()).collect(),
        }
    }
}

/// FIFO store of whole episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBuffer {
    pub capacity: usize,
    pub episodes: VecDeque<Episode>,
}

impl TrajectoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
        }
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn sequences(&self) -> Vec<ObsActionSeq> {
        self.episodes
            .iter()
            .filter(|e| e.len() >= 2)
            .map(Episode::to_sequence)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayTuple {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Ring buffer of latent-augmented tuples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub items: Vec<ReplayTuple>,
    pub next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn push(&mut self, t: ReplayTuple) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Batch> {
        if self.items.is_empty() {
            return Err(Error::Input("sampling from an empty replay buffer".into()));
        }
        let picked: Vec<&ReplayTuple> = (0..batch)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect();
        let rows = |f: &dyn Fn(&ReplayTuple) -> Vec<f64>| {
            Tensor::from_rows(&picked.iter().map(|t| f(t)).collect::<Vec<_>>())
        };
        Ok(Batch {
            states: rows(&|t| t.state.clone()),
            actions: rows(&|t| t.action.clone()),
            rewards: rows(&|t| vec![t.reward]),
            next_states: rows(&|t| t.next_state.clone()),
            terminals: rows(&|t| vec![f64::from(u8::from(t.terminal))]),
        })
    }
}

/// Filters one episode with its own noise seed and returns the latent means
/// `x̄_0..x̄_T`.
pub fn episode_latents(gssm: &Gssm, episode: &Episode) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode.noise_seed);
    Ok(gssm
        .filter_trajectory(&episode.to_sequence(), &mut rng)?
        .means())
}

/// Rebuilds replay from the trajectory buffer. In gssm mode every stored
/// episode is re-filtered with `gssm`, so the new tuples carry its latents.
pub fn relabel_experience(
    trajectories: &TrajectoryBuffer,
    mode: Mode,
    gssm: Option<&Gssm>,
    latent_dim: usize,
    capacity: usize,
) -> Result<ReplayBuffer> {
    let mut replay = ReplayBuffer::new(capacity);
    let seqs: Vec<&Episode> = trajectories
        .episodes
        .iter()
        .filter(|e| {
            if e.len() < 2 {
                log::warn!("skipping episode with {} steps during relabel", e.len());
            }
            e.len() >= 2
        })
        .collect();
    let latents: Vec<Option<Vec<Vec<f64>>>> = match (mode, gssm) {
        (Mode::Gssm, Some(model)) => {
            let batch: Vec<ObsActionSeq> = seqs.iter().map(|e| e.to_sequence()).collect();
            let mut rngs: Vec<ChaCha8Rng> = seqs
                .iter()
                .map(|e| ChaCha8Rng::seed_from_u64(e.noise_seed))
                .collect();
            if batch.is_empty() {
                Vec::new()
            } else {
                model
                    .filter_batch(&batch, &mut rngs)?
                    .into_iter()
                    .map(|t| Some(t.means()))
                    .collect()
            }
        }
        (Mode::Gssm, None) => return Err(Error::Contract("gssm relabel needs a model".into())),
        (Mode::Vanilla, _) => vec![None; seqs.len()],
    };
    for (ep, lat) in seqs.iter().zip(&latents) {
        for (t, step) in ep.steps.iter().enumerate() {
            let (x, xn) = match lat {
                Some(l) => (Some(l[t].as_slice()), Some(l[t + 1].as_slice())),
                None => (None, None),
            };
            replay.push(ReplayTuple {
                state: build_rl_state(mode, &step.observation, x, &step.target, latent_dim)?,
                action: step.action.clone(),
                reward: step.reward,
                next_state: build_rl_state(
                    mode,
                    &step.next_observation,
                    xn,
                    &step.next_target,
                    latent_dim,
                )?,
                terminal: step.terminal,
            });
        }
    }
    Ok(replay)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rng: &mut ChaCha8Rng) -> SacAgent {
        let cfg = SacConfig {
            hidden: vec![8, 8],
            batch_size: 4,
            ..SacConfig::default()
        };
        SacAgent::new(cfg, 3, 2, rng).unwrap()
    }

    #[test]
    fn rl_state_layout() {
        let s = build_rl_state(
            Mode::Gssm,
            &[1.0, 2.0, 3.0, 4.0],
            Some(&[5.0; 8]),
            &[6.0, 7.0],
            8,
        )
        .unwrap();
        assert_eq!(s.len(), 14);
        assert_eq!(&s[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&s[4..12], &[5.0; 8]);
        assert_eq!(&s[12..], &[6.0, 7.0]);
        let v = build_rl_state(Mode::Vanilla, &[1.0; 4], None, &[0.5; 2], 8).unwrap();
        assert_eq!(v.len(), 14);
        assert!(v[4..12].iter().all(|x| *x == 0.0));
        assert!(build_rl_state(Mode::Gssm, &[1.0; 4], None, &[0.0; 2], 8).is_err());
        assert!(build_rl_state(Mode::Gssm, &[1.0; 4], Some(&[0.0; 3]), &[0.0; 2], 8).is_err());
        assert!(build_rl_state(Mode::Vanilla, &[1.0; 4], Some(&[0.0; 8]), &[0.0; 2], 8).is_err());
    }

    #[test]
    fn actions_in_open_interval_with_finite_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = tiny(&mut rng);
        let s = Tensor::new(
            4,
            3,
            vec![
                50.0, -50.0, 3.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, -9.0, 9.0, 0.5,
            ],
        );
        let eps = Tensor::new(4, 2, vec![9.0, -9.0, 0.0, 0.0, 1.0, -1.0, 30.0, -30.0]);
        let (a, lp) = agent.sample_with(&s, &eps).unwrap();
        assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(lp.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn floor_std_is_deterministic_sigmoid_of_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut agent = tiny(&mut rng);
        // push the log-std head to its lower clamp and zero the mean head
        let last = agent.actor.sizes.len() - 2;
        let w = agent
            .params
            .get_mut(&agent.actor.weight_name(last))
            .unwrap();
        *w = Tensor::zeros(w.rows(), w.cols());
        let b = agent.params.get_mut(&agent.actor.bias_name(last)).unwrap();
        *b = Tensor::row(&[0.0, 0.0, -100.0, -100.0]);
        let s = Tensor::new(2, 3, vec![0.3, 0.1, -0.2, 1.0, 1.0, 1.0]);
        let (a, _) = agent.sample(&s, &mut rng).unwrap();
        for v in a.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
        assert_eq!(agent.act_deterministic(&s).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn gamma_zero_and_terminal_targets_are_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut agent = tiny(&mut rng);
        let batch = Batch {
            states: Tensor::zeros(3, 3),
            actions: Tensor::filled(3, 2, 0.5),
            rewards: Tensor::new(3, 1, vec![-1.0, 0.25, 3.0]),
            next_states: Tensor::filled(3, 3, 0.7),
            terminals: Tensor::new(3, 1, vec![1.0, 1.0, 1.0]),
        };
        let eps = agent.draw_eps(3, &mut rng);
        assert_eq!(
            agent.critic_targets(&batch, &eps).unwrap().data(),
            &[-1.0, 0.25, 3.0]
        );
        let open = Batch {
            terminals: Tensor::zeros(3, 1),
            ..batch.clone()
        };
        assert_ne!(
            agent.critic_targets(&open, &eps).unwrap().data(),
            &[-1.0, 0.25, 3.0]
        );
        agent.config.gamma = 0.0;
        assert_eq!(
            agent.critic_targets(&open, &eps).unwrap().data(),
            &[-1.0, 0.25, 3.0]
        );
    }

    #[test]
    fn soft_update_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agent = tiny(&mut rng);
        let online = agent.params.subset("q1.");
        let target = |a: &SacAgent| a.params.subset("target_q1.");
        assert_eq!(target(&agent).abs_diff(&target(&agent)), 0.0);
        // targets start equal to the online critics
        for (n, p) in online.iter() {
            assert_eq!(&p.value, agent.params.get(&format!("target_{n}")).unwrap());
        }
        let before = agent.params.clone();
        agent.soft_update(0.3);
        assert!(agent.params == before, "blend of equal sets must be exact");

        let w = agent.q1.weight_name(0);
        let orig = agent.params.get(&w).unwrap().clone();
        agent.params.get_mut(&w).unwrap().data_mut()[0] += 1.0;
        for _ in 0..1000 {
            agent.soft_update(0.005);
        }
        let t = agent.params.get(&format!("target_{w}")).unwrap().data()[0];
        let o = orig.data()[0] + 1.0;
        // residual gap is 0.995^1000 ≈ 0.0067 of the unit step
        assert!((t - o).abs() < 0.01 * o.abs().max(1.0));
        agent.soft_update(1.0);
        assert_eq!(
            agent.params.get(&format!("target_{w}")).unwrap().data()[0],
            o
        );
    }

    #[test]
    fn buffers_are_fifo() {
        let mut r = ReplayBuffer::new(2);
        for i in 0..3 {
            r.push(ReplayTuple {
                state: vec![i as f64],
                action: vec![],
                reward: 0.0,
                next_state: vec![],
                terminal: false,
            });
        }
        assert_eq!(r.len(), 2);
        assert_eq!(r.items[0].state, vec![2.0]);
        let mut t = TrajectoryBuffer::new(2);
        for s in 0..3 {
            t.push(Episode {
                steps: vec![],
                noise_seed: s,
            });
        }
        assert_eq!(
            t.episodes.iter().map(|e| e.noise_seed).collect::<Vec<_>>(),
            vec![1, 2]
        );
    }
}
