use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::RAD_TO_DEG;
use crate::arm::{
    env_step, ArmConfig, ArmEnv, ArmState, Target, TrajectoryRow, N_MUSCLES, OBS_DIM,
};
use crate::error::{Error, Result};
use crate::gssm::{FilterState, Gssm};
use crate::nn::Tensor;
use crate::sac::{build_rl_state, Mode, SacAgent};

/// Runs the filter alongside live episodes, one row per episode.
///
/// Row `k` draws its sampling noise from a generator seeded with
/// `noise_seeds[k]` in the same order as [`Gssm::filter_batch`], so online
/// latents equal the ones a later relabel with the same model produces.
#[derive(Clone, Debug)]
pub struct OnlineFilter {
    state: FilterState,
    prev_actions: Tensor,
    rngs: Vec<ChaCha8Rng>,
}

impl OnlineFilter {
    pub fn new(gssm: &Gssm, noise_seeds: &[u64]) -> Self {
        Self {
            state: gssm.filter_init(noise_seeds.len()),
            prev_actions: Tensor::zeros(noise_seeds.len(), gssm.config.action_dim),
            rngs: noise_seeds
                .iter()
                .map(|s| ChaCha8Rng::seed_from_u64(*s))
                .collect(),
        }
    }

    /// Consumes one observation per row and returns the latent means.
    pub fn observe(
        &mut self,
        gssm: &Gssm,
        observations: &[[f64; OBS_DIM]],
    ) -> Result<Vec<Vec<f64>>> {
        let l = gssm.latent_dim();
        let mut noise = Tensor::zeros(self.rngs.len(), l);
        for (r, rng) in self.rngs.iter_mut().enumerate() {
            for d in 0..l {
                noise.set(r, d, rng.sample(StandardNormal));
            }
        }
        let obs = Tensor::from_rows(&observations.iter().map(|o| o.to_vec()).collect::<Vec<_>>());
        let (next, q, _) = gssm.filter_step(&self.state, &self.prev_actions, &obs, &noise)?;
        self.state = next;
        Ok(q.into_iter().map(|d| d.mean).collect())
    }

    /// Actions taken after the last observation, fed into the next step.
    pub fn record_actions(&mut self, actions: &[[f64; N_MUSCLES]]) {
        self.prev_actions =
            Tensor::from_rows(&actions.iter().map(|a| a.to_vec()).collect::<Vec<_>>());
    }
}

/// Anything that maps batched observations and targets to excitations.
pub trait Controller {
    /// Starts one fresh episode per noise seed.
    fn begin(&mut self, noise_seeds: &[u64]) -> Result<()>;

    fn act(
        &mut self,
        observations: &[[f64; OBS_DIM]],
        targets: &[Target],
    ) -> Result<Vec<[f64; N_MUSCLES]>>;
}

/// Deterministic policy `sigmoid(μ(s))`, with the filter running online in
/// gssm mode.
pub struct AgentController<'a> {
    pub agent: &'a SacAgent,
    pub gssm: Option<&'a Gssm>,
    pub mode: Mode,
    filter: Option<OnlineFilter>,
}

impl<'a> AgentController<'a> {
    pub fn new(agent: &'a SacAgent, mode: Mode, gssm: Option<&'a Gssm>) -> Result<Self> {
        match (mode, gssm) {
            (Mode::Gssm, None) => {
                return Err(Error::Contract("gssm controller needs a model".into()))
            }
            (Mode::Vanilla, Some(_)) => {
                return Err(Error::Contract("vanilla controller takes no model".into()))
            }
            _ => {}
        }
        Ok(Self {
            agent,
            gssm,
            mode,
            filter: None,
        })
    }

    fn latent_dim(&self) -> usize {
        self.agent.state_dim - OBS_DIM - 2
    }
}

impl Controller for AgentController<'_> {
    fn begin(&mut self, noise_seeds: &[u64]) -> Result<()> {
        self.filter = self.gssm.map(|g| OnlineFilter::new(g, noise_seeds));
        Ok(())
    }

    fn act(
        &mut self,
        observations: &[[f64; OBS_DIM]],
        targets: &[Target],
    ) -> Result<Vec<[f64; N_MUSCLES]>> {
        let latents = match (&mut self.filter, self.gssm) {
            (Some(f), Some(g)) => Some(f.observe(g, observations)?),
            (None, Some(_)) => return Err(Error::Contract("act before begin".into())),
            _ => None,
        };
        let ld = self.latent_dim();
        let states = observations
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(i, (o, c))| {
                let x = latents.as_ref().map(|l| l[i].as_slice());
                build_rl_state(self.mode, o, x, c, ld)
            })
            .collect::<Result<Vec<_>>>()?;
        let a = self.agent.act_deterministic(&Tensor::from_rows(&states))?;
        let actions: Vec<[f64; N_MUSCLES]> = (0..a.rows())
            .map(|r| std::array::from_fn(|m| a.get(r, m)))
            .collect();
        if let Some(f) = &mut self.filter {
            f.record_actions(&actions);
        }
        Ok(actions)
    }
}

/// Running sum of squared joint-angle errors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrackingError {
    pub sum_sq: f64,
    /// Number of joint errors summed (two per step).
    pub count: usize,
}

impl TrackingError {
    pub fn push(&mut self, theta: [f64; 2], target: Target) {
        for j in 0..2 {
            self.sum_sq += (theta[j] - target[j]).powi(2);
        }
        self.count += 2;
    }

    pub fn rmse_deg(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.sum_sq / self.count as f64).sqrt() * RAD_TO_DEG
    }
}

/// RMSE in degrees over `episodes` training-style episodes run in lock-step.
/// Environments and filter noise are derived from `seed` alone.
pub fn evaluate_rmse(
    controller: &mut impl Controller,
    arm: &ArmConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Input("evaluation needs at least one episode".into()));
    }
    let mut base = ChaCha8Rng::seed_from_u64(seed);
    let mut envs = Vec::with_capacity(episodes);
    let mut rngs = Vec::with_capacity(episodes);
    let mut noise_seeds = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        rngs.push(ChaCha8Rng::seed_from_u64(base.gen()));
        noise_seeds.push(base.gen::<u64>());
        envs.push(ArmEnv::new(arm.clone())?);
    }
    let mut obs: Vec<[f64; OBS_DIM]> = envs
        .iter_mut()
        .zip(&mut rngs)
        .map(|(e, r)| e.reset(r))
        .collect();
    controller.begin(&noise_seeds)?;
    let mut err = TrackingError::default();
    for _ in 0..arm.episode_steps {
        let targets: Vec<Target> = envs.iter().map(|e| e.target).collect();
        let actions = controller.act(&obs, &targets)?;
        for (i, env) in envs.iter_mut().enumerate() {
            let tr = env.step(&actions[i], &mut rngs[i])?;
            err.push(env.state.theta, targets[i]);
            obs[i] = tr.observation;
        }
    }
    Ok(err.rmse_deg())
}

/// Piecewise-linear joint-angle schedule in degrees. Repeated times give
/// jumps, repeated angles give holds.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingSchedule {
    pub knots: Vec<(f64, [f64; 2])>,
}

impl Default for TrackingSchedule {
    /// 60 s made of three identical 20 s segments: a 10 s request of
    /// [45°, 45°], a 2 s move, a 6 s excursion to [75°, 90°] and a 2 s return.
    /// With identical segments, a change in segment error comes from elapsed
    /// time rather than from what was asked.
    fn default() -> Self {
        let mut knots = vec![(0.0, [45.0, 45.0])];
        for t0 in [0.0, 20.0, 40.0] {
            knots.push((t0 + 10.0, [45.0, 45.0]));
            knots.push((t0 + 12.0, [75.0, 90.0]));
            knots.push((t0 + 18.0, [75.0, 90.0]));
            knots.push((t0 + 20.0, [45.0, 45.0]));
        }
        Self { knots }
    }
}

pub const SCHEDULE_HEADER: &str = "t,shoulder_deg,elbow_deg";

impl TrackingSchedule {
    pub fn new(knots: Vec<(f64, [f64; 2])>) -> Result<Self> {
        let s = Self { knots };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .knots
            .first()
            .ok_or_else(|| Error::Input("empty tracking schedule".into()))?;
        if first.0 != 0.0 {
            return Err(Error::Input(format!(
                "tracking schedule must start at t = 0, starts at {}",
                first.0
            )));
        }
        for (i, (t, a)) in self.knots.iter().enumerate() {
            if !t.is_finite() || !a.iter().all(|v| v.is_finite()) {
                return Err(Error::Input(format!("schedule knot {i} is not finite")));
            }
            if i > 0 && *t < self.knots[i - 1].0 {
                return Err(Error::Input(format!(
                    "schedule time goes backwards at knot {i}"
                )));
            }
        }
        Ok(())
    }

    /// Parses `t,shoulder_deg,elbow_deg` rows; `#` lines are comments.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut knots = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line == SCHEDULE_HEADER {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Input(format!("schedule line {}: {e}", n + 1)))?;
            if v.len() != 3 {
                return Err(Error::Input(format!(
                    "schedule line {}: expected 3 fields, got {}",
                    n + 1,
                    v.len()
                )));
            }
            knots.push((v[0], [v[1], v[2]]));
        }
        Self::new(knots)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{SCHEDULE_HEADER}\n");
        for (t, [a, b]) in &self.knots {
            s.push_str(&format!("{t},{a},{b}\n"));
        }
        s
    }

    pub fn duration(&self) -> f64 {
        self.knots.last().map_or(0.0, |k| k.0)
    }

    /// Target in radians at time `t`, held constant outside the knots.
    pub fn target_at(&self, t: f64) -> Target {
        let i = self.knots.partition_point(|k| k.0 <= t).saturating_sub(1);
        let (t0, a0) = self.knots[i];
        let deg = match self.knots.get(i + 1) {
            Some(&(t1, a1)) if t > t0 => {
                let w = (t - t0) / (t1 - t0);
                [a0[0] + w * (a1[0] - a0[0]), a0[1] + w * (a1[1] - a0[1])]
            }
            _ => a0,
        };
        [deg[0] / RAD_TO_DEG, deg[1] / RAD_TO_DEG]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingResult {
    pub rows: Vec<TrajectoryRow>,
    pub rmse_deg: f64,
    pub segment_rmse_deg: Vec<f64>,
}

impl TrackingResult {
    /// RMSE of the last segment minus the first.
    pub fn degradation(&self) -> f64 {
        match (self.segment_rmse_deg.first(), self.segment_rmse_deg.last()) {
            (Some(a), Some(b)) => b - a,
            _ => f64::NAN,
        }
    }
}

/// Tracks `schedule` for `seconds` from rest at the schedule's start pose with
/// fresh muscles. Fatigue accumulates across the whole trial; there are no
/// resets or retargets.
pub fn run_tracking_trial(
    controller: &mut impl Controller,
    arm: &ArmConfig,
    schedule: &TrackingSchedule,
    seconds: f64,
    segment_seconds: f64,
    noise_seed: u64,
) -> Result<TrackingResult> {
    if schedule.duration() + 1e-9 < seconds {
        return Err(Error::Input(format!(
            "schedule covers {} s of a {seconds} s trial",
            schedule.duration()
        )));
    }
    let steps = (seconds / arm.dt).round() as usize;
    let seg_steps = ((segment_seconds / arm.dt).round() as usize).max(1);
    let mut state = ArmState::at_rest(schedule.target_at(0.0));
    controller.begin(&[noise_seed])?;
    let mut rows = Vec::with_capacity(steps);
    let mut total = TrackingError::default();
    let mut segments = Vec::new();
    let mut seg = TrackingError::default();
    for k in 0..steps {
        let target = schedule.target_at(k as f64 * arm.dt);
        let e = controller.act(&[state.observation()], &[target])?[0];
        let r = env_step(&state, &e, target, arm)?;
        state = r.state;
        total.push(state.theta, target);
        seg.push(state.theta, target);
        if (k + 1) % seg_steps == 0 || k + 1 == steps {
            segments.push(seg.rmse_deg());
            seg = TrackingError::default();
        }
        rows.push(TrajectoryRow {
            t: (k + 1) as f64 * arm.dt,
            state,
            excitation: e,
            target,
            reward: r.reward,
        });
    }
    Ok(TrackingResult {
        rows,
        rmse_deg: total.rmse_deg(),
        segment_rmse_deg: segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_offset_gives_its_angle_in_degrees() {
        let mut e = TrackingError::default();
        for k in 0..300 {
            let t = [0.01 * k as f64, 1.0 - 0.002 * k as f64];
            e.push([t[0] + 0.1, t[1] - 0.1], t);
        }
        assert!((e.rmse_deg() - 5.729_577_951_308_232).abs() < 1e-9);
        let mut perfect = TrackingError::default();
        perfect.push([0.3, 0.4], [0.3, 0.4]);
        assert_eq!(perfect.rmse_deg(), 0.0);
    }

    #[test]
    fn schedule_interpolates_and_holds() {
        let s = TrackingSchedule::new(vec![
            (0.0, [0.0, 90.0]),
            (2.0, [0.0, 90.0]),
            (4.0, [90.0, 0.0]),
            (4.0, [10.0, 10.0]),
        ])
        .unwrap();
        let d = |t| s.target_at(t).map(|v| v * RAD_TO_DEG);
        assert_eq!(d(1.0), [0.0, 90.0]);
        let mid = d(3.0);
        assert!((mid[0] - 45.0).abs() < 1e-12 && (mid[1] - 45.0).abs() < 1e-12);
        let jump = d(4.0);
        assert!((jump[0] - 10.0).abs() < 1e-12);
        assert_eq!(d(100.0), jump);
    }

    #[test]
    fn schedule_csv_round_trips() {
        let s = TrackingSchedule::default();
        assert_eq!(TrackingSchedule::from_csv(&s.to_csv()).unwrap(), s);
        assert!(TrackingSchedule::from_csv("t,shoulder_deg,elbow_deg\n1,2,3\n").is_err());
        assert!(TrackingSchedule::from_csv("0,1\n").is_err());
        assert!(TrackingSchedule::from_csv("0,1,2\n5,1,2\n3,1,2\n").is_err());
    }

    #[test]
    fn default_schedule_requests_45_45_three_times() {
        let s = TrackingSchedule::default();
        let holds = s
            .knots
            .windows(2)
            .filter(|w| w[0].1 == [45.0, 45.0] && w[1].1 == [45.0, 45.0] && w[1].0 > w[0].0)
            .count();
        assert_eq!(holds, 3);
        for t in [0.0, 5.0, 11.0, 15.0, 19.5] {
            assert_eq!(s.target_at(t), s.target_at(t + 20.0));
            assert_eq!(s.target_at(t), s.target_at(t + 40.0));
        }
        assert_eq!(s.duration(), 60.0);
    }
}
