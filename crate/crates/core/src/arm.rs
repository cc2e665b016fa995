//! Two-link planar arm driven by four stimulated muscles with first-order
//! activation dynamics and slow, hidden fatigue.
//!
//! Radians are used everywhere inside this module. The `*_deg` config fields
//! are converted on use.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_MUSCLES: usize = 4;
pub const OBS_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Joint {
    Shoulder,
    Elbow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuscleParams {
    pub name: String,
    pub joint: Joint,
    /// +1 flexor, −1 extensor.
    pub sign: f64,
    /// Torque at unit activation and full capacity (N·m).
    pub f_max: f64,
    pub tau_act: f64,
    pub tau_fat: f64,
    pub tau_rec: f64,
}

impl MuscleParams {
    fn new(name: &str, joint: Joint, sign: f64, f_max: f64) -> Self {
        Self {
            name: name.into(),
            joint,
            sign,
            f_max,
            tau_act: 0.1,
            tau_fat: 30.0,
            tau_rec: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmConfig {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    /// Viscous damping per joint (N·m·s/rad).
    pub damping: f64,
    pub shoulder_limits_deg: [f64; 2],
    pub elbow_limits_deg: [f64; 2],
    /// Control step (s).
    pub dt: f64,
    pub substeps: usize,
    pub episode_steps: usize,
    pub retarget_step: usize,
    pub phi_min: f64,
    pub phi_reset: [f64; 2],
    /// When false, capacities stay at 1 and never change. The arm is then
    /// fully observable, which gives an oracle baseline for the controller.
    pub fatigue: bool,
    pub muscles: Vec<MuscleParams>,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            l1: 0.30,
            l2: 0.33,
            m1: 2.0,
            m2: 1.5,
            damping: 0.3,
            shoulder_limits_deg: [-60.0, 150.0],
            elbow_limits_deg: [0.0, 150.0],
            dt: 0.1,
            substeps: 10,
            episode_steps: 100,
            retarget_step: 50,
            phi_min: 0.2,
            phi_reset: [0.4, 1.0],
            fatigue: true,
            muscles: vec![
                MuscleParams::new("brachialis", Joint::Elbow, 1.0, 10.0),
                MuscleParams::new("triceps_medial", Joint::Elbow, -1.0, 10.0),
                MuscleParams::new("pectoralis_major_c", Joint::Shoulder, 1.0, 15.0),
                MuscleParams::new("deltoid_posterior", Joint::Shoulder, -1.0, 15.0),
            ],
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("m1", self.m1),
            ("m2", self.m2),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("arm.{name} must be > 0, got {v}")));
            }
        }
        if self.damping < 0.0 {
            return Err(Error::Config(format!(
                "arm.damping must be >= 0, got {}",
                self.damping
            )));
        }
        if self.substeps == 0 || self.episode_steps == 0 {
            return Err(Error::Config(
                "arm.substeps and arm.episode_steps must be > 0".into(),
            ));
        }
        for (name, l) in [
            ("shoulder", self.shoulder_limits_deg),
            ("elbow", self.elbow_limits_deg),
        ] {
            if !(l[0] < l[1]) {
                return Err(Error::Config(format!(
                    "arm.{name}_limits_deg must be ordered, got {l:?}"
                )));
            }
        }
        if !(0.0 < self.phi_min
            && self.phi_min <= self.phi_reset[0]
            && self.phi_reset[0] <= self.phi_reset[1]
            && self.phi_reset[1] <= 1.0)
        {
            return Err(Error::Config(format!(
                "arm fatigue ranges must satisfy 0 < phi_min <= phi_reset lo <= hi <= 1, got {} and {:?}",
                self.phi_min, self.phi_reset
            )));
        }
        if self.muscles.len() != N_MUSCLES {
            return Err(Error::Config(format!(
                "arm needs {N_MUSCLES} muscles, got {}",
                self.muscles.len()
            )));
        }
        for m in &self.muscles {
            if !(m.f_max > 0.0 && m.tau_act > 0.0 && m.tau_fat > 0.0 && m.tau_rec > 0.0)
                || m.sign.abs() != 1.0
            {
                return Err(Error::Config(format!(
                    "muscle {} has invalid parameters",
                    m.name
                )));
            }
        }
        Ok(())
    }

    pub fn limits(&self) -> [[f64; 2]; 2] {
        [
            self.shoulder_limits_deg.map(f64::to_radians),
            self.elbow_limits_deg.map(f64::to_radians),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub theta: [f64; 2],
    pub dtheta: [f64; 2],
    pub activation: [f64; N_MUSCLES],
    pub phi: [f64; N_MUSCLES],
}

impl ArmState {
    pub fn at_rest(theta: [f64; 2]) -> Self {
        Self {
            theta,
            dtheta: [0.0; 2],
            activation: [0.0; N_MUSCLES],
            phi: [1.0; N_MUSCLES],
        }
    }

    /// `[θ_s, θ_e, θ̇_s, θ̇_e]`. Activations and fatigue are not observable.
    pub fn observation(&self) -> [f64; OBS_DIM] {
        [self.theta[0], self.theta[1], self.dtheta[0], self.dtheta[1]]
    }

    fn is_finite(&self) -> bool {
        self.theta
            .iter()
            .chain(&self.dtheta)
            .chain(&self.activation)
            .chain(&self.phi)
            .all(|v| v.is_finite())
    }
}

/// Target joint angles (rad).
pub type Target = [f64; 2];

/// Exact solution of `da/dt = (e − a)/τ` over `dt` with `e` held.
pub fn activation_step(a: f64, e: f64, tau: f64, dt: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&e) {
        return Err(Error::Input(format!("excitation {e} outside [0, 1]")));
    }
    Ok((e + (a - e) * (-dt / tau).exp()).clamp(0.0, 1.0))
}

/// Forward-Euler step of `dφ/dt = −a·φ/τ_fat + (1 − φ)/τ_rec`, kept in
/// `[φ_min, 1]`.
pub fn fatigue_step(phi: f64, a: f64, tau_fat: f64, tau_rec: f64, dt: f64, phi_min: f64) -> f64 {
    let d = -a * phi / tau_fat + (1.0 - phi) / tau_rec;
    (phi + dt * d).clamp(phi_min, 1.0)
}

/// Joint torques `(τ_s, τ_e)` from activations scaled by fatigue capacity.
pub fn muscle_torques(state: &ArmState, muscles: &[MuscleParams]) -> [f64; 2] {
    let mut tau = [0.0; 2];
    for (i, m) in muscles.iter().enumerate() {
        let j = match m.joint {
            Joint::Shoulder => 0,
            Joint::Elbow => 1,
        };
        tau[j] += m.sign * m.f_max * state.activation[i] * state.phi[i];
    }
    tau
}

/// Mass matrix of the two-link arm with uniform rods.
pub fn mass_matrix(theta_e: f64, c: &ArmConfig) -> [[f64; 2]; 2] {
    let (lc1, lc2) = (0.5 * c.l1, 0.5 * c.l2);
    let i1 = c.m1 * c.l1 * c.l1 / 12.0;
    let i2 = c.m2 * c.l2 * c.l2 / 12.0;
    let cos = theta_e.cos();
    let m11 =
        i1 + i2 + c.m1 * lc1 * lc1 + c.m2 * (c.l1 * c.l1 + lc2 * lc2 + 2.0 * c.l1 * lc2 * cos);
    let m12 = i2 + c.m2 * (lc2 * lc2 + c.l1 * lc2 * cos);
    let m22 = i2 + c.m2 * lc2 * lc2;
    [[m11, m12], [m12, m22]]
}

pub fn kinetic_energy(theta: [f64; 2], dtheta: [f64; 2], c: &ArmConfig) -> f64 {
    let m = mass_matrix(theta[1], c);
    0.5 * (m[0][0] * dtheta[0] * dtheta[0]
        + 2.0 * m[0][1] * dtheta[0] * dtheta[1]
        + m[1][1] * dtheta[1] * dtheta[1])
}

/// `θ̈ = M(θ)⁻¹ (τ − C(θ, θ̇)θ̇ − D θ̇)`, gravity-free.
pub fn arm_dynamics(
    theta: [f64; 2],
    dtheta: [f64; 2],
    torque: [f64; 2],
    c: &ArmConfig,
) -> [f64; 2] {
    let m = mass_matrix(theta[1], c);
    let h = c.m2 * c.l1 * 0.5 * c.l2 * theta[1].sin();
    let coriolis = [
        -h * dtheta[1] * (2.0 * dtheta[0] + dtheta[1]),
        h * dtheta[0] * dtheta[0],
    ];
    let rhs = [
        torque[0] - coriolis[0] - c.damping * dtheta[0],
        torque[1] - coriolis[1] - c.damping * dtheta[1],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[0][1];
    [
        (m[1][1] * rhs[0] - m[0][1] * rhs[1]) / det,
        (m[0][0] * rhs[1] - m[0][1] * rhs[0]) / det,
    ]
}

/// `−Σ(θ − θ_tar)² − mean(e)`.
pub fn reward(theta: [f64; 2], target: Target, excitation: &[f64]) -> f64 {
    let err: f64 = theta
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    -err - excitation.iter().sum::<f64>() / excitation.len() as f64
}

/// Integrates one control step with the excitations held.
pub fn integrate(
    state: &ArmState,
    excitation: &[f64; N_MUSCLES],
    c: &ArmConfig,
) -> Result<ArmState> {
    let h = c.dt / c.substeps as f64;
    let limits = c.limits();
    let mut s = *state;
    for _ in 0..c.substeps {
        for (i, m) in c.muscles.iter().enumerate() {
            let a = s.activation[i];
            if c.fatigue {
                s.phi[i] = fatigue_step(s.phi[i], a, m.tau_fat, m.tau_rec, h, c.phi_min);
            }
            s.activation[i] = activation_step(a, excitation[i], m.tau_act, h)?;
        }
        let torque = muscle_torques(&s, &c.muscles);
        let acc = arm_dynamics(s.theta, s.dtheta, torque, c);
        for j in 0..2 {
            s.dtheta[j] += h * acc[j];
            s.theta[j] += h * s.dtheta[j];
            let [lo, hi] = limits[j];
            if s.theta[j] < lo || s.theta[j] > hi {
                s.theta[j] = s.theta[j].clamp(lo, hi);
                s.dtheta[j] = 0.0;
            }
        }
    }
    if !s.is_finite() {
        return Err(Error::Simulation(format!(
            "non-finite arm state {s:?} from {state:?} under {excitation:?}"
        )));
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub state: ArmState,
    pub observation: [f64; OBS_DIM],
    pub reward: f64,
}

/// One control step: integrate, then score the new pose against `target`.
pub fn env_step(
    state: &ArmState,
    excitation: &[f64; N_MUSCLES],
    target: Target,
    c: &ArmConfig,
) -> Result<StepResult> {
    let next = integrate(state, excitation, c)?;
    Ok(StepResult {
        observation: next.observation(),
        reward: reward(next.theta, target, excitation),
        state: next,
    })
}

/// Sampling ranges for resets, in radians. Defaults to the joint limits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResetRanges {
    pub theta: [[f64; 2]; 2],
    pub target: [[f64; 2]; 2],
    pub phi: [f64; 2],
}

impl ResetRanges {
    pub fn from_config(c: &ArmConfig) -> Self {
        Self {
            theta: c.limits(),
            target: c.limits(),
            phi: if c.fatigue { c.phi_reset } else { [1.0, 1.0] },
        }
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_target(rng: &mut impl Rng, ranges: &[[f64; 2]; 2]) -> Target {
    [uniform(rng, ranges[0]), uniform(rng, ranges[1])]
}

/// Random pose at rest, zero activation, random fatigue, random target.
pub fn env_reset(rng: &mut impl Rng, ranges: &ResetRanges) -> (ArmState, [f64; OBS_DIM], Target) {
    let theta = [uniform(rng, ranges.theta[0]), uniform(rng, ranges.theta[1])];
    let mut state = ArmState::at_rest(theta);
    for p in &mut state.phi {
        *p = uniform(rng, ranges.phi);
    }
    let target = sample_target(rng, &ranges.target);
    (state, state.observation(), target)
}

/// A fresh target exactly at `retarget_step`, otherwise none.
pub fn mid_episode_retarget(
    step: usize,
    retarget_step: usize,
    rng: &mut impl Rng,
    ranges: &[[f64; 2]; 2],
) -> Option<Target> {
    (step == retarget_step).then(|| sample_target(rng, ranges))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub observation: [f64; OBS_DIM],
    pub reward: f64,
    /// Episode reached its step limit. This is a time limit, not a terminal state.
    pub done: bool,
}

/// Episodic wrapper holding state, target and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmEnv {
    pub config: ArmConfig,
    pub ranges: ResetRanges,
    pub state: ArmState,
    pub target: Target,
    pub step: usize,
}

impl ArmEnv {
    pub fn new(config: ArmConfig) -> Result<Self> {
        config.validate()?;
        let ranges = ResetRanges::from_config(&config);
        let l = config.limits();
        let mid = [0.5 * (l[0][0] + l[0][1]), 0.5 * (l[1][0] + l[1][1])];
        Ok(Self {
            config,
            ranges,
            state: ArmState::at_rest(mid),
            target: mid,
            step: 0,
        })
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> [f64; OBS_DIM] {
        let (state, obs, target) = env_reset(rng, &self.ranges);
        self.state = state;
        self.target = target;
        self.step = 0;
        obs
    }

    /// Advances one control step. The target is redrawn right after the
    /// retarget step so the next decision already sees it.
    pub fn step(
        &mut self,
        excitation: &[f64; N_MUSCLES],
        rng: &mut impl Rng,
    ) -> Result<Transition> {
        let r = env_step(&self.state, excitation, self.target, &self.config)?;
        self.state = r.state;
        self.step += 1;
        if let Some(t) = mid_episode_retarget(
            self.step,
            self.config.retarget_step,
            rng,
            &self.ranges.target,
        ) {
            self.target = t;
        }
        Ok(Transition {
            observation: r.observation,
            reward: r.reward,
            done: self.step >= self.config.episode_steps,
        })
    }

    pub fn observation(&self) -> [f64; OBS_DIM] {
        self.state.observation()
    }
}

/// One row of a trajectory dump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub state: ArmState,
    pub excitation: [f64; N_MUSCLES],
    pub target: Target,
    pub reward: f64,
}

pub const TRAJECTORY_HEADER: &str = "t,theta_s,theta_e,dtheta_s,dtheta_e,e1,e2,e3,e4,a1,a2,a3,a4,phi1,phi2,phi3,phi4,target_s,target_e,r";

pub fn write_trajectory_csv(mut w: impl Write, rows: &[TrajectoryRow]) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        let s = &r.state;
        let mut fields = vec![r.t];
        fields.extend(s.theta);
        fields.extend(s.dtheta);
        fields.extend(r.excitation);
        fields.extend(s.activation);
        fields.extend(s.phi);
        fields.extend(r.target);
        fields.push(r.reward);
        let line: Vec<String> = fields.iter().map(f64::to_string).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}
