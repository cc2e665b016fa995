use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Noise-free kink map `f(x) = 0.8 + (x + 0.2)·(1 − 5/(1 + e^{−2x}))`.
pub fn kink_mean(x: f64) -> f64 {
    0.8 + (x + 0.2) * (1.0 - 5.0 / (1.0 + (-2.0 * x).exp()))
}

/// Scalar system `x' = f(x) + σ_p·η`, observed as `y = x + σ_o·ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinkSystem {
    pub process_sd: f64,
    pub obs_sd: f64,
}

impl KinkSystem {
    pub fn new(process_sd: f64, obs_sd: f64) -> Self {
        assert!(
            process_sd >= 0.0 && obs_sd >= 0.0,
            "noise scales must be non-negative"
        );
        Self { process_sd, obs_sd }
    }

    pub fn step(&self, x: f64, rng: &mut impl Rng) -> f64 {
        kink_step(x, self.process_sd, rng)
    }

    /// Latent states and their noisy observations for `n_steps` steps from `x0`.
    pub fn generate(&self, n_steps: usize, x0: f64, rng: &mut impl Rng) -> KinkData {
        let states = generate_kink_dataset(n_steps, x0, self.process_sd, rng);
        let observations = states
            .iter()
            .map(|x| x + self.obs_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        KinkData {
            states,
            observations,
        }
    }
}

pub fn kink_step(x: f64, process_sd: f64, rng: &mut impl Rng) -> f64 {
    let noise = if process_sd > 0.0 {
        process_sd * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    kink_mean(x) + noise
}

/// Iterates [`kink_step`] from `x0`; the result has `n_steps` entries.
pub fn generate_kink_dataset(
    n_steps: usize,
    x0: f64,
    process_sd: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(n_steps >= 2, "need at least two steps to form a transition");
    let mut out = Vec::with_capacity(n_steps);
    let mut x = x0;
    out.push(x);
    for _ in 1..n_steps {
        x = kink_step(x, process_sd, rng);
        out.push(x);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinkData {
    pub states: Vec<f64>,
    pub observations: Vec<f64>,
}

/// Consecutive `(v_t, v_{t+1})` pairs.
pub fn transition_pairs(series: &[f64]) -> Vec<(f64, f64)> {
    series.windows(2).map(|w| (w[0], w[1])).collect()
}
