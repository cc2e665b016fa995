//! Recurrent Gaussian state-space filter.
//!
//! At each step the filter combines the previous latent and action with the
//! incoming observation:
//!
//! ```text
//! h_x = W_s([x_{t-1}; a_{t-1}])
//! h_t = GRU(h_{t-1}, o_t)
//! h_c = ½·tanh(h_x + h_t)
//! q_t = W_x(h_c)            (diagonal Gaussian over x_t)
//! x_t = μ_t + σ_t ⊙ η_t
//! ```
//!
//! The decoder `W_g` maps latents back to a Gaussian over observations, and
//! the transition model predicts `x_t` from `x_{t-1}` alone.

mod gaussian;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use gaussian::{
    kl_diag_gaussians, kl_loss, kl_rows, likelihood_loss, nll_rows, positive_variance,
    DiagGaussian, GaussVar, VARIANCE_FLOOR,
};
pub use train::{train_gssm, GssmLoss, GssmTrainConfig, PackedBatch};

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Graph, Gru, Mlp, ParameterSet, Tensor, Var};
use crate::transitions::{Transition, TransitionConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GssmConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub ws_hidden: usize,
    pub wx_hidden: usize,
    pub wg_hidden: usize,
    pub transition: TransitionConfig,
}

impl Default for GssmConfig {
    fn default() -> Self {
        Self {
            obs_dim: 4,
            action_dim: 4,
            latent_dim: 8,
            hidden: 64,
            ws_hidden: 32,
            wx_hidden: 64,
            wg_hidden: 64,
            transition: TransitionConfig::default(),
        }
    }
}

/// One observed sequence. `actions[t]` is the action taken after seeing
/// `observations[t]`; the action after the final observation may be omitted.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsActionSeq {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl ObsActionSeq {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Action fed into the filter when it observes step `t`.
    pub fn prev_action(&self, t: usize, action_dim: usize) -> Vec<f64> {
        if t == 0 {
            vec![0.0; action_dim]
        } else {
            self.actions[t - 1].clone()
        }
    }
}

/// Recurrent filter state carried between steps, one row per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub h: Tensor,
    pub x: Tensor,
}

/// Per-step record of a filtered sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStep {
    pub observation: Vec<f64>,
    pub action: Option<Vec<f64>>,
    pub q: DiagGaussian,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub steps: Vec<LatentStep>,
    /// Decoder distribution `k_t = W_g(x_t)` for every step.
    pub reconstructions: Vec<DiagGaussian>,
}

impl LatentTrajectory {
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.q.mean.clone()).collect()
    }
}

/// Tape nodes produced by one filter step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub h: Var,
    pub hc: Var,
    pub q: GaussVar,
    pub x: Var,
}

/// Filter, decoder and transition with their parameters and optimiser state.
#[derive(Clone, Debug)]
pub struct Gssm {
    pub config: GssmConfig,
    pub gru: Gru,
    pub w_s: Mlp,
    pub w_x: Mlp,
    pub w_g: Mlp,
    pub transition: Transition,
    pub params: ParameterSet,
    pub optimizer: Adam,
    /// Gradient steps taken so far, drives the KL warm-up.
    pub steps_taken: u64,
}

impl Gssm {
    pub fn new(config: GssmConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = &config;
        if c.obs_dim == 0 || c.latent_dim == 0 || c.hidden == 0 {
            return Err(Error::Config("gssm widths must be positive".into()));
        }
        let gru = Gru::new("filter.gru", c.obs_dim, c.hidden);
        let w_s = Mlp::uniform(
            "filter.w_s",
            c.latent_dim + c.action_dim,
            &[c.ws_hidden],
            c.hidden,
            Activation::Tanh,
            Activation::Identity,
        );
        let w_x = Mlp::uniform(
            "filter.w_x",
            c.hidden,
            &[c.wx_hidden],
            2 * c.latent_dim,
            Activation::Tanh,
            Activation::Identity,
        );
        let w_g = Mlp::uniform(
            "decoder.w_g",
            c.latent_dim,
            &[c.wg_hidden],
            2 * c.obs_dim,
            Activation::Tanh,
            Activation::Identity,
        );
        let mut params = ParameterSet::new();
        gru.init(&mut params, rng);
        w_s.init(&mut params, rng, true);
        w_x.init(&mut params, rng, true);
        w_g.init(&mut params, rng, true);
        let transition = Transition::build(
            &c.transition,
            "transition",
            c.latent_dim,
            c.action_dim,
            &mut params,
            rng,
        )?;
        Ok(Self {
            config,
            gru,
            w_s,
            w_x,
            w_g,
            transition,
            params,
            optimizer: Adam::new(AdamConfig::default()),
            steps_taken: 0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// `h_0 = 0`, `x_0 = 0` for `batch` sequences. The initial action is zero
    /// as well (see [`ObsActionSeq::prev_action`]).
    pub fn filter_init(&self, batch: usize) -> FilterState {
        FilterState {
            h: Tensor::zeros(batch, self.config.hidden),
            x: Tensor::zeros(batch, self.config.latent_dim),
        }
    }

    /// Splits a `B x 2D` head output into a floored Gaussian.
    fn gaussian_head(g: &mut Graph, out: Var, d: usize) -> GaussVar {
        let mean = g.slice_cols(out, 0, d);
        let pre = g.slice_cols(out, d, 2 * d);
        let var = positive_variance(g, pre);
        GaussVar { mean, var }
    }

    /// One filter step on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn step_on(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        h_prev: Var,
        x_prev: Var,
        a_prev: Var,
        obs: Var,
        noise: Var,
    ) -> Result<StepVars> {
        let xa = g.concat_cols(&[x_prev, a_prev]);
        let hx = self.w_s.forward(g, params, xa)?;
        let h = self.gru.step(g, params, h_prev, obs)?;
        let sum = g.add(hx, h);
        let t = g.tanh(sum);
        let hc = g.scale(t, 0.5);
        let head = self.w_x.forward(g, params, hc)?;
        let q = Self::gaussian_head(g, head, self.config.latent_dim);
        let sd = g.sqrt(q.var);
        let eps = g.mul(sd, noise);
        let x = g.add(q.mean, eps);
        Ok(StepVars { h, hc, q, x })
    }

    pub fn decode_on(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<GaussVar> {
        let out = self.w_g.forward(g, params, x)?;
        Ok(Self::gaussian_head(g, out, self.config.obs_dim))
    }

    /// Decoder distribution for each row of `x`.
    pub fn decode(&self, x: &Tensor) -> Result<Vec<DiagGaussian>> {
        if x.cols() != self.config.latent_dim {
            return Err(Error::dim("decode input", self.config.latent_dim, x.cols()));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let k = self.decode_on(&mut g, &self.params, xv)?;
        Ok(k.to_dists(&g))
    }

    /// Transition input for a latent batch, appending the action when the
    /// transition is configured to condition on it.
    pub fn transition_input(&self, g: &mut Graph, x_prev: Var, a_prev: Var) -> Var {
        if self.config.transition.condition_on_action {
            g.concat_cols(&[x_prev, a_prev])
        } else {
            x_prev
        }
    }

    /// Transition prediction for each row of `x_prev` (and `a_prev` when the
    /// transition conditions on actions).
    pub fn predict_transition(
        &self,
        x_prev: &Tensor,
        a_prev: &Tensor,
    ) -> Result<Vec<DiagGaussian>> {
        let mut g = Graph::new();
        let xv = g.constant(x_prev.clone());
        let av = g.constant(a_prev.clone());
        let input = self.transition_input(&mut g, xv, av);
        let p = self.transition.predict(&mut g, &self.params, input)?;
        Ok(p.to_dists(&g))
    }

    /// Advances `state` by one observation. Returns the new state, the filter
    /// distribution `q_t` per row, and the combined hidden `h_c`.
    pub fn filter_step(
        &self,
        state: &FilterState,
        a_prev: &Tensor,
        obs: &Tensor,
        noise: &Tensor,
    ) -> Result<(FilterState, Vec<DiagGaussian>, Tensor)> {
        let c = &self.config;
        let b = state.h.rows();
        if obs.cols() != c.obs_dim || obs.rows() != b {
            return Err(Error::dim(
                "filter_step observation",
                format!("{b}x{}", c.obs_dim),
                format!("{:?}", obs.shape()),
            ));
        }
        if !obs.is_finite() {
            return Err(Error::Input("filter_step: non-finite observation".into()));
        }
        if a_prev.cols() != c.action_dim || a_prev.rows() != b {
            return Err(Error::dim(
                "filter_step action",
                format!("{b}x{}", c.action_dim),
                format!("{:?}", a_prev.shape()),
            ));
        }
        let mut g = Graph::new();
        let h = g.constant(state.h.clone());
        let x = g.constant(state.x.clone());
        let a = g.constant(a_prev.clone());
        let o = g.constant(obs.clone());
        let n = g.constant(noise.clone());
        let s = self.step_on(&mut g, &self.params, h, x, a, o, n)?;
        let next = FilterState {
            h: g.value(s.h).clone(),
            x: g.value(s.x).clone(),
        };
        Ok((next, s.q.to_dists(&g), g.value(s.hc).clone()))
    }

    /// Standard-normal noise rows for one filter step.
    pub fn sample_noise(&self, rows: usize, rng: &mut impl Rng) -> Tensor {
        let l = self.config.latent_dim;
        Tensor::new(
            rows,
            l,
            (0..rows * l).map(|_| rng.sample(StandardNormal)).collect(),
        )
    }

    /// Runs the filter over a whole sequence, starting from
    /// [`Gssm::filter_init`] and feeding the previous action at every step.
    pub fn filter_trajectory(
        &self,
        seq: &ObsActionSeq,
        rng: &mut impl Rng,
    ) -> Result<LatentTrajectory> {
        let mut out = self.filter_batch(std::slice::from_ref(seq), &mut [rng])?;
        Ok(out.remove(0))
    }

    /// Filters several sequences at once (rows of one batch). Sequence `k`
    /// draws its sampling noise from `rngs[k]`, so the result for a sequence
    /// does not depend on what it is batched with.
    pub fn filter_batch<R: Rng>(
        &self,
        seqs: &[ObsActionSeq],
        rngs: &mut [R],
    ) -> Result<Vec<LatentTrajectory>> {
        if seqs.is_empty() || seqs.iter().any(ObsActionSeq::is_empty) {
            return Err(Error::Input("filter_trajectory: empty trajectory".into()));
        }
        assert_eq!(seqs.len(), rngs.len(), "one rng per sequence");
        let packed = PackedBatch::pack(seqs, &self.config)?;
        let noise = packed.draw_noise(self.config.latent_dim, rngs);
        let mut g = Graph::new();
        let steps = self.unroll(&mut g, &self.params, &packed, &noise)?;
        let mut out: Vec<LatentTrajectory> = seqs
            .iter()
            .map(|s| LatentTrajectory {
                steps: Vec::with_capacity(s.len()),
                reconstructions: Vec::with_capacity(s.len()),
            })
            .collect();
        for (t, s) in steps.iter().enumerate() {
            let k = self.decode_on(&mut g, &self.params, s.x)?;
            let qs = s.q.to_dists(&g);
            let ks = k.to_dists(&g);
            let (xv, hv) = (g.value(s.x), g.value(s.h));
            for (row, seq) in seqs.iter().enumerate() {
                if t >= seq.len() {
                    continue;
                }
                let x = xv.row_slice(row).to_vec();
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "filter produced non-finite latent at step {t}"
                    )));
                }
                out[row].steps.push(LatentStep {
                    observation: seq.observations[t].clone(),
                    action: seq.actions.get(t).cloned(),
                    q: qs[row].clone(),
                    x,
                    h: hv.row_slice(row).to_vec(),
                });
                out[row].reconstructions.push(ks[row].clone());
            }
        }
        Ok(out)
    }

    /// Unrolls the filter over a packed batch on the tape.
    pub fn unroll(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        batch: &PackedBatch,
        noise: &[Tensor],
    ) -> Result<Vec<StepVars>> {
        let init = self.filter_init(batch.rows());
        let mut h = g.constant(init.h);
        let mut x = g.constant(init.x);
        let mut steps = Vec::with_capacity(batch.len());
        for t in 0..batch.len() {
            let a = g.constant(batch.prev_actions[t].clone());
            let o = g.constant(batch.observations[t].clone());
            let n = g.constant(noise[t].clone());
            let s = self
                .step_on(g, params, h, x, a, o, n)
                .map_err(|e| Error::Input(format!("filter step {t}: {e}")))?;
            h = s.h;
            x = s.x;
            steps.push(s);
        }
        Ok(steps)
    }
}
