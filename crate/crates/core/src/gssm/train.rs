use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{kl_rows, nll_rows, Gssm, GssmConfig, ObsActionSeq};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, Graph, ParameterSet, Tensor, Var};
use crate::transitions::Transition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GssmTrainConfig {
    /// Gradient steps per call to [`train_gssm`].
    pub steps: usize,
    pub lr: f64,
    /// Weight λ of the KL term.
    pub kl_weight: f64,
    /// Fraction of `planned_steps` over which λ ramps linearly from 0.
    pub warmup_frac: f64,
    /// Total steps planned across all calls; 0 means "this call's steps".
    pub planned_steps: usize,
    pub clip_norm: f64,
    /// Sequences per gradient step; 0 uses the whole batch.
    pub batch_size: usize,
}

impl Default for GssmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 1e-3,
            kl_weight: 1.0,
            warmup_frac: 0.2,
            planned_steps: 0,
            clip_norm: 10.0,
            batch_size: 16,
        }
    }
}

impl GssmTrainConfig {
    /// λ at global step `step` under the linear warm-up.
    pub fn kl_weight_at(&self, step: u64) -> f64 {
        let planned = if self.planned_steps == 0 {
            self.steps
        } else {
            self.planned_steps
        };
        let warm = (self.warmup_frac * planned as f64).round();
        if warm <= 0.0 {
            self.kl_weight
        } else {
            self.kl_weight * ((step as f64 + 1.0) / warm).min(1.0)
        }
    }
}

/// Sequences padded to a common length, stored time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub observations: Vec<Tensor>,
    pub prev_actions: Vec<Tensor>,
    /// `B x 1` per step: 1 where the row is still inside its sequence.
    pub masks: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

impl PackedBatch {
    pub fn pack(seqs: &[ObsActionSeq], config: &GssmConfig) -> Result<Self> {
        let b = seqs.len();
        let t_max = seqs.iter().map(ObsActionSeq::len).max().unwrap_or(0);
        let (od, ad) = (config.obs_dim, config.action_dim);
        let mut observations = Vec::with_capacity(t_max);
        let mut prev_actions = Vec::with_capacity(t_max);
        let mut masks = Vec::with_capacity(t_max);
        for (k, s) in seqs.iter().enumerate() {
            if s.actions.len() + 1 < s.len() {
                return Err(Error::Input(format!(
                    "sequence {k}: {} actions for {} observations",
                    s.actions.len(),
                    s.len()
                )));
            }
        }
        for t in 0..t_max {
            let mut o = Tensor::zeros(b, od);
            let mut a = Tensor::zeros(b, ad);
            let mut m = Tensor::zeros(b, 1);
            for (r, s) in seqs.iter().enumerate() {
                if t >= s.len() {
                    continue;
                }
                let obs = &s.observations[t];
                if obs.len() != od {
                    return Err(Error::dim(
                        format!("sequence {r} observation {t}"),
                        od,
                        obs.len(),
                    ));
                }
                if !obs.iter().all(|v| v.is_finite()) {
                    return Err(Error::Input(format!(
                        "sequence {r}: non-finite observation at step {t}"
                    )));
                }
                o.data_mut()[r * od..(r + 1) * od].copy_from_slice(obs);
                let pa = s.prev_action(t, ad);
                if pa.len() != ad {
                    return Err(Error::dim(format!("sequence {r} action {t}"), ad, pa.len()));
                }
                a.data_mut()[r * ad..(r + 1) * ad].copy_from_slice(&pa);
                m.set(r, 0, 1.0);
            }
            observations.push(o);
            prev_actions.push(a);
            masks.push(m);
        }
        Ok(Self {
            observations,
            prev_actions,
            masks,
            lengths: seqs.iter().map(ObsActionSeq::len).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Noise for every step, row `k` drawn from `rngs[k]` in time order.
    pub fn draw_noise<R: Rng>(&self, latent: usize, rngs: &mut [R]) -> Vec<Tensor> {
        let b = self.rows();
        let mut noise = vec![Tensor::zeros(b, latent); self.len()];
        for (r, rng) in rngs.iter_mut().enumerate() {
            for n in noise.iter_mut().take(self.lengths[r]) {
                for d in 0..latent {
                    n.set(r, d, rng.sample(StandardNormal));
                }
            }
        }
        noise
    }
}

/// Loss terms of one evaluation, already averaged over the batch.
#[derive(Clone, Copy, Debug)]
pub struct GssmLoss {
    pub total: Var,
    pub nll: Var,
    pub kl: Option<Var>,
    pub regression: Option<Var>,
}

impl Gssm {
    /// Builds `(l_NLL + λ·l_KL)/B` plus the ensemble regression term on the tape.
    ///
    /// With λ = 0 the KL path is not built at all, so the transition receives
    /// no gradient from it.
    pub fn loss_on<R: Rng>(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        batch: &PackedBatch,
        noise: &[Tensor],
        kl_weight: f64,
        rng: &mut R,
    ) -> Result<GssmLoss> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let inv_b = 1.0 / batch.rows() as f64;
        let steps = self.unroll(g, params, batch, noise)?;
        let mut nll_acc: Option<Var> = None;
        let mut kl_acc: Option<Var> = None;
        let mut reg_pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for (t, s) in steps.iter().enumerate() {
            let mask = g.constant(batch.masks[t].clone());
            let o = g.constant(batch.observations[t].clone());
            let k = self.decode_on(g, params, s.x)?;
            let nll = nll_rows(g, k, o);
            let nll = g.mul(nll, mask);
            let nll = g.sum(nll);
            nll_acc = Some(match nll_acc {
                None => nll,
                Some(acc) => g.add(acc, nll),
            });
            if t == 0 {
                continue;
            }
            let x_prev = steps[t - 1].x;
            if kl_weight > 0.0 {
                let a_prev = g.constant(batch.prev_actions[t].clone());
                let input = self.transition_input(g, x_prev, a_prev);
                let p = self.transition.predict(g, params, input)?;
                let kl = kl_rows(g, s.q, p);
                let kl = g.mul(kl, mask);
                let kl = g.sum(kl);
                kl_acc = Some(match kl_acc {
                    None => kl,
                    Some(acc) => g.add(acc, kl),
                });
            }
            if matches!(self.transition, Transition::Ensemble(_))
                && self.config.transition.regression_weight > 0.0
            {
                let (xp, xn) = (g.value(x_prev), g.value(s.x));
                for r in 0..batch.rows() {
                    if batch.masks[t].get(r, 0) > 0.0 {
                        let mut input = xp.row_slice(r).to_vec();
                        if self.config.transition.condition_on_action {
                            input.extend_from_slice(batch.prev_actions[t].row_slice(r));
                        }
                        reg_pairs.push((input, xn.row_slice(r).to_vec()));
                    }
                }
            }
        }
        let nll = g.scale(nll_acc.expect("nonempty"), inv_b);
        let mut total = nll;
        let kl = kl_acc.map(|kl| g.scale(kl, inv_b));
        if let Some(kl) = kl {
            let weighted = g.scale(kl, kl_weight);
            total = g.add(total, weighted);
        }
        let mut regression = None;
        if let (Transition::Ensemble(ens), false) = (&self.transition, reg_pairs.is_empty()) {
            let xs = Tensor::from_rows(&reg_pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
            let ys = Tensor::from_rows(&reg_pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>());
            let masks = ens.bootstrap_masks(xs.rows(), rng);
            let xv = g.constant(xs);
            let yv = g.constant(ys);
            let reg = ens.regression_loss(g, params, xv, yv, &masks)?;
            let weighted = g.scale(reg, self.config.transition.regression_weight);
            total = g.add(total, weighted);
            regression = Some(reg);
        }
        Ok(GssmLoss {
            total,
            nll,
            kl,
            regression,
        })
    }
}

/// Trains filter, decoder and transition jointly on `trajectories` by BPTT
/// through the unrolled filter. Returns the total loss of every step.
pub fn train_gssm<R: Rng>(
    model: &mut Gssm,
    trajectories: &[ObsActionSeq],
    hyper: &GssmTrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if trajectories.is_empty() || trajectories.iter().any(ObsActionSeq::is_empty) {
        return Err(Error::Input("train_gssm: empty trajectory batch".into()));
    }
    if hyper.kl_weight < 0.0 {
        return Err(Error::Config(format!(
            "kl_weight must be >= 0, got {}",
            hyper.kl_weight
        )));
    }
    model.optimizer.config.lr = hyper.lr;
    let n = trajectories.len();
    let bs = if hyper.batch_size == 0 {
        n
    } else {
        hyper.batch_size.min(n)
    };
    let mut history = Vec::with_capacity(hyper.steps);
    for _ in 0..hyper.steps {
        let picked: Vec<ObsActionSeq> = if bs == n {
            trajectories.to_vec()
        } else {
            rand::seq::index::sample(rng, n, bs)
                .into_iter()
                .map(|i| trajectories[i].clone())
                .collect()
        };
        let batch = PackedBatch::pack(&picked, &model.config)?;
        let mut noise_rngs: Vec<rand_chacha::ChaCha8Rng> = (0..bs)
            .map(|_| rand::SeedableRng::seed_from_u64(rng.gen()))
            .collect();
        let noise = batch.draw_noise(model.config.latent_dim, &mut noise_rngs);
        let lambda = hyper.kl_weight_at(model.steps_taken);
        let mut g = Graph::new();
        let loss = model.loss_on(&mut g, &model.params, &batch, &noise, lambda, rng)?;
        let value = g.value(loss.total).item();
        let mut grads = g.backward(loss.total)?;
        let norm = clip_global_norm(&mut grads, hyper.clip_norm);
        if !value.is_finite() || !norm.is_finite() {
            return Err(Error::Training(format!(
                "gssm loss {value} at step {} (lambda {lambda}, grad norm {norm})",
                model.steps_taken
            )));
        }
        model.optimizer.step(&mut model.params, &grads)?;
        model.steps_taken += 1;
        history.push(value);
    }
    Ok(history)
}
