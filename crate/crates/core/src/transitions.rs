//! Latent transition models: the gated baseline and the randomized-prior
//! ensemble. Both predict a [`DiagGaussian`] over the next latent from the
//! previous latent and share one interface, [`Transition`].

use rand::Rng;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gssm::{positive_variance, DiagGaussian, GaussVar, VARIANCE_FLOOR};
use crate::nn::{Activation, Adam, AdamConfig, Graph, Mlp, ParameterSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionKind {
    Gated,
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionConfig {
    pub kind: TransitionKind,
    /// Appends the previous action to the transition input.
    pub condition_on_action: bool,
    pub members: usize,
    pub prior_scale: f64,
    pub member_hidden: usize,
    pub gated_hidden: usize,
    pub bootstrap_prob: f64,
    /// Weight of the per-update ensemble regression term inside GSSM training.
    pub regression_weight: f64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        Self {
            kind: TransitionKind::Ensemble,
            condition_on_action: false,
            members: 10,
            prior_scale: 1.0,
            member_hidden: 64,
            gated_hidden: 64,
            bootstrap_prob: 0.8,
            regression_weight: 1.0,
        }
    }
}

/// Gated transition:
/// `mean = (1 − g(x)) ⊙ L(x) + g(x) ⊙ m(x)`,
/// `var = softplus(V · relu(m(x)) + b) + floor`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedTransition {
    pub gate: Mlp,
    pub proposal: Mlp,
    pub linear: Mlp,
    pub variance: Mlp,
}

impl GatedTransition {
    pub fn new(prefix: &str, input: usize, latent: usize, hidden: usize) -> Self {
        use Activation::*;
        Self {
            gate: Mlp::uniform(
                format!("{prefix}.gate"),
                input,
                &[hidden],
                latent,
                Relu,
                Sigmoid,
            ),
            proposal: Mlp::uniform(
                format!("{prefix}.proposal"),
                input,
                &[hidden],
                latent,
                Relu,
                Identity,
            ),
            linear: Mlp::new(format!("{prefix}.linear"), &[input, latent], &[Identity]),
            variance: Mlp::new(format!("{prefix}.variance"), &[latent, latent], &[Identity]),
        }
    }

    fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) {
        self.gate.init(params, rng, true);
        self.proposal.init(params, rng, true);
        self.variance.init(params, rng, true);
        // the skip path starts as the identity map where widths allow
        let (input, latent) = (self.linear.input_width(), self.linear.output_width());
        let mut w = Tensor::zeros(input, latent);
        for i in 0..input.min(latent) {
            w.set(i, i, 1.0);
        }
        params.insert(self.linear.weight_name(0), w, true);
        params.insert(self.linear.bias_name(0), Tensor::zeros(1, latent), true);
    }

    pub fn predict(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<GaussVar> {
        let gate = self.gate.forward(g, params, x)?;
        let proposal = self.proposal.forward(g, params, x)?;
        let lin = self.linear.forward(g, params, x)?;
        // (1 − g)·L + g·m = L + g·(m − L)
        let delta = g.sub(proposal, lin);
        let gd = g.mul(gate, delta);
        let mean = g.add(lin, gd);
        let rp = g.relu(proposal);
        let vpre = self.variance.forward(g, params, rp)?;
        let var = positive_variance(g, vpre);
        Ok(GaussVar { mean, var })
    }
}

/// One trainable network plus a frozen prior network of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMember {
    pub trainable: Mlp,
    pub prior: Mlp,
    pub prior_scale: f64,
}

impl EnsembleMember {
    /// `trainable(x) + β·prior(x)`; the prior contributes no gradient.
    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let t = self.trainable.forward(g, params, x)?;
        if self.prior_scale == 0.0 {
            return Ok(t);
        }
        let p = self.prior.forward(g, params, x)?;
        let p = g.scale(p, self.prior_scale);
        Ok(g.add(t, p))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleTransition {
    pub members: Vec<EnsembleMember>,
    pub bootstrap_prob: f64,
}

impl EnsembleTransition {
    pub fn new(
        prefix: &str,
        input: usize,
        latent: usize,
        hidden: usize,
        members: usize,
        prior_scale: f64,
        bootstrap_prob: f64,
    ) -> Result<Self> {
        if members < 2 {
            return Err(Error::Config(format!(
                "ensemble needs at least 2 members, got {members}"
            )));
        }
        let net = |name: String| {
            Mlp::uniform(
                name,
                input,
                &[hidden],
                latent,
                Activation::Tanh,
                Activation::Identity,
            )
        };
        let members = (0..members)
            .map(|k| EnsembleMember {
                trainable: net(format!("{prefix}.m{k}.train")),
                prior: net(format!("{prefix}.m{k}.prior")),
                prior_scale,
            })
            .collect();
        Ok(Self {
            members,
            bootstrap_prob,
        })
    }

    fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) {
        for m in &self.members {
            m.trainable.init(params, rng, true);
            m.prior.init(params, rng, false);
        }
    }

    pub fn prior_params(&self, params: &ParameterSet) -> ParameterSet {
        let mut out = ParameterSet::new();
        for m in &self.members {
            out.extend(params.subset(&format!("{}.", m.prior.prefix)));
        }
        out
    }

    pub fn member_outputs(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Vec<Var>> {
        self.members
            .iter()
            .map(|m| m.forward(g, params, x))
            .collect()
    }

    /// Moment-matched Gaussian: member mean and unbiased member variance,
    /// floored.
    pub fn predict(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<GaussVar> {
        let k = self.members.len();
        if k < 2 {
            return Err(Error::Config(
                "ensemble prediction needs at least 2 members".into(),
            ));
        }
        let outs = self.member_outputs(g, params, x)?;
        let mut sum = outs[0];
        for &o in &outs[1..] {
            sum = g.add(sum, o);
        }
        let mean = g.scale(sum, 1.0 / k as f64);
        let mut ss = None;
        for &o in &outs {
            let d = g.sub(o, mean);
            let d2 = g.square(d);
            ss = Some(match ss {
                None => d2,
                Some(acc) => g.add(acc, d2),
            });
        }
        let var = g.scale(ss.expect("k >= 2"), 1.0 / (k - 1) as f64);
        let var = g.clamp_min(var, VARIANCE_FLOOR);
        Ok(GaussVar { mean, var })
    }

    /// Squared-error regression of every member onto `targets`, each member
    /// seeing only the rows its bootstrap mask keeps. Normalised by the total
    /// mask count.
    pub fn regression_loss(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        inputs: Var,
        targets: Var,
        masks: &[Tensor],
    ) -> Result<Var> {
        if masks.len() != self.members.len() {
            return Err(Error::Contract(format!(
                "{} bootstrap masks for {} members",
                masks.len(),
                self.members.len()
            )));
        }
        let count: f64 = masks.iter().map(Tensor::sum).sum::<f64>().max(1.0);
        let mut total = None;
        for (m, mask) in self.members.iter().zip(masks) {
            let out = m.forward(g, params, inputs)?;
            let d = g.sub(out, targets);
            let d2 = g.square(d);
            let per_row = g.sum_cols(d2);
            let mv = g.constant(mask.clone());
            let masked = g.mul(per_row, mv);
            let s = g.sum(masked);
            total = Some(match total {
                None => s,
                Some(acc) => g.add(acc, s),
            });
        }
        Ok(g.scale(total.expect("k >= 2"), 1.0 / count))
    }

    /// One Bernoulli(bootstrap_prob) keep-mask column per member over `rows`
    /// samples. A member whose mask keeps nothing is redrawn.
    pub fn bootstrap_masks(&self, rows: usize, rng: &mut impl Rng) -> Vec<Tensor> {
        let dist = Bernoulli::new(self.bootstrap_prob.clamp(0.0, 1.0)).expect("valid probability");
        self.members
            .iter()
            .map(|_| loop {
                let data: Vec<f64> = (0..rows)
                    .map(|_| f64::from(u8::from(dist.sample(rng))))
                    .collect();
                if rows == 0 || data.iter().any(|&v| v > 0.0) {
                    break Tensor::new(rows, 1, data);
                }
            })
            .collect()
    }
}

// Built once per model, so the size gap between variants is irrelevant.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Transition {
    Gated(GatedTransition),
    Ensemble(EnsembleTransition),
}

impl Transition {
    /// Builds the transition under `prefix` and initialises its parameters.
    pub fn build(
        config: &TransitionConfig,
        prefix: &str,
        latent: usize,
        action: usize,
        params: &mut ParameterSet,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input = latent
            + if config.condition_on_action {
                action
            } else {
                0
            };
        match config.kind {
            TransitionKind::Gated => {
                let t = GatedTransition::new(prefix, input, latent, config.gated_hidden);
                t.init(params, rng);
                Ok(Transition::Gated(t))
            }
            TransitionKind::Ensemble => {
                let t = EnsembleTransition::new(
                    prefix,
                    input,
                    latent,
                    config.member_hidden,
                    config.members,
                    config.prior_scale,
                    config.bootstrap_prob,
                )?;
                t.init(params, rng);
                Ok(Transition::Ensemble(t))
            }
        }
    }

    pub fn kind(&self) -> TransitionKind {
        match self {
            Transition::Gated(_) => TransitionKind::Gated,
            Transition::Ensemble(_) => TransitionKind::Ensemble,
        }
    }

    pub fn predict(&self, g: &mut Graph, params: &ParameterSet, input: Var) -> Result<GaussVar> {
        match self {
            Transition::Gated(t) => t.predict(g, params, input),
            Transition::Ensemble(t) => t.predict(g, params, input),
        }
    }

    /// Prediction for each row of `input`, off the tape.
    pub fn predict_rows(&self, params: &ParameterSet, input: &Tensor) -> Result<Vec<DiagGaussian>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let out = self.predict(&mut g, params, x)?;
        Ok(out.to_dists(&g))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for EnsembleTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            batch_size: 64,
        }
    }
}

/// Standalone regression of the ensemble onto `(x_prev, x_next)` pairs.
/// Each member gets a fixed bootstrap mask over the dataset; priors stay
/// untouched. Returns the per-step loss.
pub fn train_ensemble(
    ens: &EnsembleTransition,
    params: &mut ParameterSet,
    dataset: &[(Vec<f64>, Vec<f64>)],
    hyper: &EnsembleTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Input("train_ensemble: empty dataset".into()));
    }
    let n = dataset.len();
    let masks = ens.bootstrap_masks(n, rng);
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut history = Vec::with_capacity(hyper.steps);
    let bs = hyper.batch_size.clamp(1, n);
    for _ in 0..hyper.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..n)).collect();
        let xs = Tensor::from_rows(
            &idx.iter()
                .map(|&i| dataset[i].0.clone())
                .collect::<Vec<_>>(),
        );
        let ys = Tensor::from_rows(
            &idx.iter()
                .map(|&i| dataset[i].1.clone())
                .collect::<Vec<_>>(),
        );
        let batch_masks: Vec<Tensor> = masks
            .iter()
            .map(|m| Tensor::new(bs, 1, idx.iter().map(|&i| m.data()[i]).collect()))
            .collect();
        let mut g = Graph::new();
        let x = g.constant(xs);
        let y = g.constant(ys);
        let loss = ens.regression_loss(&mut g, params, x, y, &batch_masks)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "ensemble regression loss became {value}"
            )));
        }
        history.push(value);
        let grads = g.backward(loss)?;
        adam.step(params, &grads)?;
    }
    Ok(history)
}
