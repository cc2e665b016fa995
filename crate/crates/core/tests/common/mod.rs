//! Finite-difference and closed-form checks shared by the gradient suite and
//! the acceptance run.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rlgssm::arm::activation_step;
use rlgssm::benchmarks::{log_marginal_likelihood, se_kernel, GpHyper};
use rlgssm::gssm::ObsActionSeq;
use rlgssm::gssm::{kl_diag_gaussians, nll_rows, DiagGaussian, Gssm, GssmConfig, PackedBatch};
use rlgssm::nn::{finite_diff_check, Activation, Graph, Gru, Mlp, ParameterSet, Tensor, Var};
use rlgssm::sac::{Batch, SacAgent, SacConfig};
use rlgssm::transitions::{Transition, TransitionConfig, TransitionKind};
use rlgssm::Result;

pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value < self.limit
    }
}

const EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
const MAX_PARAMS: usize = 1000;

fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
}

/// Worst relative error of the tape gradient of `loss` over every trainable
/// scalar in `params`. Parameters are jittered first: zero-initialised biases
/// can put relu inputs exactly on the kink, where the check means nothing.
fn grad_error<F>(name: &str, params: &ParameterSet, loss: F) -> Check
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let names: Vec<String> = params.trainable_names().cloned().collect();
    for k in &names {
        for v in params.get_mut(k).unwrap().data_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let params = &params;
    let n = params
        .trainable_names()
        .map(|k| params.get(k).unwrap().len())
        .sum::<usize>();
    assert!(n > 0 && n <= MAX_PARAMS, "{name}: {n} trainable scalars");
    let err = finite_diff_check(
        |p| {
            let mut g = Graph::new();
            let l = loss(&mut g, p)?;
            Ok((g.value(l).item(), g.backward(l)?))
        },
        params,
        EPS,
    )
    .unwrap();
    Check {
        name: format!("{name} ({n} params)"),
        value: err,
        limit: GRAD_TOL,
    }
}

fn sq_loss(g: &mut Graph, out: Var, target: &Tensor) -> Var {
    let t = g.constant(target.clone());
    let d = g.sub(out, t);
    let d2 = g.square(d);
    g.mean(d2)
}

fn tiny_gssm(kind: TransitionKind, seed: u64) -> Gssm {
    let config = GssmConfig {
        obs_dim: 2,
        action_dim: 1,
        latent_dim: 2,
        hidden: 4,
        ws_hidden: 4,
        wx_hidden: 4,
        wg_hidden: 4,
        transition: TransitionConfig {
            kind,
            members: 2,
            member_hidden: 4,
            gated_hidden: 4,
            regression_weight: 0.0,
            ..TransitionConfig::default()
        },
    };
    Gssm::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn sequences(rng: &mut ChaCha8Rng) -> Vec<ObsActionSeq> {
    (0..2)
        .map(|_| ObsActionSeq {
            observations: (0..10)
                .map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)])
                .collect(),
            actions: (0..10).map(|_| vec![rng.gen_range(0.0..1.0)]).collect(),
        })
        .collect()
}

pub fn gradient_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();

    use Activation::*;
    let mlp = Mlp::new("m", &[3, 6, 6, 6, 2], &[Tanh, Relu, Sigmoid, Softplus]);
    let mut p = ParameterSet::new();
    mlp.init(&mut p, &mut rng, true);
    let (x, y) = (rand_tensor(5, 3, &mut rng), rand_tensor(5, 2, &mut rng));
    out.push(grad_error("mlp", &p, |g, p| {
        let xv = g.constant(x.clone());
        let o = mlp.forward(g, p, xv)?;
        Ok(sq_loss(g, o, &y))
    }));

    let gru = Gru::new("gru", 3, 5);
    let mut p = ParameterSet::new();
    gru.init(&mut p, &mut rng);
    let xs: Vec<Tensor> = (0..4).map(|_| rand_tensor(2, 3, &mut rng)).collect();
    let w = rand_tensor(2, 5, &mut rng);
    out.push(grad_error("gru, 4 steps", &p, |g, p| {
        let mut h = g.constant(Tensor::zeros(2, 5));
        for x in &xs {
            let xv = g.constant(x.clone());
            h = gru.step(g, p, h, xv)?;
        }
        let wv = g.constant(w.clone());
        let s = g.mul(h, wv);
        Ok(g.sum(s))
    }));

    for kind in [TransitionKind::Gated, TransitionKind::Ensemble] {
        let cfg = TransitionConfig {
            kind,
            members: 3,
            member_hidden: 6,
            gated_hidden: 6,
            ..TransitionConfig::default()
        };
        let mut p = ParameterSet::new();
        let t = Transition::build(&cfg, "t", 2, 0, &mut p, &mut rng).unwrap();
        let (x, y) = (rand_tensor(6, 2, &mut rng), rand_tensor(6, 2, &mut rng));
        let label = match kind {
            TransitionKind::Gated => "gated transition",
            TransitionKind::Ensemble => "ensemble predictive",
        };
        out.push(grad_error(label, &p, |g, p| {
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let d = t.predict(g, p, xv)?;
            let nll = nll_rows(g, d, yv);
            Ok(g.sum(nll))
        }));
        if let Transition::Ensemble(ens) = &t {
            let masks = ens.bootstrap_masks(6, &mut rng);
            out.push(grad_error("ensemble members, regression", &p, |g, p| {
                let xv = g.constant(x.clone());
                let yv = g.constant(y.clone());
                ens.regression_loss(g, p, xv, yv, &masks)
            }));
        }
    }

    let cfg = SacConfig {
        hidden: vec![8, 8],
        ..SacConfig::default()
    };
    let agent = SacAgent::new(cfg, 3, 2, &mut rng).unwrap();
    let states = rand_tensor(4, 3, &mut rng);
    let eps = rand_tensor(4, 2, &mut rng);
    let mut actor_only = agent.params.clone();
    let names: Vec<String> = actor_only.names().cloned().collect();
    for n in &names {
        if !n.starts_with("actor.") {
            actor_only.set_trainable(n, false);
        }
    }
    out.push(grad_error("actor", &actor_only, |g, p| {
        Ok(agent.actor_loss_on(g, p, &states, &eps, 0.3)?.0)
    }));
    let batch = Batch {
        states: states.clone(),
        actions: Tensor::new(4, 2, (0..8).map(|_| rng.gen_range(0.05..0.95)).collect()),
        rewards: rand_tensor(4, 1, &mut rng),
        next_states: rand_tensor(4, 3, &mut rng),
        terminals: Tensor::zeros(4, 1),
    };
    let y = rand_tensor(4, 1, &mut rng);
    let mut critics_only = agent.params.clone();
    for n in &names {
        if !(n.starts_with("q1.") || n.starts_with("q2.")) {
            critics_only.set_trainable(n, false);
        }
    }
    out.push(grad_error("critics", &critics_only, |g, p| {
        agent.critic_loss_on(g, p, &batch, &y)
    }));

    for (kind, label) in [
        (TransitionKind::Gated, "filter unroll, 10 steps, gated"),
        (
            TransitionKind::Ensemble,
            "filter unroll, 10 steps, ensemble",
        ),
    ] {
        let model = tiny_gssm(kind, 7);
        let seqs = sequences(&mut rng);
        let packed = PackedBatch::pack(&seqs, &model.config).unwrap();
        let noise: Vec<Tensor> = (0..10).map(|_| rand_tensor(2, 2, &mut rng)).collect();
        out.push(grad_error(label, &model.params, |g, p| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            Ok(model.loss_on(g, p, &packed, &noise, 0.7, &mut r)?.total)
        }));
    }
    out
}

/// Monte-Carlo KL, activation closed form, GP evidence and ensemble moments.
pub fn oracle_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let p = DiagGaussian::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
    let q = DiagGaussian::new(vec![-0.2, 0.5], vec![1.5, 1.0]).unwrap();
    let n = 100_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let x: Vec<f64> = (0..2)
            .map(|d| p.mean[d] + p.variance[d].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        acc += p.log_pdf(&x) - q.log_pdf(&x);
    }
    let exact = kl_diag_gaussians(&p, &q).unwrap();
    out.push(Check {
        name: "kl vs monte carlo, relative".into(),
        value: ((acc / n as f64 - exact) / exact).abs(),
        limit: 0.01,
    });

    let mut worst: f64 = 0.0;
    for i in 0..=20 {
        for j in 0..=20 {
            for dt in [1e-3, 0.01, 0.1, 1.0] {
                let (a, e) = (i as f64 / 20.0, j as f64 / 20.0);
                let exact = e + (a - e) * (-dt / 0.1f64).exp();
                worst = worst.max((activation_step(a, e, 0.1, dt).unwrap() - exact).abs());
            }
        }
    }
    out.push(Check {
        name: "activation step vs exponential".into(),
        value: worst,
        limit: 1e-12,
    });

    let xs: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| x.sin() + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut worst: f64 = 0.0;
    for h in [
        GpHyper {
            lengthscale: 0.7,
            signal_var: 1.3,
            noise_var: 0.01,
        },
        GpHyper {
            lengthscale: 2.0,
            signal_var: 0.5,
            noise_var: 0.1,
        },
    ] {
        let k = DMatrix::from_fn(40, 40, |i, j| {
            se_kernel(xs[i], xs[j], &h) + if i == j { h.noise_var } else { 0.0 }
        });
        let y = DVector::from_column_slice(&ys);
        let lu = k.clone().lu();
        let sol = lu.solve(&y).unwrap();
        let dense = -0.5 * y.dot(&sol)
            - 0.5 * lu.determinant().ln()
            - 20.0 * (2.0 * std::f64::consts::PI).ln();
        worst = worst.max((log_marginal_likelihood(&xs, &ys, &h).unwrap() - dense).abs());
    }
    out.push(Check {
        name: "gp log marginal likelihood vs dense solve".into(),
        value: worst,
        limit: 1e-8,
    });

    let cfg = TransitionConfig {
        members: 5,
        member_hidden: 8,
        ..TransitionConfig::default()
    };
    let mut params = ParameterSet::new();
    let t = Transition::build(&cfg, "e", 3, 0, &mut params, &mut rng).unwrap();
    let x = rand_tensor(7, 3, &mut rng);
    let pred = t.predict_rows(&params, &x).unwrap();
    let Transition::Ensemble(ens) = &t else {
        unreachable!()
    };
    let mut worst: f64 = 0.0;
    let members: Vec<Tensor> = ens
        .members
        .iter()
        .map(|m| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let o = m.forward(&mut g, &params, xv).unwrap();
            g.value(o).clone()
        })
        .collect();
    for r in 0..7 {
        for d in 0..3 {
            let v: Vec<f64> = members.iter().map(|m| m.get(r, d)).collect();
            let mean = v.iter().sum::<f64>() / 5.0;
            let var = v.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / 4.0;
            worst = worst
                .max((pred[r].mean[d] - mean).abs())
                .max((pred[r].variance[d] - var.max(rlgssm::gssm::VARIANCE_FLOOR)).abs());
        }
    }
    out.push(Check {
        name: "ensemble moments vs direct".into(),
        value: worst,
        limit: 1e-12,
    });
    out
}
