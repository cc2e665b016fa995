use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// Lower bound applied to every predicted variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian over a vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::dim("DiagGaussian", mean.len(), variance.len()));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    /// Log density of `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.variance)
            .zip(x)
            .map(|((m, v), x)| -0.5 * ((2.0 * PI * v).ln() + (x - m).powi(2) / v))
            .sum()
    }

    /// Splits the rows of batched mean/variance tensors into one Gaussian per row.
    pub fn from_rows(mean: &Tensor, variance: &Tensor) -> Vec<DiagGaussian> {
        (0..mean.rows())
            .map(|r| DiagGaussian {
                mean: mean.row_slice(r).to_vec(),
                variance: variance.row_slice(r).to_vec(),
            })
            .collect()
    }
}

/// Batched diagonal Gaussian on a tape: `mean` and `var` are `B x D` nodes.
#[derive(Clone, Copy, Debug)]
pub struct GaussVar {
    pub mean: Var,
    pub var: Var,
}

impl GaussVar {
    pub fn to_dists(self, g: &Graph) -> Vec<DiagGaussian> {
        DiagGaussian::from_rows(g.value(self.mean), g.value(self.var))
    }
}

fn check_floor(context: &str, v: &[f64]) -> Result<()> {
    if let Some(bad) = v.iter().find(|&&x| !(x >= VARIANCE_FLOOR * (1.0 - 1e-12))) {
        return Err(Error::Contract(format!(
            "{context}: variance {bad} below floor {VARIANCE_FLOOR}"
        )));
    }
    Ok(())
}

/// `KL[p ‖ q]` for diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussians(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dim("kl_diag_gaussians", p.dim(), q.dim()));
    }
    check_floor("kl p", &p.variance)?;
    check_floor("kl q", &q.variance)?;
    Ok((0..p.dim())
        .map(|d| {
            let (mp, vp, mq, vq) = (p.mean[d], p.variance[d], q.mean[d], q.variance[d]);
            0.5 * ((vq / vp).ln() + (vp + (mp - mq).powi(2)) / vq - 1.0)
        })
        .sum())
}

/// Negative log-likelihood of `observations[t]` under `k_dists[t]`, summed
/// over time and dimensions.
pub fn likelihood_loss(k_dists: &[DiagGaussian], observations: &[Vec<f64>]) -> Result<f64> {
    if k_dists.len() != observations.len() {
        return Err(Error::Contract(format!(
            "likelihood_loss: {} distributions for {} observations",
            k_dists.len(),
            observations.len()
        )));
    }
    let mut total = 0.0;
    for (k, o) in k_dists.iter().zip(observations) {
        if k.dim() != o.len() {
            return Err(Error::dim("likelihood_loss", k.dim(), o.len()));
        }
        check_floor("likelihood_loss", &k.variance)?;
        total -= k.log_pdf(o);
    }
    Ok(total)
}

/// `Σ_t KL[filter_t ‖ transition_t]` over the steps that have a transition
/// prediction (the first filter step has none and is not passed in).
pub fn kl_loss(filter_dists: &[DiagGaussian], transition_dists: &[DiagGaussian]) -> Result<f64> {
    if filter_dists.len() != transition_dists.len() {
        return Err(Error::Contract(format!(
            "kl_loss: {} filter steps vs {} transition steps",
            filter_dists.len(),
            transition_dists.len()
        )));
    }
    filter_dists
        .iter()
        .zip(transition_dists)
        .map(|(q, p)| kl_diag_gaussians(q, p))
        .sum()
}

/// Per-row Gaussian NLL on the tape, `B x 1`.
pub fn nll_rows(g: &mut Graph, dist: GaussVar, obs: Var) -> Var {
    let diff = g.sub(obs, dist.mean);
    let sq = g.square(diff);
    let ratio = g.div(sq, dist.var);
    let logv = g.ln(dist.var);
    let s = g.add(logv, ratio);
    let s = g.add_scalar(s, (2.0 * PI).ln());
    let s = g.scale(s, 0.5);
    g.sum_cols(s)
}

/// Per-row `KL[p ‖ q]` on the tape, `B x 1`.
pub fn kl_rows(g: &mut Graph, p: GaussVar, q: GaussVar) -> Var {
    let log_ratio = {
        let lq = g.ln(q.var);
        let lp = g.ln(p.var);
        g.sub(lq, lp)
    };
    let diff = g.sub(p.mean, q.mean);
    let sq = g.square(diff);
    let num = g.add(p.var, sq);
    let frac = g.div(num, q.var);
    let s = g.add(log_ratio, frac);
    let s = g.add_scalar(s, -1.0);
    let s = g.scale(s, 0.5);
    g.sum_cols(s)
}

/// `softplus(pre) + floor`, the variance head used throughout.
pub fn positive_variance(g: &mut Graph, pre: Var) -> Var {
    let sp = g.softplus(pre);
    g.clamp_min(sp, VARIANCE_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn g1(m: f64, v: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![v]).unwrap()
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = DiagGaussian::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        assert_eq!(kl_diag_gaussians(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        assert!((kl_diag_gaussians(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_width_mismatch_is_dimension_error() {
        let p = DiagGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            kl_diag_gaussians(&p, &g1(0.0, 1.0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = DiagGaussian::new(vec![0.2, -0.5, 1.0], vec![0.8, 0.3, 1.5]).unwrap();
        let q = DiagGaussian::new(vec![-0.1, 0.4, 0.5], vec![1.2, 0.5, 1.0]).unwrap();
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x: Vec<f64> = (0..3)
                .map(|d| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    p.mean[d] + p.variance[d].sqrt() * e
                })
                .collect();
            acc += p.log_pdf(&x) - q.log_pdf(&x);
        }
        let mc = acc / n as f64;
        let exact = kl_diag_gaussians(&p, &q).unwrap();
        assert!(((mc - exact) / exact).abs() < 0.01, "mc {mc} exact {exact}");
    }

    #[test]
    fn nll_at_zero_residual_is_half_log_two_pi_per_entry() {
        let (t_len, d) = (7, 3);
        let dists = vec![DiagGaussian::new(vec![1.0; d], vec![1.0; d]).unwrap(); t_len];
        let obs = vec![vec![1.0; d]; t_len];
        let loss = likelihood_loss(&dists, &obs).unwrap();
        let expected = (t_len * d) as f64 * 0.5 * (2.0 * PI).ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_independent_density_and_is_monotone_in_residual() {
        // closed-form standard normal log-density evaluated by hand
        let pdf = |x: f64, m: f64| (-(x - m) * (x - m) / 2.0).exp() / (2.0 * PI).sqrt();
        let o = vec![vec![0.7, -0.2]];
        for residual in [0.1, 0.2, 0.4] {
            let k = vec![
                DiagGaussian::new(vec![0.7 - residual, -0.2 + residual], vec![1.0, 1.0]).unwrap(),
            ];
            let oracle = -(pdf(0.7, 0.7 - residual).ln() + pdf(-0.2, -0.2 + residual).ln());
            assert!((likelihood_loss(&k, &o).unwrap() - oracle).abs() < 1e-12);
        }
        let far = vec![g1(0.0, 1.0)];
        let near = vec![g1(0.5, 1.0)];
        let obs = vec![vec![1.0]];
        assert!(likelihood_loss(&near, &obs).unwrap() < likelihood_loss(&far, &obs).unwrap());
    }

    #[test]
    fn sub_floor_variance_is_rejected() {
        let k = vec![g1(0.0, 1e-9)];
        assert!(matches!(
            likelihood_loss(&k, &[vec![0.0]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kl_loss_is_additive_and_reduces_to_single_term() {
        let qs = vec![g1(0.0, 1.0), g1(0.5, 0.4), g1(-1.0, 2.0)];
        let ps = vec![g1(0.1, 0.9), g1(0.0, 1.0), g1(-0.5, 1.0)];
        let whole = kl_loss(&qs, &ps).unwrap();
        let parts = kl_loss(&qs[..1], &ps[..1]).unwrap() + kl_loss(&qs[1..], &ps[1..]).unwrap();
        assert!((whole - parts).abs() < 1e-14);
        assert_eq!(
            kl_loss(&qs[..1], &ps[..1]).unwrap(),
            kl_diag_gaussians(&qs[0], &ps[0]).unwrap()
        );
        assert_eq!(kl_loss(&qs, &qs).unwrap(), 0.0);
        assert!(kl_loss(&qs, &ps[..2]).is_err());
    }

    #[test]
    fn tape_kl_and_nll_agree_with_plain_versions() {
        let p = DiagGaussian::new(vec![0.2, -0.5], vec![0.8, 0.3]).unwrap();
        let q = DiagGaussian::new(vec![-0.1, 0.4], vec![1.2, 0.5]).unwrap();
        let mut g = Graph::new();
        let pv = GaussVar {
            mean: g.constant(Tensor::row(&p.mean)),
            var: g.constant(Tensor::row(&p.variance)),
        };
        let qv = GaussVar {
            mean: g.constant(Tensor::row(&q.mean)),
            var: g.constant(Tensor::row(&q.variance)),
        };
        let kl = kl_rows(&mut g, pv, qv);
        assert!((g.value(kl).item() - kl_diag_gaussians(&p, &q).unwrap()).abs() < 1e-14);
        let o = g.constant(Tensor::row(&[0.3, 0.3]));
        let nll = nll_rows(&mut g, pv, o);
        let plain = likelihood_loss(std::slice::from_ref(&p), &[vec![0.3, 0.3]]).unwrap();
        assert!((g.value(nll).item() - plain).abs() < 1e-14);
    }
}
