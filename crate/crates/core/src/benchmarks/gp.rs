//! Exact Gaussian-process regression with a squared-exponential kernel on
//! scalar inputs. Hyperparameters are picked from a grid by log marginal
//! likelihood.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gssm::DiagGaussian;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub lengthscale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpGrid {
    pub lengthscales: Vec<f64>,
    pub signal_vars: Vec<f64>,
    pub noise_vars: Vec<f64>,
}

impl Default for GpGrid {
    fn default() -> Self {
        Self {
            lengthscales: vec![0.1, 0.2, 0.5, 1.0, 2.0],
            signal_vars: vec![0.5, 1.0, 2.0],
            noise_vars: vec![1e-4, 1e-3, 1e-2],
        }
    }
}

impl GpGrid {
    pub fn candidates(&self) -> impl Iterator<Item = GpHyper> + '_ {
        self.lengthscales.iter().flat_map(move |&l| {
            self.signal_vars.iter().flat_map(move |&s| {
                self.noise_vars.iter().map(move |&n| GpHyper {
                    lengthscale: l,
                    signal_var: s,
                    noise_var: n,
                })
            })
        })
    }
}

pub fn se_kernel(a: f64, b: f64, h: &GpHyper) -> f64 {
    h.signal_var * (-(a - b).powi(2) / (2.0 * h.lengthscale * h.lengthscale)).exp()
}

/// Fitted GP with the factorisation of `K + σ_n²I` cached.
#[derive(Clone, Debug)]
pub struct GpModel {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub hyper: GpHyper,
    pub log_marginal_likelihood: f64,
    /// Diagonal jitter that was needed on top of the noise variance.
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn factorize(x: &[f64], h: &GpHyper) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| se_kernel(x[i], x[j], h));
    let mut jitter = 0.0;
    for attempt in 0..8 {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += h.noise_var + jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c, jitter));
        }
        jitter = 1e-10 * 10f64.powi(attempt + 1) * h.signal_var;
    }
    Err(Error::Numerical(format!(
        "kernel matrix not positive definite for {h:?} even with jitter {jitter:e}"
    )))
}

/// `log p(y | X, θ) = −½ yᵀ(K+σ²I)⁻¹y − ½ log|K+σ²I| − n/2 log 2π`.
pub fn log_marginal_likelihood(x: &[f64], y: &[f64], hyper: &GpHyper) -> Result<f64> {
    Ok(GpModel::with_hyper(x, y, *hyper)?.log_marginal_likelihood)
}

impl GpModel {
    pub fn with_hyper(x: &[f64], y: &[f64], hyper: GpHyper) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::dim("gp inputs vs targets", x.len(), y.len()));
        }
        if x.len() < 2 {
            return Err(Error::Input("gp needs at least two training points".into()));
        }
        let (chol, jitter) = factorize(x, &hyper)?;
        let yv = DVector::from_column_slice(y);
        let alpha = chol.solve(&yv);
        let log_det: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let n = x.len() as f64;
        let lml = -0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * PI).ln();
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            hyper,
            log_marginal_likelihood: lml,
            jitter,
            chol,
            alpha,
        })
    }

    /// Posterior over the noise-free function value `f(x*)`.
    pub fn predict_latent(&self, x_star: f64) -> DiagGaussian {
        let h = &self.hyper;
        let k_star = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|&xi| se_kernel(xi, x_star, h)),
        );
        let mean = k_star.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_star)
            .expect("cholesky factor is invertible");
        let var = (h.signal_var - v.dot(&v)).max(0.0);
        DiagGaussian {
            mean: vec![mean],
            variance: vec![var],
        }
    }

    pub fn predict_latent_many(&self, xs: &[f64]) -> Vec<DiagGaussian> {
        xs.iter().map(|&x| self.predict_latent(x)).collect()
    }
}

/// Selects the grid point with the highest log marginal likelihood. Grid
/// points whose kernel cannot be factorised are skipped.
pub fn gp_fit(x: &[f64], y: &[f64], grid: &GpGrid) -> Result<GpModel> {
    let mut best: Option<GpModel> = None;
    let mut last_err = None;
    for h in grid.candidates() {
        match GpModel::with_hyper(x, y, h) {
            Ok(m) => {
                if best
                    .as_ref()
                    .is_none_or(|b| m.log_marginal_likelihood > b.log_marginal_likelihood)
                {
                    best = Some(m);
                }
            }
            Err(e @ Error::Numerical(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Config("empty GP hyper-grid".into())))
}

/// Predictive distribution of a new noisy target at `x*`:
/// latent posterior plus the noise variance.
pub fn gp_predict(model: &GpModel, x_star: f64) -> DiagGaussian {
    let mut d = model.predict_latent(x_star);
    d.variance[0] += model.hyper.noise_var;
    d
}

pub fn gp_predict_many(model: &GpModel, xs: &[f64]) -> Vec<DiagGaussian> {
    xs.iter().map(|&x| gp_predict(model, x)).collect()
}
