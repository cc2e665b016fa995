//! Kink benchmark: scores learned transition models against an exact GP fit
//! to the same transition data, by KL divergence and interval coverage.

mod gp;
mod kink;

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gp::{
    gp_fit, gp_predict, gp_predict_many, log_marginal_likelihood, se_kernel, GpGrid, GpHyper,
    GpModel,
};
pub use kink::{
    generate_kink_dataset, kink_mean, kink_step, transition_pairs, KinkData, KinkSystem,
};

use crate::error::{Error, Result};
use crate::gssm::{
    kl_diag_gaussians, train_gssm, DiagGaussian, Gssm, GssmConfig, GssmTrainConfig, ObsActionSeq,
    VARIANCE_FLOOR,
};
use crate::nn::Tensor;
use crate::transitions::{TransitionConfig, TransitionKind};

/// Two-sided 95% standard-normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinkBenchConfig {
    pub n_steps: usize,
    pub heldout_steps: usize,
    pub process_sd: f64,
    pub obs_sd: f64,
    pub x0: f64,
    pub test_points: usize,
    /// Training trajectories are cut into windows of this many steps.
    pub window: usize,
    pub latent_grid: usize,
    pub quadrature_nodes: usize,
    pub gssm: GssmConfig,
    pub train: GssmTrainConfig,
    pub gp_grid: GpGrid,
}

impl Default for KinkBenchConfig {
    fn default() -> Self {
        Self {
            n_steps: 600,
            heldout_steps: 300,
            process_sd: 0.05,
            obs_sd: 0.02,
            x0: 0.5,
            test_points: 100,
            window: 50,
            latent_grid: 2001,
            quadrature_nodes: 24,
            gssm: GssmConfig {
                obs_dim: 1,
                action_dim: 0,
                latent_dim: 1,
                hidden: 32,
                ws_hidden: 16,
                wx_hidden: 32,
                wg_hidden: 32,
                transition: TransitionConfig::default(),
            },
            train: GssmTrainConfig {
                steps: 1500,
                lr: 3e-3,
                batch_size: 0,
                ..GssmTrainConfig::default()
            },
            gp_grid: GpGrid::default(),
        }
    }
}

/// Mean KL over test points, in both directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlSummary {
    /// `mean KL[GP ‖ model]`.
    pub forward: f64,
    /// `mean KL[model ‖ GP]`.
    pub reverse: f64,
}

/// Compares a model's predictive distributions at `test_points` with the GP
/// predictive at the same points.
pub fn evaluate_transition_kl<F>(predict: F, gp: &GpModel, test_points: &[f64]) -> Result<KlSummary>
where
    F: FnOnce(&[f64]) -> Result<Vec<DiagGaussian>>,
{
    if test_points.is_empty() {
        return Err(Error::Input(
            "evaluate_transition_kl: no test points".into(),
        ));
    }
    let model = predict(test_points)?;
    if model.len() != test_points.len() {
        return Err(Error::dim(
            "model predictions",
            test_points.len(),
            model.len(),
        ));
    }
    let mut fwd = 0.0;
    let mut rev = 0.0;
    for (&x, m) in test_points.iter().zip(&model) {
        let mut gp_d = gp_predict(gp, x);
        gp_d.variance[0] = gp_d.variance[0].max(VARIANCE_FLOOR);
        fwd += kl_diag_gaussians(&gp_d, m)?;
        rev += kl_diag_gaussians(m, &gp_d)?;
    }
    let n = test_points.len() as f64;
    Ok(KlSummary {
        forward: fwd / n,
        reverse: rev / n,
    })
}

/// Fraction of `targets` inside the central 95% interval of `predictions`.
pub fn coverage95(predictions: &[DiagGaussian], targets: &[f64]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(d, &y)| (y - d.mean[0]).abs() <= Z95 * d.variance[0].sqrt())
        .count();
    hits as f64 / targets.len().max(1) as f64
}

/// Gauss–Hermite rule for expectations under N(0, 1) (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Observation-space one-step predictor for a GSSM with scalar latent and
/// observation.
///
/// An observation `y` is encoded as the latent whose decoded mean is closest
/// to `y` (grid search over the latent range the filter visits); the
/// transition's Gaussian over the next latent is then pushed through the
/// decoder by quadrature, giving the moments of the next observation.
pub struct ObservationPredictor<'a> {
    model: &'a Gssm,
    grid: Vec<f64>,
    decoded: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> ObservationPredictor<'a> {
    pub fn new(
        model: &'a Gssm,
        latent_range: (f64, f64),
        grid_size: usize,
        quadrature_nodes: usize,
    ) -> Result<Self> {
        if model.config.latent_dim != 1 || model.config.obs_dim != 1 {
            return Err(Error::Config(
                "observation predictor needs scalar latent and observation".into(),
            ));
        }
        let (lo, hi) = latent_range;
        let grid: Vec<f64> = (0..grid_size)
            .map(|i| lo + (hi - lo) * i as f64 / (grid_size - 1) as f64)
            .collect();
        let decoded = model
            .decode(&Tensor::new(grid_size, 1, grid.clone()))?
            .into_iter()
            .map(|d| d.mean[0])
            .collect();
        let (nodes, weights) = gauss_hermite(quadrature_nodes);
        Ok(Self {
            model,
            grid,
            decoded,
            nodes,
            weights,
        })
    }

    pub fn encode(&self, y: f64) -> f64 {
        let best = self
            .decoded
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - y).abs().total_cmp(&(b.1 - y).abs()))
            .map_or(0, |(i, _)| i);
        self.grid[best]
    }

    pub fn predict(&self, ys: &[f64]) -> Result<Vec<DiagGaussian>> {
        let z: Vec<f64> = ys.iter().map(|&y| self.encode(y)).collect();
        let n = ys.len();
        let actions = Tensor::zeros(n, self.model.config.action_dim);
        let next = self
            .model
            .predict_transition(&Tensor::new(n, 1, z), &actions)?;
        let q = self.nodes.len();
        let mut pts = Vec::with_capacity(n * q);
        for d in &next {
            let sd = d.variance[0].sqrt();
            pts.extend(self.nodes.iter().map(|u| d.mean[0] + sd * u));
        }
        let dec = self.model.decode(&Tensor::new(n * q, 1, pts))?;
        Ok((0..n)
            .map(|i| {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for (k, w) in self.weights.iter().enumerate() {
                    let d = &dec[i * q + k];
                    m1 += w * d.mean[0];
                    m2 += w * (d.variance[0] + d.mean[0] * d.mean[0]);
                }
                DiagGaussian {
                    mean: vec![m1],
                    variance: vec![(m2 - m1 * m1).max(VARIANCE_FLOOR)],
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinkRow {
    pub seed: u64,
    pub variant: TransitionKind,
    pub mean_kl: f64,
    pub reverse_kl: f64,
    pub coverage95: f64,
    pub failed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantSummary {
    pub mean_kl: f64,
    pub std_kl: f64,
    pub median_kl: f64,
    pub median_coverage: f64,
    pub ok_seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinkReport {
    pub rows: Vec<KinkRow>,
}

/// Mean and sample standard deviation; NaN for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// NaN for an empty slice.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl KinkReport {
    pub fn summary(&self, variant: TransitionKind) -> VariantSummary {
        let ok: Vec<&KinkRow> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && !r.failed)
            .collect();
        let kls: Vec<f64> = ok.iter().map(|r| r.mean_kl).collect();
        let cov: Vec<f64> = ok.iter().map(|r| r.coverage95).collect();
        let (mean_kl, std_kl) = mean_std(&kls);
        VariantSummary {
            mean_kl,
            std_kl,
            median_kl: median(&kls),
            median_coverage: median(&cov),
            ok_seeds: ok.len(),
        }
    }

    /// Per-seed rows followed by `mean`/`std` rows per variant.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "seed,variant,mean_kl,reverse_kl,coverage95,failed")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.seed,
                variant_name(r.variant),
                r.mean_kl,
                r.reverse_kl,
                r.coverage95,
                r.failed
            )?;
        }
        for v in [TransitionKind::Gated, TransitionKind::Ensemble] {
            let ok: Vec<&KinkRow> = self
                .rows
                .iter()
                .filter(|r| r.variant == v && !r.failed)
                .collect();
            if ok.is_empty() {
                continue;
            }
            let col =
                |f: fn(&KinkRow) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (km, ks) = col(|r| r.mean_kl);
            let (rm, rs) = col(|r| r.reverse_kl);
            let (cm, cs) = col(|r| r.coverage95);
            writeln!(w, "mean,{},{km},{rm},{cm},false", variant_name(v))?;
            writeln!(w, "std,{},{ks},{rs},{cs},false", variant_name(v))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))?;
        Ok(())
    }
}

pub fn variant_name(k: TransitionKind) -> &'static str {
    match k {
        TransitionKind::Gated => "gated",
        TransitionKind::Ensemble => "ensemble",
    }
}

/// Data shared by both variants of one seed.
pub struct KinkSeedData {
    pub train: KinkData,
    pub heldout: KinkData,
    pub gp: GpModel,
    pub test_points: Vec<f64>,
    pub windows: Vec<ObsActionSeq>,
}

pub fn prepare_seed(config: &KinkBenchConfig, seed: u64) -> Result<KinkSeedData> {
    let sys = KinkSystem::new(config.process_sd, config.obs_sd);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = sys.generate(config.n_steps, config.x0, &mut rng);
    let heldout_x0 = train.states[train.states.len() - 1];
    let heldout = sys.generate(config.heldout_steps.max(2), heldout_x0, &mut rng);
    let pairs = transition_pairs(&train.observations);
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let gp = gp_fit(&xs, &ys, &config.gp_grid)?;
    let lo = train
        .observations
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = train
        .observations
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let n = config.test_points.max(2);
    let test_points = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    let windows = train
        .observations
        .chunks(config.window.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| ObsActionSeq {
            observations: c.iter().map(|&y| vec![y]).collect(),
            actions: vec![vec![]; c.len()],
        })
        .collect();
    Ok(KinkSeedData {
        train,
        heldout,
        gp,
        test_points,
        windows,
    })
}

/// Trains one GSSM variant on a seed's windows. Returns the model and the
/// latent interval the filter visits on that data.
pub fn train_kink_model(
    config: &KinkBenchConfig,
    seed: u64,
    data: &KinkSeedData,
    kind: TransitionKind,
) -> Result<(Gssm, (f64, f64))> {
    let mut gcfg = config.gssm.clone();
    gcfg.transition.kind = kind;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut model = Gssm::new(gcfg, &mut rng)?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    train_gssm(&mut model, &data.windows, &config.train, &mut train_rng)?;

    let mut filter_rngs: Vec<ChaCha8Rng> = (0..data.windows.len())
        .map(|i| ChaCha8Rng::seed_from_u64(i as u64))
        .collect();
    let filtered = model.filter_batch(&data.windows, &mut filter_rngs)?;
    let means: Vec<f64> = filtered
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| s.q.mean[0]))
        .collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((model, (lo, hi)))
}

/// Trains one GSSM variant on a seed's data and scores it.
pub fn run_kink_variant(
    config: &KinkBenchConfig,
    seed: u64,
    data: &KinkSeedData,
    kind: TransitionKind,
) -> Result<KinkRow> {
    let (model, (lo, hi)) = train_kink_model(config, seed, data, kind)?;
    let pad = 0.5 * (hi - lo).max(1e-3);
    let predictor = ObservationPredictor::new(
        &model,
        (lo - pad, hi + pad),
        config.latent_grid,
        config.quadrature_nodes,
    )?;

    let kl = evaluate_transition_kl(|xs| predictor.predict(xs), &data.gp, &data.test_points)?;
    let held_pairs = transition_pairs(&data.heldout.observations);
    let (hx, hy): (Vec<f64>, Vec<f64>) = held_pairs.into_iter().unzip();
    let coverage = coverage95(&predictor.predict(&hx)?, &hy);
    Ok(KinkRow {
        seed,
        variant: kind,
        mean_kl: kl.forward,
        reverse_kl: kl.reverse,
        coverage95: coverage,
        failed: !(kl.forward.is_finite() && kl.reverse.is_finite()),
    })
}

/// Runs both variants for every seed. A seed whose training diverges is
/// recorded as failed and the run continues.
pub fn run_kink_benchmark(config: &KinkBenchConfig, seeds: &[u64]) -> Result<KinkReport> {
    if seeds.len() < 2 {
        return Err(Error::Config(
            "kink benchmark needs at least 2 seeds".into(),
        ));
    }
    let mut rows = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        let data = prepare_seed(config, seed)?;
        for kind in [TransitionKind::Gated, TransitionKind::Ensemble] {
            let row = match run_kink_variant(config, seed, &data, kind) {
                Ok(r) => r,
                Err(e @ (Error::Training(_) | Error::Numerical(_))) => {
                    log::warn!("seed {seed} {} failed: {e}", variant_name(kind));
                    KinkRow {
                        seed,
                        variant: kind,
                        mean_kl: f64::NAN,
                        reverse_kl: f64::NAN,
                        coverage95: f64::NAN,
                        failed: true,
                    }
                }
                Err(e) => return Err(e),
            };
            log::info!(
                "kink seed {seed} {}: kl {:.4} rev {:.4} cov {:.3}",
                variant_name(kind),
                row.mean_kl,
                row.reverse_kl,
                row.coverage95
            );
            rows.push(row);
        }
    }
    Ok(KinkReport { rows })
}
