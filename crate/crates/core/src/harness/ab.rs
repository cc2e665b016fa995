use std::fmt::Write as _;
use std::path::Path;

use super::rollout::TrackingSchedule;
use super::trainer::run_training;
use super::{provenance, write_atomic, ExperimentConfig};
use crate::arm::write_trajectory_csv;
use crate::benchmarks::{mean_std, median};
use crate::error::{Error, Result};
use crate::sac::Mode;

/// One side of a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AbArm {
    pub label: String,
    pub mode: Mode,
}

impl AbArm {
    pub fn of(mode: Mode) -> Self {
        Self {
            label: mode.name().to_string(),
            mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbRun {
    pub label: String,
    pub mode: Mode,
    pub seed: u64,
    /// `(episode, rmse_deg)` at every evaluation.
    pub curve: Vec<(usize, f64)>,
    pub final_rmse: Option<f64>,
    pub tracking_rmse: Option<f64>,
    pub tracking_segments: Vec<f64>,
    /// Set when the run failed; such runs are left out of every summary.
    pub error: Option<String>,
}

impl AbRun {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn degradation(&self) -> Option<f64> {
        match (
            self.tracking_segments.first(),
            self.tracking_segments.last(),
        ) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub final_mean: f64,
    /// Sample standard deviation across seeds.
    pub final_std: f64,
    pub tracking_median: f64,
    pub degradation_median: f64,
    pub ok: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbReport {
    pub arms: Vec<AbArm>,
    pub runs: Vec<AbRun>,
}

pub const CURVE_HEADER: &str = "episode,mode,seed,rmse_deg";
pub const REPORT_HEADER: &str =
    "kind,mode,seed,n,final_rmse_deg,final_std_deg,tracking_rmse_deg,degradation_deg,failed";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AbReport {
    pub fn summary(&self, label: &str) -> ArmSummary {
        let runs: Vec<&AbRun> = self.runs.iter().filter(|r| r.label == label).collect();
        let ok: Vec<&&AbRun> = runs.iter().filter(|r| !r.failed()).collect();
        let finals: Vec<f64> = ok.iter().filter_map(|r| r.final_rmse).collect();
        let tracking: Vec<f64> = ok.iter().filter_map(|r| r.tracking_rmse).collect();
        let degradation: Vec<f64> = ok.iter().filter_map(|r| r.degradation()).collect();
        let (final_mean, final_std) = mean_std(&finals);
        ArmSummary {
            final_mean,
            final_std,
            tracking_median: median(&tracking),
            degradation_median: median(&degradation),
            ok: ok.len(),
            failed: runs.len() - ok.len(),
        }
    }

    pub fn learning_curve_csv(&self) -> String {
        let mut s = format!("# {}\n{CURVE_HEADER}\n", provenance());
        for r in &self.runs {
            for (ep, v) in &r.curve {
                let _ = writeln!(s, "{ep},{},{},{v}", r.label, r.seed);
            }
        }
        s
    }

    /// One row per run, then one summary row per arm.
    pub fn report_csv(&self) -> String {
        let mut s = format!("# {}\n{REPORT_HEADER}\n", provenance());
        for r in &self.runs {
            let _ = writeln!(
                s,
                "run,{},{},1,{},,{},{},{}",
                r.label,
                r.seed,
                cell(r.final_rmse),
                cell(r.tracking_rmse),
                cell(r.degradation()),
                u8::from(r.failed())
            );
        }
        for a in &self.arms {
            let m = self.summary(&a.label);
            let _ = writeln!(
                s,
                "summary,{},,{},{},{},{},{},{}",
                a.label,
                m.ok,
                m.final_mean,
                m.final_std,
                m.tracking_median,
                m.degradation_median,
                m.failed
            );
        }
        s
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_atomic(
            &out.join("learning_curve.csv"),
            self.learning_curve_csv().as_bytes(),
        )?;
        write_atomic(&out.join("report.csv"), self.report_csv().as_bytes())
    }
}

fn run_one(
    config: &ExperimentConfig,
    arm: &AbArm,
    seed: u64,
    schedule: &TrackingSchedule,
    dir: &Path,
) -> Result<AbRun> {
    let outcome = run_training(config, arm.mode, seed, dir)?;
    let t = &outcome.trainer;
    let curve: Vec<(usize, f64)> = t
        .metrics
        .iter()
        .filter_map(|m| m.eval_rmse_deg.map(|v| (m.episode, v)))
        .collect();
    let track = t.track(schedule)?;
    let mut csv = Vec::new();
    write_trajectory_csv(&mut csv, &track.rows)?;
    write_atomic(&dir.join("trajectory.csv"), &csv)?;
    Ok(AbRun {
        label: arm.label.clone(),
        mode: arm.mode,
        seed,
        final_rmse: curve.last().map(|c| c.1),
        curve,
        tracking_rmse: Some(track.rmse_deg),
        tracking_segments: track.segment_rmse_deg,
        error: None,
    })
}

/// Trains every arm on every seed (matched environment streams per seed),
/// runs the tracking trial on each trained agent, and writes
/// `learning_curve.csv`, `report.csv` and per-run directories under `out`.
/// A failed run is recorded with its error and excluded from summaries.
pub fn run_ab_arms(
    config: &ExperimentConfig,
    seeds: &[u64],
    arms: &[AbArm],
    out: &Path,
) -> Result<AbReport> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!(
            "a comparison needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    config.validate()?;
    let schedule = config.schedule()?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("config.resolved"), config.resolved()?.as_bytes())?;
    write_atomic(&out.join("schedule.csv"), schedule.to_csv().as_bytes())?;
    let mut report = AbReport {
        arms: arms.to_vec(),
        runs: Vec::new(),
    };
    for &seed in seeds {
        for arm in arms {
            let dir = out.join(format!("{}_seed{seed}", arm.label));
            let run = run_one(config, arm, seed, &schedule, &dir).unwrap_or_else(|e| {
                log::warn!("{} seed {seed} failed: {e}", arm.label);
                AbRun {
                    label: arm.label.clone(),
                    mode: arm.mode,
                    seed,
                    curve: Vec::new(),
                    final_rmse: None,
                    tracking_rmse: None,
                    tracking_segments: Vec::new(),
                    error: Some(e.to_string()),
                }
            });
            report.runs.push(run);
            report.save(out)?;
        }
    }
    Ok(report)
}

/// RL-vanilla against RL-GSSM.
pub fn run_ab_experiment(config: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<AbReport> {
    run_ab_arms(
        config,
        seeds,
        &[AbArm::of(Mode::Vanilla), AbArm::of(Mode::Gssm)],
        out,
    )
}
