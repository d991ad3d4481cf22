//! Constraint-aware scoring, baselines, paired comparison and report files.

mod baselines;
mod stats;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baselines::{
    train_bc, tune_fixed_lambda, BcConfig, BcPolicy, FixedLambda, FixedLambdaTuning,
};
pub use stats::{paired_compare, spearman, PairedComparison, DEGENERATE_P};

use crate::error::{Error, Result};
use crate::market::{CityProfile, RolloutRecord};
use crate::types::OBS_DIM;

/// Default penalty exponent of the score.
pub const DEFAULT_PENALTY: f64 = 0.5;

/// Steering multipliers for the target-Rides signal.
pub const GAMMA_GRID: [f64; 10] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0];

/// Daily rides, discounted by `(C / c_real)^beta` when the realized rate exceeds the cap.
pub fn score(rides: f64, c_real: f64, cap_c: f64, beta: f64) -> Result<f64> {
    if !(c_real >= 0.0 && c_real.is_finite()) {
        return Err(Error::Range {
            what: "realized subsidy rate",
            value: c_real,
            range: "[0, inf)",
        });
    }
    if !(cap_c > 0.0 && cap_c < 1.0) {
        return Err(Error::Range {
            what: "cap_c",
            value: cap_c,
            range: "(0, 1)",
        });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Range {
            what: "penalty exponent",
            value: beta,
            range: "(0, inf)",
        });
    }
    if !(rides >= 0.0 && rides.is_finite()) {
        return Err(Error::Range {
            what: "rides",
            value: rides,
            range: "[0, inf)",
        });
    }
    Ok(if c_real <= cap_c {
        rides
    } else {
        (cap_c / c_real).powf(beta) * rides
    })
}

/// Evaluation of one controlled day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEval {
    pub policy: String,
    pub city: String,
    pub day: u32,
    pub cap_c: f64,
    pub tolerance_delta: f64,
    pub score: f64,
    pub rides: f64,
    pub gmv: f64,
    pub drv: f64,
    pub c_real: f64,
    pub under_gap: f64,
    pub violated: bool,
    /// Day-to-date subsidy rate after each window; the last entry is `c_real`.
    pub rates: Vec<f64>,
    pub window_rides: Vec<f64>,
    pub window_gmv: Vec<f64>,
    pub window_drv: Vec<f64>,
    pub actions: Vec<f64>,
}

impl TrajectoryEval {
    pub fn from_record(
        policy: &str,
        rec: &RolloutRecord,
        cap_c: f64,
        tolerance_delta: f64,
        beta: f64,
    ) -> Result<Self> {
        let traj = &rec.trajectory;
        let c_real = rec.c_real();
        let n = traj.valid_length;
        let mut rates: Vec<f64> = traj.states[1..n].iter().map(|s| s[OBS_DIM]).collect();
        rates.push(c_real);
        let rides = traj.total_rides();
        Ok(Self {
            policy: policy.to_string(),
            city: traj.city_id.clone(),
            day: traj.day_index,
            cap_c,
            tolerance_delta,
            score: score(rides, c_real, cap_c, beta)?,
            rides,
            gmv: traj.total_gmv(),
            drv: traj.total_drv(),
            c_real,
            under_gap: (cap_c - c_real).max(0.0),
            violated: c_real > cap_c + tolerance_delta,
            rates,
            window_rides: traj.rides[..n].to_vec(),
            window_gmv: traj.gmv[..n].to_vec(),
            window_drv: traj.drv[..n].to_vec(),
            actions: traj.actions[..n].to_vec(),
        })
    }
}

/// Per-policy summary for one city.
#[derive(Debug, Clone, PartialEq)]
pub struct CitySummary {
    pub city: String,
    pub days: usize,
    pub mean_score: f64,
    pub mean_rides: f64,
    pub mean_gmv: f64,
    pub violations: usize,
    pub mean_under_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub rows: Vec<TrajectoryEval>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.score).collect()
    }

    pub fn mean_score(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.score))
    }

    pub fn mean_rides(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.rides))
    }

    pub fn mean_gmv(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.gmv))
    }

    pub fn mean_under_gap(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.under_gap))
    }

    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violated).count()
    }

    pub fn within_tolerance(&self) -> usize {
        self.rows.len() - self.violations()
    }

    /// Summaries in order of first appearance of each city.
    pub fn by_city(&self) -> Vec<CitySummary> {
        let mut cities: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !cities.contains(&r.city.as_str()) {
                cities.push(&r.city);
            }
        }
        cities
            .into_iter()
            .map(|c| {
                let rows: Vec<&TrajectoryEval> = self.rows.iter().filter(|r| r.city == c).collect();
                CitySummary {
                    city: c.to_string(),
                    days: rows.len(),
                    mean_score: mean(rows.iter().map(|r| r.score)),
                    mean_rides: mean(rows.iter().map(|r| r.rides)),
                    mean_gmv: mean(rows.iter().map(|r| r.gmv)),
                    violations: rows.iter().filter(|r| r.violated).count(),
                    mean_under_gap: mean(rows.iter().map(|r| r.under_gap)),
                }
            })
            .collect()
    }

    /// Paired comparison against another report over the same (city, day) list.
    pub fn compare(&self, baseline: &EvalReport) -> Result<PairedComparison> {
        let aligned = self.rows.len() == baseline.rows.len()
            && self
                .rows
                .iter()
                .zip(&baseline.rows)
                .all(|(a, b)| a.city == b.city && a.day == b.day);
        if !aligned {
            return Err(Error::Domain(format!(
                "reports {} and {} cover different trajectories",
                self.policy, baseline.policy
            )));
        }
        paired_compare(&self.scores(), &baseline.scores())
    }
}

/// Run `run` on every (profile, day) job in parallel and score the results in job order.
pub fn evaluate<F>(
    policy: &str,
    jobs: &[(CityProfile, u32)],
    beta: f64,
    run: F,
) -> Result<EvalReport>
where
    F: Fn(&CityProfile, u32) -> Result<RolloutRecord> + Sync,
{
    let rows = jobs
        .par_iter()
        .map(|(p, d)| {
            let rec = run(p, *d)?;
            TrajectoryEval::from_record(policy, &rec, p.cap_c, p.tolerance_delta, beta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        policy: policy.to_string(),
        rows,
    })
}

/// One steering point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub mean_score: f64,
    pub mean_rides: f64,
    pub mean_gmv: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<EvalReport>,
    /// Spearman correlation between gamma and mean realized rides.
    pub rides_rank_corr: f64,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,mean_score,mean_rides,mean_gmv,violations\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.gamma, r.mean_score, r.mean_rides, r.mean_gmv, r.violations
            );
        }
        out
    }
}

/// Evaluate each gamma with `run` and rank-correlate gamma with mean rides.
pub fn steering_sweep(
    gammas: &[f64],
    mut run: impl FnMut(f64) -> Result<EvalReport>,
) -> Result<SweepResult> {
    let mut rows = Vec::with_capacity(gammas.len());
    let mut reports = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let rep = run(g)?;
        rows.push(SweepRow {
            gamma: g,
            mean_score: rep.mean_score(),
            mean_rides: rep.mean_rides(),
            mean_gmv: rep.mean_gmv(),
            violations: rep.violations(),
        });
        reports.push(rep);
    }
    let g: Vec<f64> = rows.iter().map(|r| r.gamma).collect();
    let r: Vec<f64> = rows.iter().map(|r| r.mean_rides).collect();
    Ok(SweepResult {
        rides_rank_corr: spearman(&g, &r)?,
        rows,
        reports,
    })
}

pub const KPI_CURVES: &str = "kpi_curves.csv";
pub const RATE_CURVE: &str = "rate_curve.csv";
pub const SUMMARY: &str = "summary.csv";

/// Per-window and cumulative KPI curves: `city,day,t,metric,value,policy`.
pub fn kpi_curves_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("city,day,t,metric,value,policy\n");
    for rep in reports {
        for r in &rep.rows {
            let series: [(&str, &[f64]); 3] = [
                ("rides", &r.window_rides),
                ("gmv", &r.window_gmv),
                ("drv", &r.window_drv),
            ];
            for (name, values) in series {
                let mut cum = 0.0;
                for (t, v) in values.iter().enumerate() {
                    cum += v;
                    let _ = writeln!(out, "{},{},{t},{name},{v},{}", r.city, r.day, r.policy);
                    let _ = writeln!(
                        out,
                        "{},{},{t},{name}_cum,{cum},{}",
                        r.city, r.day, r.policy
                    );
                }
            }
        }
    }
    out
}

/// Day-to-date rate minus the cap: `city,day,t,rate_minus_C,policy`.
pub fn rate_curve_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("city,day,t,rate_minus_C,policy\n");
    for rep in reports {
        for r in &rep.rows {
            for (t, rate) in r.rates.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{t},{},{}",
                    r.city,
                    r.day,
                    rate - r.cap_c,
                    r.policy
                );
            }
        }
    }
    out
}

/// `policy,city,mean_score,mean_rides,mean_gmv,violations,mean_under_gap`.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out =
        String::from("policy,city,mean_score,mean_rides,mean_gmv,violations,mean_under_gap\n");
    for rep in reports {
        for c in rep.by_city() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                rep.policy,
                c.city,
                c.mean_score,
                c.mean_rides,
                c.mean_gmv,
                c.violations,
                c.mean_under_gap
            );
        }
    }
    out
}

pub fn emit_report(reports: &[EvalReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        (KPI_CURVES, kpi_curves_csv(reports)),
        (RATE_CURVE, rate_curve_csv(reports)),
        (SUMMARY, summary_csv(reports)),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
