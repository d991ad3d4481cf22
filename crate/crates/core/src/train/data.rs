//! Turning logged trajectories into normalized training examples.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;
use crate::types::{CityIndex, Context};

/// Per-column affine standardization. Near-constant columns keep unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-6;

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for row in rows {
            if n == 0 {
                sum = vec![0.0; row.len()];
                sq = vec![0.0; row.len()];
            } else if row.len() != sum.len() {
                return Err(Error::Dimension {
                    what: "standardizer row",
                    expected: sum.len(),
                    actual: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyDataset("no rows to fit a standardizer".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                if var.sqrt() < MIN_STD {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn apply_rows(&self, m: ArrayView2<f64>) -> Array2<f64> {
        let mut out = m.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Bounds for hindsight-relabeled caps so the context stays valid.
const RELABEL_CAP: (f64, f64) = (1e-3, 0.5);

/// How contexts are built for training (hindsight) and deployment (operator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub city_index: CityIndex,
    /// Mean daily rides per city, the unit of `target_rides`.
    pub ride_scale: BTreeMap<String, f64>,
    /// Tolerance as a fraction of the cap.
    pub delta_frac: f64,
}

impl Conditioning {
    pub fn fit(trajs: &[Trajectory], city_index: CityIndex, delta_frac: f64) -> Result<Self> {
        let mut c = Self {
            city_index,
            ride_scale: BTreeMap::new(),
            delta_frac,
        };
        c.add_ride_scales(trajs)?;
        Ok(c)
    }

    /// Record mean daily rides for cities in `trajs` (replacing earlier values).
    pub fn add_ride_scales(&mut self, trajs: &[Trajectory]) -> Result<()> {
        let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for t in trajs {
            let e = acc.entry(&t.city_id).or_default();
            e.0 += t.total_rides();
            e.1 += 1;
        }
        for (city, (sum, n)) in acc {
            let mean = sum / n as f64;
            if !(mean > 0.0) {
                return Err(Error::Domain(format!(
                    "city {city} has no completed rides in its data"
                )));
            }
            self.ride_scale.insert(city.to_string(), mean);
        }
        Ok(())
    }

    fn scale_for(&self, city: &str) -> Result<f64> {
        self.ride_scale.get(city).copied().ok_or_else(|| {
            Error::Config(format!(
                "no ride scale for city {city}; fine-tune on its data first"
            ))
        })
    }

    /// Training context: the day's own realized rate as the cap and its own rides as the target.
    pub fn hindsight(&self, traj: &Trajectory) -> Result<Context> {
        let cap = traj
            .last_recorded_rate()
            .clamp(RELABEL_CAP.0, RELABEL_CAP.1);
        let target = traj.total_rides() / self.scale_for(&traj.city_id)?;
        Context::new(
            self.city_index.onehot(&traj.city_id),
            cap,
            self.delta_frac * cap,
            target,
        )
    }

    /// Deployment context: operator cap and tolerance, target of `gamma` typical days.
    pub fn deployment(
        &self,
        city: &str,
        cap_c: f64,
        tolerance_delta: f64,
        gamma: f64,
    ) -> Result<Context> {
        Context::new(self.city_index.onehot(city), cap_c, tolerance_delta, gamma)
    }
}

/// One normalized training day.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub city_id: String,
    pub day_index: u32,
    pub window_minutes: u32,
    pub states: Array2<f64>,
    pub actions: Vec<f64>,
    pub valid_length: usize,
    pub ctx: Context,
}

impl Example {
    pub fn horizon(&self) -> usize {
        self.states.nrows()
    }

    /// Normalized context vector with time fields at window `t`.
    pub fn ctx_at(&self, t: usize, scaler: &Standardizer) -> Vec<f64> {
        scaler.apply(
            &self
                .ctx
                .at_time(t, self.window_minutes, self.day_index)
                .to_vec(),
        )
    }
}

/// Normalizers plus the conditioning rule; everything needed to map raw data to model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub states: Standardizer,
    pub contexts: Standardizer,
    pub conditioning: Conditioning,
}

impl Preprocessor {
    /// Fit on the pretraining pool. Only valid rows enter the statistics.
    pub fn fit(trajs: &[Trajectory], delta_frac: f64) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::EmptyDataset("no trajectories to fit on".into()));
        }
        let cities: Vec<String> = trajs.iter().map(|t| t.city_id.clone()).collect();
        let conditioning = Conditioning::fit(trajs, CityIndex::new(cities), delta_frac)?;
        let states = Standardizer::fit(
            trajs
                .iter()
                .flat_map(|t| t.states[..t.valid_length].iter().map(Vec::as_slice)),
        )?;
        let ctx_rows: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| conditioning.hindsight(t).map(|c| c.to_vec()))
            .collect::<Result<_>>()?;
        let mut contexts = Standardizer::fit(ctx_rows.iter().map(Vec::as_slice))?;
        // one-hot and time encodings are already unit scale
        let scaled_from = conditioning.city_index.width() + 4;
        for j in 0..scaled_from {
            contexts.mean[j] = 0.0;
            contexts.std[j] = 1.0;
        }
        Ok(Self {
            states,
            contexts,
            conditioning,
        })
    }

    pub fn ctx_dim(&self) -> usize {
        self.contexts.dim()
    }

    pub fn example(&self, traj: &Trajectory) -> Result<Example> {
        traj.validate()?;
        Ok(Example {
            city_id: traj.city_id.clone(),
            day_index: traj.day_index,
            window_minutes: traj.window_minutes,
            states: self.states.apply_rows(traj.states_array().view()),
            actions: traj.actions.clone(),
            valid_length: traj.valid_length,
            ctx: self.conditioning.hindsight(traj)?,
        })
    }

    pub fn examples(&self, trajs: &[Trajectory]) -> Result<Vec<Example>> {
        trajs.iter().map(|t| self.example(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::trajectory::tests::random_trajectory;

    #[test]
    fn standardizer_round_trip_and_constant_columns() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[3.0, 5.0]), vec![1.0, 0.0]);
        let back = s.invert(&s.apply(&[0.3, 2.0]));
        assert!((back[0] - 0.3).abs() < 1e-15 && back[1] == 2.0);
        assert!(Standardizer::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn hindsight_context_uses_realized_day() {
        let mut rng = SeededRng::new(0, 0);
        let mut a = random_trajectory(&mut rng, 10);
        a.city_id = "a".into();
        let mut b = a.clone();
        b.rides.iter_mut().for_each(|r| *r *= 3.0);
        let pre = Preprocessor::fit(&[a.clone(), b.clone()], 0.1).unwrap();
        let ca = pre.conditioning.hindsight(&a).unwrap();
        let cb = pre.conditioning.hindsight(&b).unwrap();
        assert!((ca.target_rides - 0.5).abs() < 1e-12);
        assert!((cb.target_rides - 1.5).abs() < 1e-12);
        assert_eq!(ca.cap_c, a.last_recorded_rate().clamp(1e-3, 0.5));
        assert!((ca.tolerance_delta - 0.1 * ca.cap_c).abs() < 1e-15);
        let ex = pre.example(&a).unwrap();
        assert_eq!(ex.states.dim(), (144, 20));
        assert!(pre
            .conditioning
            .hindsight(&Trajectory {
                city_id: "zz".into(),
                ..a
            })
            .is_err());
    }
}
