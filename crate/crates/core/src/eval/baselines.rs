use ndarray::Array2;
use rayon::prelude::*;

use super::{score, DEFAULT_PENALTY};
use crate::error::{Error, Result};
use crate::market::{env_rng, rollout, CityProfile, DaySpec, Policy};
use crate::net::{AdamW, Mlp, MlpConfig};
use crate::rng::{stream_id, SeededRng};
use crate::train::Standardizer;
use crate::trajectory::Trajectory;
use crate::types::{check_action, is_valid_action, Context, STATE_DIM};

/// Constant multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedLambda {
    level: f64,
}

impl FixedLambda {
    pub fn new(level: f64) -> Result<Self> {
        Ok(Self {
            level: check_action(level)?,
        })
    }

    pub fn level(&self) -> f64 {
        self.level
    }
}

impl Policy for FixedLambda {
    fn act(&mut self, _: &[f64], _: usize, _: &Context) -> Result<f64> {
        Ok(self.level)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedLambdaTuning {
    pub best: f64,
    /// `(level, mean score)` over the grid.
    pub grid: Vec<(f64, f64)>,
}

/// Pick the constant with the best mean score over `days`, from a 15-point
/// geometric grid on `[center / 2, 2 center]`.
pub fn tune_fixed_lambda(
    profile: &CityProfile,
    days: &[u32],
    window_minutes: u32,
    env_seed: u64,
    center: f64,
) -> Result<FixedLambdaTuning> {
    if days.is_empty() {
        return Err(Error::EmptyDataset("no tuning days".into()));
    }
    check_action(center)?;
    let levels: Vec<f64> = (0..15)
        .map(|i| (center * 0.5 * 4f64.powf(i as f64 / 14.0)).min(crate::types::MAX_ACTION))
        .collect();
    let ctx = Context::new(vec![1.0], profile.cap_c, profile.tolerance_delta, 1.0)?;
    let grid = levels
        .par_iter()
        .map(|&level| {
            let mut total = 0.0;
            for &d in days {
                let rec = rollout(
                    profile,
                    DaySpec {
                        day_index: d,
                        window_minutes,
                    },
                    &mut FixedLambda::new(level)?,
                    &ctx,
                    &env_rng(env_seed, &profile.city_id, d),
                )?;
                total += score(
                    rec.trajectory.total_rides(),
                    rec.c_real(),
                    profile.cap_c,
                    DEFAULT_PENALTY,
                )?;
            }
            Ok((level, total / days.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let best = grid
        .iter()
        .fold(
            (0.0, f64::MIN),
            |acc, &(l, s)| if s > acc.1 { (l, s) } else { acc },
        )
        .0;
    Ok(FixedLambdaTuning { best, grid })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// State rows per gradient step.
    pub batch_rows: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 30,
            lr: 1e-3,
            batch_rows: 512,
            seed: 0,
        }
    }
}

/// Behavior cloning: standardized augmented state -> logged multiplier.
#[derive(Debug, Clone)]
pub struct BcPolicy {
    pub net: Mlp,
    pub states: Standardizer,
}

impl Policy for BcPolicy {
    fn act(&mut self, state: &[f64], _: usize, _: &Context) -> Result<f64> {
        let lam = self.net.forward_one(&self.states.apply(state))?;
        Ok(if is_valid_action(lam) {
            lam
        } else {
            crate::types::MAX_ACTION
        })
    }
}

/// Fit the cloning network with masked MSE over valid positions.
pub fn train_bc(trajs: &[Trajectory], cfg: &BcConfig) -> Result<BcPolicy> {
    let rows: Vec<(&[f64], f64)> = trajs
        .iter()
        .flat_map(|t| {
            t.states[..t.valid_length]
                .iter()
                .zip(&t.actions)
                .map(|(s, &a)| (s.as_slice(), a))
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyDataset(
            "behavior cloning needs logged actions".into(),
        ));
    }
    let states = Standardizer::fit(rows.iter().map(|r| r.0))?;
    let root = SeededRng::new(cfg.seed, stream_id(&[0xBC]));
    let mut net = Mlp::new(
        MlpConfig {
            input_dim: STATE_DIM,
            hidden: cfg.hidden.clone(),
        },
        &mut root.derive(0),
    )?;
    net.set_output_level(rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64);
    let x_all = Array2::from_shape_fn((rows.len(), STATE_DIM), |(i, j)| {
        (rows[i].0[j] - states.mean[j]) / states.std[j]
    });
    let mut opt = AdamW::new(cfg.lr, 0.0, net.params.len());
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut root.derive(epoch as u64 + 1));
        for chunk in order.chunks(cfg.batch_rows.max(1)) {
            let x = x_all.select(ndarray::Axis(0), chunk);
            let (pred, tape) = net.forward_traced(x.view())?;
            let n = chunk.len() as f64;
            let d: Vec<f64> = chunk
                .iter()
                .zip(&pred)
                .map(|(&i, &p)| 2.0 * (p - rows[i].1) / n)
                .collect();
            let g = net.backward(&tape, &d)?;
            opt.step(&mut net.params, &g)?;
        }
    }
    Ok(BcPolicy { net, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_default, GenConfig};
    use crate::market::default_city_pool;

    #[test]
    fn fixed_policy_is_constant_and_validated() {
        let mut p = FixedLambda::new(2.5).unwrap();
        let ctx = Context::new(vec![1.0], 0.1, 0.01, 1.0).unwrap();
        for t in 0..5 {
            assert_eq!(p.act(&[0.0; 20], t, &ctx).unwrap(), 2.5);
        }
        assert!(FixedLambda::new(0.0).is_err());
        assert!(FixedLambda::new(30.5).is_err());
    }

    #[test]
    fn tuning_uses_a_fifteen_point_grid() {
        let p = &default_city_pool()[1];
        let t = tune_fixed_lambda(p, &[0, 1], 10, 3, 1.4).unwrap();
        assert_eq!(t.grid.len(), 15);
        assert!((t.grid[0].0 - 0.7).abs() < 1e-12 && (t.grid[14].0 - 2.8).abs() < 1e-12);
        let best = t.grid.iter().map(|g| g.1).fold(f64::MIN, f64::max);
        assert!(t.grid.iter().any(|&(l, s)| l == t.best && s == best));
    }

    #[test]
    fn larger_constant_spends_less_on_average() {
        // Monte-Carlo over 100 seeds; a shared environment per seed
        let p = &default_city_pool()[1];
        let ctx = Context::new(vec![1.0], p.cap_c, p.tolerance_delta, 1.0).unwrap();
        let levels = [0.8, 1.4, 2.5];
        let mut means = [0.0; 3];
        for seed in 0..100 {
            for (i, &l) in levels.iter().enumerate() {
                let rec = rollout(
                    p,
                    DaySpec {
                        day_index: 0,
                        window_minutes: 10,
                    },
                    &mut FixedLambda::new(l).unwrap(),
                    &ctx,
                    &env_rng(seed, &p.city_id, 0),
                )
                .unwrap();
                means[i] += rec.c_real() / 100.0;
            }
        }
        assert!(means[0] >= means[1] && means[1] >= means[2], "{means:?}");
    }

    #[test]
    fn constant_logs_are_cloned() {
        let cfg = GenConfig {
            days: 3,
            train_days: 2,
            window_minutes: 10,
            main_cities: vec!["city-b".into()],
            cold_cities: vec![],
            ..GenConfig::default()
        };
        let mut trajs = generate_default(&cfg).unwrap().train;
        for t in &mut trajs {
            t.actions.iter_mut().for_each(|a| *a = 1.7);
        }
        let bc = BcConfig {
            epochs: 20,
            ..BcConfig::default()
        };
        let mut pol = train_bc(&trajs, &bc).unwrap();
        let ctx = Context::new(vec![1.0], 0.1, 0.01, 1.0).unwrap();
        for s in trajs[0].states.iter().step_by(7) {
            let a = pol.act(s, 0, &ctx).unwrap();
            assert!((a - 1.7).abs() < 0.05, "{a}");
        }
        let again = train_bc(&trajs, &bc).unwrap();
        assert_eq!(again.net.params, pol.net.params);
        assert!(train_bc(&[], &bc).is_err());
    }
}
