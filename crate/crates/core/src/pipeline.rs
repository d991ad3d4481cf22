//! The desk experiment end to end: logs, pooled pretraining, per-city
//! fine-tuning, and paired evaluation against the fixed and cloned baselines.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::config::KeyValues;
use crate::controller::{Controller, ControllerConfig, PlannerModels};
use crate::dataset::{calibrated_lambda, generate, select_profiles, GenConfig, Splits};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, train_bc, tune_fixed_lambda, BcConfig, EvalReport, FixedLambda, FixedLambdaTuning,
    PairedComparison, DEFAULT_PENALTY, GAMMA_GRID,
};
use crate::market::{default_city_pool, env_rng, rollout, CityProfile, DaySpec};
use crate::net::InverseDecoder;
use crate::train::{
    city_subset, finetune, pretrain_decoder, pretrain_denoiser, resolve_plan_noise, LossCurve,
    Preprocessor, TrainConfig,
};
use crate::trajectory::Trajectory;

/// Tolerance as a fraction of the cap, used for hindsight contexts.
pub const DELTA_FRACTION: f64 = 0.1;

const CAP_PREFIX: &str = "cap_c.";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub controller: ControllerConfig,
    pub bc: BcConfig,
    /// Score penalty exponent.
    pub beta: f64,
    /// Seed of the deployment sampling streams.
    pub plan_seed: u64,
    pub gamma_grid: Vec<f64>,
    /// Operator caps replacing the built-in ones (`cap_c.<city> = value`);
    /// the tolerance follows as a tenth of the cap.
    pub cap_overrides: BTreeMap<String, f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        Self {
            train: TrainConfig {
                seed: gen.seed,
                ..TrainConfig::default()
            },
            gen,
            controller: ControllerConfig::default(),
            bc: BcConfig::default(),
            beta: DEFAULT_PENALTY,
            plan_seed: 0,
            gamma_grid: GAMMA_GRID.to_vec(),
            cap_overrides: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        self.controller.validate()?;
        if self.gen.seed != self.train.seed {
            return Err(Error::Config("one seed drives logging and training".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.gamma_grid.is_empty()
            || self
                .gamma_grid
                .iter()
                .any(|g| !(*g >= 0.0 && g.is_finite()))
        {
            return Err(Error::Config("gamma_grid needs finite values >= 0".into()));
        }
        for p in self.profile_pool() {
            p.validate()?;
        }
        Ok(())
    }

    /// Read every section from one flat key=value file; `seed` drives both
    /// logging and training. Unknown keys are ignored.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let gen = GenConfig::from_key_values(kv)?;
        let cfg = Self {
            train: TrainConfig {
                seed: gen.seed,
                ..TrainConfig::from_key_values(kv)?
            },
            gen,
            controller: ControllerConfig {
                replan_every: kv.get_or("replan_every", d.controller.replan_every)?,
                plan_horizon: kv.get("plan_horizon")?,
                deterministic: kv.get_or("deterministic_sampling", d.controller.deterministic)?,
                gamma: kv.get_or("gamma", d.controller.gamma)?,
            },
            bc: BcConfig {
                hidden: kv.get_list("bc_hidden")?.unwrap_or(d.bc.hidden),
                epochs: kv.get_or("bc_epochs", d.bc.epochs)?,
                lr: kv.get_or("bc_lr", d.bc.lr)?,
                batch_rows: kv.get_or("bc_batch_rows", d.bc.batch_rows)?,
                seed: kv.get_or("bc_seed", d.bc.seed)?,
            },
            beta: kv.get_or("beta", d.beta)?,
            plan_seed: kv.get_or("plan_seed", d.plan_seed)?,
            gamma_grid: kv.get_list("gamma_grid")?.unwrap_or(d.gamma_grid),
            cap_overrides: kv
                .keys()
                .filter_map(|k| k.strip_prefix(CAP_PREFIX))
                .map(|city| {
                    Ok((
                        city.to_string(),
                        kv.require(&format!("{CAP_PREFIX}{city}"))?,
                    ))
                })
                .collect::<Result<_>>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.gen.write_key_values(&mut kv);
        self.train.write_key_values(&mut kv);
        kv.set("replan_every", self.controller.replan_every);
        if let Some(h) = self.controller.plan_horizon {
            kv.set("plan_horizon", h);
        }
        kv.set("deterministic_sampling", self.controller.deterministic);
        kv.set("gamma", self.controller.gamma);
        kv.set_list("bc_hidden", &self.bc.hidden);
        kv.set("bc_epochs", self.bc.epochs);
        kv.set("bc_lr", self.bc.lr);
        kv.set("bc_batch_rows", self.bc.batch_rows);
        kv.set("bc_seed", self.bc.seed);
        kv.set("beta", self.beta);
        kv.set("plan_seed", self.plan_seed);
        kv.set_list("gamma_grid", &self.gamma_grid);
        for (city, cap) in &self.cap_overrides {
            kv.set(&format!("{CAP_PREFIX}{city}"), cap);
        }
        kv
    }

    /// Built-in city profiles with the operator caps applied.
    pub fn profile_pool(&self) -> Vec<CityProfile> {
        let mut pool = default_city_pool();
        for p in &mut pool {
            if let Some(&cap) = self.cap_overrides.get(&p.city_id) {
                p.cap_c = cap;
                p.tolerance_delta = DELTA_FRACTION * cap;
            }
        }
        pool
    }

    pub fn main_profiles(&self) -> Result<Vec<CityProfile>> {
        select_profiles(&self.profile_pool(), &self.gen.main_cities)
    }

    pub fn cold_profiles(&self) -> Result<Vec<CityProfile>> {
        select_profiles(&self.profile_pool(), &self.gen.cold_cities)
    }

    pub fn generate(&self) -> Result<Splits> {
        generate(&self.profile_pool(), &self.gen)
    }

    pub fn train_days(&self) -> Vec<u32> {
        (0..self.gen.train_days).collect()
    }

    pub fn test_days(&self) -> Vec<u32> {
        (self.gen.train_days..self.gen.days).collect()
    }
}

/// Shared models plus one fine-tuned decoder per target city.
#[derive(Debug, Clone)]
pub struct TrainedPlanner {
    pub shared: PlannerModels,
    pub city_decoders: BTreeMap<String, InverseDecoder>,
    pub denoiser_curve: LossCurve,
    pub decoder_curve: LossCurve,
    pub finetune_curves: BTreeMap<String, LossCurve>,
}

impl TrainedPlanner {
    /// Models for one city: its fine-tuned decoder when available.
    pub fn for_city(&self, city: &str) -> PlannerModels {
        let mut m = self.shared.clone();
        if let Some(d) = self.city_decoders.get(city) {
            m.decoder = d.clone();
        }
        m
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.shared.save_shared(dir)?;
        for (city, d) in &self.city_decoders {
            d.mlp
                .to_checkpoint()
                .save(dir.join(PlannerModels::city_decoder_file(city)))?;
        }
        self.denoiser_curve
            .write_csv(dir.join("loss_denoiser.csv"))?;
        self.decoder_curve.write_csv(dir.join("loss_decoder.csv"))?;
        for (city, c) in &self.finetune_curves {
            c.write_csv(dir.join(format!("loss_finetune-{city}.csv")))?;
        }
        Ok(())
    }
}

/// Stage one: fit normalizers and pretrain both networks on the pooled logs.
pub fn pretrain(
    train: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<(PlannerModels, LossCurve, LossCurve)> {
    let pre = Preprocessor::fit(train, DELTA_FRACTION)?;
    let examples = pre.examples(train)?;
    let (denoiser, dcurve) = pretrain_denoiser(&examples, &pre, cfg)?;
    let schedule = cfg.schedule()?;
    let noise = resolve_plan_noise(cfg, &denoiser, &schedule, &examples, &pre)?;
    let (decoder, icurve) = pretrain_decoder(&examples, &pre, cfg, &noise)?;
    Ok((
        PlannerModels {
            pre,
            denoiser,
            decoder,
            schedule,
        },
        dcurve,
        icurve,
    ))
}

/// Stage two: anchored decoder fine-tuning on one city's logs. Registers the
/// city's ride scale when it was not part of pretraining.
pub fn adapt_city(
    models: &mut PlannerModels,
    city_logs: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<(InverseDecoder, LossCurve)> {
    if city_logs.is_empty() {
        return Err(Error::EmptyDataset("no logs for the target city".into()));
    }
    let city = &city_logs[0].city_id;
    if !models.pre.conditioning.ride_scale.contains_key(city) {
        models.pre.conditioning.add_ride_scales(city_logs)?;
    }
    let examples = models.pre.examples(city_logs)?;
    let noise = resolve_plan_noise(
        cfg,
        &models.denoiser,
        &models.schedule,
        &examples,
        &models.pre,
    )?;
    finetune(&models.decoder, &examples, &models.pre, cfg, &noise)
}

pub fn train_planner(
    train: &[Trajectory],
    cities: &[String],
    cfg: &TrainConfig,
) -> Result<TrainedPlanner> {
    let (mut shared, denoiser_curve, decoder_curve) = pretrain(train, cfg)?;
    let mut city_decoders = BTreeMap::new();
    let mut finetune_curves = BTreeMap::new();
    for city in cities {
        let (dec, curve) = adapt_city(&mut shared, &city_subset(train, city), cfg)?;
        city_decoders.insert(city.clone(), dec);
        finetune_curves.insert(city.clone(), curve);
    }
    Ok(TrainedPlanner {
        shared,
        city_decoders,
        denoiser_curve,
        decoder_curve,
        finetune_curves,
    })
}

fn jobs(profiles: &[CityProfile], days: &[u32]) -> Vec<(CityProfile, u32)> {
    profiles
        .iter()
        .flat_map(|p| days.iter().map(move |&d| (p.clone(), d)))
        .collect()
}

/// Controller rollouts on `days`, plus every decision latency in job order.
pub fn evaluate_controller(
    planner: &TrainedPlanner,
    profiles: &[CityProfile],
    days: &[u32],
    cfg: &ExperimentConfig,
    gamma: f64,
) -> Result<(EvalReport, Vec<Duration>)> {
    let per_city: BTreeMap<String, PlannerModels> = profiles
        .iter()
        .map(|p| (p.city_id.clone(), planner.for_city(&p.city_id)))
        .collect();
    let ccfg = ControllerConfig {
        gamma,
        ..cfg.controller.clone()
    };
    let times = std::sync::Mutex::new(BTreeMap::new());
    let report = evaluate("controller", &jobs(profiles, days), cfg.beta, |p, d| {
        let models = &per_city[&p.city_id];
        let ctrl = Controller::new(models, ccfg.clone())?;
        let ctx =
            models
                .pre
                .conditioning
                .deployment(&p.city_id, p.cap_c, p.tolerance_delta, 1.0)?;
        let day = DaySpec {
            day_index: d,
            window_minutes: cfg.gen.window_minutes,
        };
        let (rec, state) = ctrl.run_day(
            p,
            &ctx,
            day,
            &env_rng(cfg.gen.seed, &p.city_id, d),
            cfg.plan_seed,
        )?;
        times
            .lock()
            .expect("no panics while holding the lock")
            .insert((p.city_id.clone(), d), state.decision_times);
        Ok(rec)
    })?;
    let times = times.into_inner().expect("lock not poisoned");
    let ordered = jobs(profiles, days)
        .iter()
        .flat_map(|(p, d)| times[&(p.city_id.clone(), *d)].clone())
        .collect();
    Ok((report, ordered))
}

/// Tune one constant per city on training days, then roll it out on `days`.
pub fn evaluate_fixed(
    profiles: &[CityProfile],
    days: &[u32],
    cfg: &ExperimentConfig,
) -> Result<(EvalReport, BTreeMap<String, FixedLambdaTuning>)> {
    let mut tunings = BTreeMap::new();
    for p in profiles {
        let t = tune_fixed_lambda(
            p,
            &cfg.train_days(),
            cfg.gen.window_minutes,
            cfg.gen.seed,
            calibrated_lambda(p),
        )?;
        tunings.insert(p.city_id.clone(), t);
    }
    let report = evaluate("fixed-lambda", &jobs(profiles, days), cfg.beta, |p, d| {
        let ctx = crate::dataset::logging_context(p)?;
        rollout(
            p,
            DaySpec {
                day_index: d,
                window_minutes: cfg.gen.window_minutes,
            },
            &mut FixedLambda::new(tunings[&p.city_id].best)?,
            &ctx,
            &env_rng(cfg.gen.seed, &p.city_id, d),
        )
    })?;
    Ok((report, tunings))
}

/// Behavior cloning on the pooled training logs, rolled out on `days`.
pub fn evaluate_bc(
    train: &[Trajectory],
    profiles: &[CityProfile],
    days: &[u32],
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let policy = train_bc(train, &cfg.bc)?;
    evaluate("bc", &jobs(profiles, days), cfg.beta, |p, d| {
        let ctx = crate::dataset::logging_context(p)?;
        rollout(
            p,
            DaySpec {
                day_index: d,
                window_minutes: cfg.gen.window_minutes,
            },
            &mut policy.clone(),
            &ctx,
            &env_rng(cfg.gen.seed, &p.city_id, d),
        )
    })
}

/// Everything the desk experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub planner: TrainedPlanner,
    pub controller: EvalReport,
    pub fixed: EvalReport,
    pub bc: EvalReport,
    pub fixed_tuning: BTreeMap<String, FixedLambdaTuning>,
    pub vs_fixed: PairedComparison,
    pub vs_bc: PairedComparison,
    pub decision_times: Vec<Duration>,
    pub stage_times: Vec<(&'static str, Duration)>,
}

impl ExperimentOutcome {
    pub fn total_time(&self) -> Duration {
        self.stage_times.iter().map(|s| s.1).sum()
    }

    pub fn mean_decision_time(&self) -> Duration {
        let n = self.decision_times.len().max(1) as u32;
        self.decision_times.iter().sum::<Duration>() / n
    }
}

pub fn run_experiment(splits: &Splits, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let profiles = cfg.main_profiles()?;
    let test_days = cfg.test_days();
    let mut stage_times = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, stage_times: &mut Vec<(&'static str, Duration)>| {
        stage_times.push((name, clock.elapsed()));
        clock = Instant::now();
    };
    let planner = train_planner(&splits.train, &cfg.gen.main_cities, &cfg.train)?;
    lap("train", &mut stage_times);
    let (controller, decision_times) =
        evaluate_controller(&planner, &profiles, &test_days, cfg, cfg.controller.gamma)?;
    lap("controller", &mut stage_times);
    let (fixed, fixed_tuning) = evaluate_fixed(&profiles, &test_days, cfg)?;
    lap("fixed-lambda", &mut stage_times);
    let bc = evaluate_bc(&splits.train, &profiles, &test_days, cfg)?;
    lap("bc", &mut stage_times);
    Ok(ExperimentOutcome {
        vs_fixed: controller.compare(&fixed)?,
        vs_bc: controller.compare(&bc)?,
        planner,
        controller,
        fixed,
        bc,
        fixed_tuning,
        decision_times,
        stage_times,
    })
}
