//! Offline logs from a noisy behavior policy, split for pretraining,
//! held-out evaluation and cold-start adaptation.

use std::f64::consts::TAU;
use std::path::Path;

use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::market::{
    default_city_pool, env_rng, rollout, CityProfile, DaySpec, Policy, RolloutRecord,
};
use crate::rng::{hash_str, stream_id, SeededRng};
use crate::trajectory::{write_jsonl, Trajectory};
use crate::types::{horizon, Context, MAX_ACTION};

/// Smallest logged action.
const MIN_LOGGED: f64 = 0.02;

/// Constant multiplier whose subsidy rate roughly equals the cap:
/// with uncapped pairs the day rate is `kappa * margin`, so solve `kappa * margin = C`.
pub fn calibrated_lambda(profile: &CityProfile) -> f64 {
    let inv = 2.0 * profile.cap_c / profile.margin - (profile.cap_c + profile.tolerance_delta);
    if inv > 0.0 {
        (1.0 / inv).clamp(MIN_LOGGED, MAX_ACTION)
    } else {
        MAX_ACTION
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorConfig {
    /// AR(1) coefficient of the log-multiplier noise.
    pub ar: f64,
    pub ar_sigma: f64,
    /// Relative amplitude of the daily sinusoid.
    pub amplitude: f64,
    /// Log-sd of the per-day level.
    pub day_sigma: f64,
    /// Log-gain on the relative gap between the running subsidy rate and
    /// the day's pacing target. Zero logs open-loop.
    pub pacing_gain: f64,
    /// Log-sd of the per-day pacing target around the cap.
    pub target_sigma: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            ar: 0.97,
            ar_sigma: 0.05,
            amplitude: 0.15,
            day_sigma: 0.15,
            pacing_gain: 8.0,
            target_sigma: 0.15,
        }
    }
}

/// `lambda_t = base * day * exp(ar noise) * (1 + A sin(2 pi t / T + phase)) * pacing`, clamped.
///
/// The pacing factor is `exp(gain * elapsed * gap)` with `gap` the running
/// rate's relative excess over the day's target, clipped to [-1, 1]. Scaling by
/// the elapsed fraction keeps the noisy early-day rate from dominating.
#[derive(Debug, Clone)]
pub struct BehaviorPolicy {
    level: f64,
    target_scale: f64,
    phase: f64,
    horizon: usize,
    cfg: BehaviorConfig,
    noise: f64,
    rng: SeededRng,
}

impl BehaviorPolicy {
    pub fn new(base: f64, horizon: usize, cfg: BehaviorConfig, mut rng: SeededRng) -> Self {
        let level = base * (cfg.day_sigma * rng.normal()).exp();
        let target_scale = (cfg.target_sigma * rng.normal()).exp();
        let phase = TAU * rng.uniform();
        let noise = cfg.ar_sigma / (1.0 - cfg.ar * cfg.ar).max(1e-6).sqrt() * rng.normal();
        Self {
            level,
            target_scale,
            phase,
            horizon,
            cfg,
            noise,
            rng,
        }
    }
}

impl Policy for BehaviorPolicy {
    fn act(&mut self, state: &[f64], t: usize, ctx: &Context) -> Result<f64> {
        let wave =
            1.0 + self.cfg.amplitude * (TAU * t as f64 / self.horizon as f64 + self.phase).sin();
        let target = ctx.cap_c * self.target_scale;
        let rate = state.last().copied().unwrap_or(target);
        let elapsed = t as f64 / self.horizon as f64;
        let gap = ((rate - target) / target).clamp(-1.0, 1.0);
        let pacing = (self.cfg.pacing_gain * elapsed * gap).exp();
        let lambda = (self.level * self.noise.exp() * wave * pacing).clamp(MIN_LOGGED, MAX_ACTION);
        self.noise = self.cfg.ar * self.noise + self.cfg.ar_sigma * self.rng.normal();
        Ok(lambda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub days: u32,
    pub train_days: u32,
    pub window_minutes: u32,
    pub main_cities: Vec<String>,
    pub cold_cities: Vec<String>,
    pub behavior: BehaviorConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            days: 28,
            train_days: 21,
            window_minutes: 5,
            main_cities: ["city-a", "city-b", "city-c"].map(String::from).to_vec(),
            cold_cities: ["city-d", "city-e", "city-f"].map(String::from).to_vec(),
            behavior: BehaviorConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        horizon(self.window_minutes)?;
        if self.train_days == 0 || self.train_days >= self.days {
            return Err(Error::Config("need 0 < train_days < days".into()));
        }
        if self.main_cities.is_empty() {
            return Err(Error::Config("main_cities is empty".into()));
        }
        let b = &self.behavior;
        if !(b.ar.abs() < 1.0
            && b.ar_sigma >= 0.0
            && b.day_sigma >= 0.0
            && b.pacing_gain >= 0.0
            && b.target_sigma >= 0.0
            && (0.0..1.0).contains(&b.amplitude))
        {
            return Err(Error::Config(format!("invalid behavior settings {b:?}")));
        }
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            seed: kv.get_or("seed", d.seed)?,
            days: kv.get_or("days", d.days)?,
            train_days: kv.get_or("train_days", d.train_days)?,
            window_minutes: kv.get_or("window_minutes", d.window_minutes)?,
            main_cities: kv.get_list("main_cities")?.unwrap_or(d.main_cities),
            cold_cities: kv.get_list("cold_cities")?.unwrap_or(d.cold_cities),
            behavior: BehaviorConfig {
                ar: kv.get_or("behavior_ar", d.behavior.ar)?,
                ar_sigma: kv.get_or("behavior_ar_sigma", d.behavior.ar_sigma)?,
                amplitude: kv.get_or("behavior_amplitude", d.behavior.amplitude)?,
                day_sigma: kv.get_or("behavior_day_sigma", d.behavior.day_sigma)?,
                pacing_gain: kv.get_or("behavior_pacing_gain", d.behavior.pacing_gain)?,
                target_sigma: kv.get_or("behavior_target_sigma", d.behavior.target_sigma)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_key_values(&self, kv: &mut KeyValues) {
        kv.set("seed", self.seed);
        kv.set("days", self.days);
        kv.set("train_days", self.train_days);
        kv.set("window_minutes", self.window_minutes);
        kv.set_list("main_cities", &self.main_cities);
        kv.set_list("cold_cities", &self.cold_cities);
        kv.set("behavior_ar", self.behavior.ar);
        kv.set("behavior_ar_sigma", self.behavior.ar_sigma);
        kv.set("behavior_amplitude", self.behavior.amplitude);
        kv.set("behavior_day_sigma", self.behavior.day_sigma);
        kv.set("behavior_pacing_gain", self.behavior.pacing_gain);
        kv.set("behavior_target_sigma", self.behavior.target_sigma);
    }
}

/// Look up profiles by id.
pub fn select_profiles(pool: &[CityProfile], ids: &[String]) -> Result<Vec<CityProfile>> {
    ids.iter()
        .map(|id| {
            pool.iter()
                .find(|p| &p.city_id == id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown city {id}")))
        })
        .collect()
}

/// Context used while logging; the behavior policy reads only the cap.
pub fn logging_context(profile: &CityProfile) -> Result<Context> {
    Context::new(vec![1.0], profile.cap_c, profile.tolerance_delta, 1.0)
}

/// One logged day under the behavior policy.
pub fn behavior_day(
    profile: &CityProfile,
    day_index: u32,
    cfg: &GenConfig,
) -> Result<RolloutRecord> {
    let t = horizon(cfg.window_minutes)?;
    let prng = SeededRng::new(
        cfg.seed,
        stream_id(&[hash_str(&profile.city_id), day_index as u64, 0xBE4]),
    );
    let mut policy = BehaviorPolicy::new(calibrated_lambda(profile), t, cfg.behavior.clone(), prng);
    rollout(
        profile,
        DaySpec {
            day_index,
            window_minutes: cfg.window_minutes,
        },
        &mut policy,
        &logging_context(profile)?,
        &env_rng(cfg.seed, &profile.city_id, day_index),
    )
}

/// The generated splits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    /// Main cities, training days.
    pub train: Vec<Trajectory>,
    /// Main cities, held-out days.
    pub test: Vec<Trajectory>,
    /// Cold-start cities, every day (adapt on training days, evaluate on the rest).
    pub cold_start: Vec<Trajectory>,
}

impl Splits {
    pub const FILES: [&'static str; 3] = ["train.jsonl", "test.jsonl", "cold_start.jsonl"];

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(dir.join(Self::FILES[0]), &self.train)?;
        write_jsonl(dir.join(Self::FILES[1]), &self.test)?;
        write_jsonl(dir.join(Self::FILES[2]), &self.cold_start)
    }
}

fn days_for(
    profiles: &[CityProfile],
    days: std::ops::Range<u32>,
    cfg: &GenConfig,
) -> Result<Vec<Trajectory>> {
    let jobs: Vec<(usize, u32)> = profiles
        .iter()
        .enumerate()
        .flat_map(|(i, _)| days.clone().map(move |d| (i, d)))
        .collect();
    jobs.par_iter()
        .map(|&(i, d)| behavior_day(&profiles[i], d, cfg).map(|r| r.trajectory))
        .collect()
}

pub fn generate(pool: &[CityProfile], cfg: &GenConfig) -> Result<Splits> {
    cfg.validate()?;
    let main = select_profiles(pool, &cfg.main_cities)?;
    let cold = select_profiles(pool, &cfg.cold_cities)?;
    Ok(Splits {
        train: days_for(&main, 0..cfg.train_days, cfg)?,
        test: days_for(&main, cfg.train_days..cfg.days, cfg)?,
        cold_start: days_for(&cold, 0..cfg.days, cfg)?,
    })
}

pub fn generate_default(cfg: &GenConfig) -> Result<Splits> {
    generate(&default_city_pool(), cfg)
}
