//! Deployed decision loop: observed prefix -> sampled future -> decoded multiplier.

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, ArrayView2};

use crate::diffusion::{reverse_sample, NoiseSchedule, SampleOptions, COSINE_OFFSET};
use crate::error::{Error, Result};
use crate::market::{rollout, CityProfile, DaySpec, RolloutRecord};
use crate::net::{Checkpoint, InverseDecoder, TemporalDenoiser};
use crate::rng::{hash_str, stream_id, SeededRng};
use crate::train::Preprocessor;
use crate::types::{check_action, horizon, Context, STATE_DIM};

/// Everything needed to plan: normalizers, both networks and the schedule.
#[derive(Debug, Clone)]
pub struct PlannerModels {
    pub pre: Preprocessor,
    pub denoiser: TemporalDenoiser,
    pub decoder: InverseDecoder,
    pub schedule: NoiseSchedule,
}

impl PlannerModels {
    pub const PREPROCESS: &'static str = "preprocess.json";
    pub const DENOISER: &'static str = "denoiser.json";
    pub const DECODER: &'static str = "decoder.json";

    /// File name of a city's fine-tuned decoder.
    pub fn city_decoder_file(city: &str) -> String {
        format!("decoder-{city}.json")
    }

    pub fn save_shared(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::PREPROCESS);
        std::fs::write(&path, serde_json::to_string_pretty(&self.pre)?)
            .map_err(|e| Error::io(&path, e))?;
        self.denoiser
            .to_checkpoint()
            .save(dir.join(Self::DENOISER))?;
        self.decoder
            .mlp
            .to_checkpoint()
            .save(dir.join(Self::DECODER))
    }

    /// Load shared models; with `city`, prefer that city's fine-tuned decoder when present.
    pub fn load(dir: impl AsRef<Path>, city: Option<&str>, diffusion_steps: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let pre = load_preprocessor(dir)?;
        let denoiser = TemporalDenoiser::from_checkpoint(&Checkpoint::load(
            dir.join(Self::DENOISER),
            TemporalDenoiser::KIND,
        )?)?;
        let tuned = city.map(|c| dir.join(Self::city_decoder_file(c)));
        let dec_path = match tuned {
            Some(p) if p.exists() => p,
            _ => dir.join(Self::DECODER),
        };
        let decoder = InverseDecoder {
            mlp: crate::net::Mlp::from_checkpoint(&Checkpoint::load(
                dec_path,
                crate::net::Mlp::KIND,
            )?)?,
        };
        Ok(Self {
            pre,
            denoiser,
            decoder,
            schedule: NoiseSchedule::cosine(diffusion_steps, COSINE_OFFSET)?,
        })
    }
}

pub fn load_preprocessor(dir: &Path) -> Result<Preprocessor> {
    let path = dir.join(PlannerModels::PREPROCESS);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.clone(),
            hint: "run train-diffusion first".into(),
        },
        _ => Error::io(&path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Windows between diffusion samples; in between the cached plan is reused.
    pub replan_every: usize,
    /// Generate only this many future rows (and keep the most recent `T - h`
    /// history rows). `None` diffuses to the end of the day.
    pub plan_horizon: Option<usize>,
    pub deterministic: bool,
    /// Steering multiplier on the target-Rides signal.
    pub gamma: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            replan_every: 1,
            plan_horizon: None,
            deterministic: false,
            gamma: 1.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replan_every == 0 {
            return Err(Error::Config("replan_every must be >= 1".into()));
        }
        if self.plan_horizon == Some(0) {
            return Err(Error::Config("plan_horizon must be >= 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Cached plan: normalized rows `offset..offset + rows`, sampled at window `made_at`.
#[derive(Debug, Clone, PartialEq)]
struct Plan {
    made_at: usize,
    offset: usize,
    rows: Array2<f64>,
}

/// Per-day controller state. History only grows.
#[derive(Debug, Clone)]
pub struct ControllerState {
    history: Vec<Vec<f64>>,
    normalized: Vec<Vec<f64>>,
    pub ctx: Context,
    pub day: DaySpec,
    horizon: usize,
    plan: Option<Plan>,
    pub decision_times: Vec<Duration>,
}

impl ControllerState {
    pub fn new(ctx: Context, day: DaySpec) -> Result<Self> {
        ctx.validate()?;
        Ok(Self {
            history: Vec::new(),
            normalized: Vec::new(),
            ctx,
            day,
            horizon: horizon(day.window_minutes)?,
            plan: None,
            decision_times: Vec::new(),
        })
    }

    pub fn history(&self) -> &[Vec<f64>] {
        &self.history
    }

    pub fn observe(&mut self, x: &[f64], models: &PlannerModels) -> Result<()> {
        if x.len() != STATE_DIM {
            return Err(Error::Dimension {
                what: "observed state",
                expected: STATE_DIM,
                actual: x.len(),
            });
        }
        if self.history.len() >= self.horizon {
            return Err(Error::Index {
                what: "window",
                index: self.history.len(),
                limit: self.horizon,
            });
        }
        self.history.push(x.to_vec());
        self.normalized.push(models.pre.states.apply(x));
        Ok(())
    }

    fn normalized_rows(&self, from: usize) -> Array2<f64> {
        let rows = &self.normalized[from..];
        let mut m = Array2::zeros((rows.len(), STATE_DIM));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i)
                .assign(&ndarray::ArrayView1::from(r.as_slice()));
        }
        m
    }
}

pub struct Controller<'a> {
    pub models: &'a PlannerModels,
    pub cfg: ControllerConfig,
}

impl<'a> Controller<'a> {
    pub fn new(models: &'a PlannerModels, cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        if models.decoder.ctx_dim() != models.pre.ctx_dim() {
            return Err(Error::Dimension {
                what: "decoder context",
                expected: models.pre.ctx_dim(),
                actual: models.decoder.ctx_dim(),
            });
        }
        Ok(Self { models, cfg })
    }

    fn ctx_vec(&self, state: &ControllerState, window: usize) -> Vec<f64> {
        let c = state.ctx.with_target_scale(self.cfg.gamma).at_time(
            window,
            state.day.window_minutes,
            state.day.day_index,
        );
        self.models.pre.contexts.apply(&c.to_vec())
    }

    fn sample_plan(&self, state: &ControllerState, t: usize, rng: &mut SeededRng) -> Result<Plan> {
        let k = t + 1;
        let total = state.horizon;
        let (offset, len) = match self.cfg.plan_horizon {
            Some(h) => {
                let future = h.min(total - k);
                let keep = (total - future).min(k);
                (k - keep, keep + future)
            }
            None => (0, total),
        };
        let prefix = state.normalized_rows(offset);
        let ctx = self.ctx_vec(state, k.min(total - 1));
        let suffix = reverse_sample(
            prefix.view(),
            len,
            &ctx,
            &self.models.schedule,
            &self.models.denoiser,
            rng,
            SampleOptions {
                deterministic: self.cfg.deterministic,
            },
        )?;
        let mut rows = Array2::zeros((len, STATE_DIM));
        rows.slice_mut(s![..prefix.nrows(), ..]).assign(&prefix);
        rows.slice_mut(s![prefix.nrows().., ..]).assign(&suffix);
        Ok(Plan {
            made_at: t,
            offset,
            rows,
        })
    }

    /// Decide `lambda_t`. The history must hold exactly `x_0..x_t`.
    pub fn decide(
        &self,
        state: &mut ControllerState,
        t: usize,
        rng: &mut SeededRng,
    ) -> Result<f64> {
        let start = Instant::now();
        if t >= state.horizon {
            return Err(Error::Index {
                what: "window",
                index: t,
                limit: state.horizon,
            });
        }
        if state.history.len() != t + 1 {
            return Err(Error::Invariant(format!(
                "decision at window {t} with {} observed states",
                state.history.len()
            )));
        }
        let due = match &state.plan {
            None => true,
            Some(p) => t - p.made_at >= self.cfg.replan_every || p.made_at > t,
        };
        if due {
            state.plan = Some(self.sample_plan(state, t, rng)?);
        }
        let plan = state.plan.as_ref().expect("plan just ensured");
        // realized rows up to t, planned row for t + 1
        let lo = t.saturating_sub(2);
        let hi = (t + 1).min(state.horizon - 1);
        let mut window = Array2::zeros((hi - lo + 1, STATE_DIM));
        for (i, r) in (lo..=hi).enumerate() {
            if r <= t {
                window
                    .row_mut(i)
                    .assign(&ndarray::ArrayView1::from(state.normalized[r].as_slice()));
            } else {
                window.row_mut(i).assign(&plan.rows.row(r - plan.offset));
            }
        }
        let lambda = self
            .models
            .decoder
            .decode(window.view(), t - lo, &self.ctx_vec(state, t))?;
        check_action(lambda)
            .map_err(|_| Error::Invariant(format!("decoder produced {lambda} at window {t}")))?;
        state.decision_times.push(start.elapsed());
        Ok(lambda)
    }

    /// Closed-loop day on the simulator.
    pub fn run_day(
        &self,
        profile: &CityProfile,
        ctx: &Context,
        day: DaySpec,
        env: &SeededRng,
        seed: u64,
    ) -> Result<(RolloutRecord, ControllerState)> {
        let mut state = ControllerState::new(ctx.clone(), day)?;
        let plan_rng = planning_rng(seed, &profile.city_id, day.day_index);
        let mut policy = |x: &[f64], t: usize, _: &Context| {
            state.observe(x, self.models)?;
            self.decide(&mut state, t, &mut plan_rng.derive(t as u64))
        };
        let record = rollout(profile, day, &mut policy, ctx, env)?;
        Ok((record, state))
    }

    /// Decisions for a fixed realized history, as the controller would have made them.
    pub fn replay(
        &self,
        states: ArrayView2<f64>,
        ctx: &Context,
        day: DaySpec,
        city: &str,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let mut state = ControllerState::new(ctx.clone(), day)?;
        let plan_rng = planning_rng(seed, city, day.day_index);
        let mut out = Vec::with_capacity(states.nrows());
        for (t, row) in states.rows().into_iter().enumerate() {
            state.observe(&row.to_vec(), self.models)?;
            out.push(self.decide(&mut state, t, &mut plan_rng.derive(t as u64))?);
        }
        Ok(out)
    }
}

/// Sampling stream for one controlled day.
pub fn planning_rng(seed: u64, city: &str, day_index: u32) -> SeededRng {
    SeededRng::new(seed, stream_id(&[hash_str(city), day_index as u64, 0x9A4]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_default, GenConfig};
    use crate::market::{default_city_pool, env_rng};
    use crate::net::DenoiserConfig;
    use crate::train::Preprocessor;

    fn models() -> (PlannerModels, Vec<crate::trajectory::Trajectory>) {
        let cfg = GenConfig {
            days: 3,
            train_days: 2,
            window_minutes: 10,
            main_cities: vec!["city-a".into(), "city-b".into()],
            cold_cities: vec![],
            ..GenConfig::default()
        };
        let s = generate_default(&cfg).unwrap();
        let pre = Preprocessor::fit(&s.train, 0.1).unwrap();
        let mut rng = SeededRng::new(0, 0);
        let mut dcfg = DenoiserConfig::small(STATE_DIM, pre.ctx_dim());
        dcfg.width = 8;
        let denoiser = TemporalDenoiser::new(dcfg, &mut rng).unwrap();
        let mut decoder = InverseDecoder::new(pre.ctx_dim(), vec![8], &mut rng).unwrap();
        // make the target-rides input matter so steering is visible
        for v in &mut decoder.mlp.params.values {
            *v *= 40.0;
        }
        (
            PlannerModels {
                pre,
                denoiser,
                decoder,
                schedule: NoiseSchedule::cosine(5, COSINE_OFFSET).unwrap(),
            },
            s.train,
        )
    }

    fn ctx(m: &PlannerModels, city: &str) -> Context {
        m.pre.conditioning.deployment(city, 0.1, 0.01, 1.0).unwrap()
    }

    #[test]
    fn first_window_decodes_in_range() {
        let (m, train) = models();
        let c = Controller::new(&m, ControllerConfig::default()).unwrap();
        let day = DaySpec {
            day_index: 0,
            window_minutes: 10,
        };
        let mut st = ControllerState::new(ctx(&m, "city-a"), day).unwrap();
        st.observe(&train[0].states[0], &m).unwrap();
        let lam = c.decide(&mut st, 0, &mut SeededRng::new(1, 1)).unwrap();
        assert!(lam > 0.0 && lam <= 30.0);
        assert!(c.decide(&mut st, 1, &mut SeededRng::new(1, 1)).is_err());
        assert!(c.decide(&mut st, 144, &mut SeededRng::new(1, 1)).is_err());
    }

    #[test]
    fn replay_is_deterministic_and_steerable() {
        let (m, train) = models();
        let day = DaySpec {
            day_index: 0,
            window_minutes: 10,
        };
        let states = train[0].states_array();
        let base = Controller::new(&m, ControllerConfig::default()).unwrap();
        let a = base
            .replay(
                states.slice(s![..20, ..]),
                &ctx(&m, "city-a"),
                day,
                "city-a",
                3,
            )
            .unwrap();
        let b = base
            .replay(
                states.slice(s![..20, ..]),
                &ctx(&m, "city-a"),
                day,
                "city-a",
                3,
            )
            .unwrap();
        assert_eq!(a, b);
        let steered = Controller::new(
            &m,
            ControllerConfig {
                gamma: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        let g = steered
            .replay(
                states.slice(s![..20, ..]),
                &ctx(&m, "city-a"),
                day,
                "city-a",
                3,
            )
            .unwrap();
        assert_ne!(a, g);
    }

    #[test]
    fn cached_plans_and_short_horizons_work() {
        let (m, train) = models();
        let day = DaySpec {
            day_index: 0,
            window_minutes: 10,
        };
        let states = train[0].states_array();
        for cfg in [
            ControllerConfig {
                replan_every: 4,
                ..Default::default()
            },
            ControllerConfig {
                plan_horizon: Some(8),
                ..Default::default()
            },
        ] {
            let c = Controller::new(&m, cfg).unwrap();
            let out = c
                .replay(states.view(), &ctx(&m, "city-b"), day, "city-b", 1)
                .unwrap();
            assert_eq!(out.len(), 144);
            assert!(out.iter().all(|&l| l > 0.0 && l <= 30.0));
        }
        assert!(Controller::new(
            &m,
            ControllerConfig {
                replan_every: 0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn prefix_given_to_sampler_is_the_realized_history() {
        let (m, train) = models();
        let day = DaySpec {
            day_index: 0,
            window_minutes: 10,
        };
        let c = Controller::new(&m, ControllerConfig::default()).unwrap();
        let mut st = ControllerState::new(ctx(&m, "city-a"), day).unwrap();
        for t in 0..10 {
            st.observe(&train[0].states[t], &m).unwrap();
            c.decide(&mut st, t, &mut SeededRng::new(0, t as u64))
                .unwrap();
            let plan = st.plan.as_ref().unwrap();
            for r in 0..=t {
                assert_eq!(
                    plan.rows.row(r).to_vec(),
                    m.pre.states.apply(&train[0].states[r])
                );
            }
        }
    }

    #[test]
    fn zero_demand_day_still_decides() {
        let (m, _) = models();
        let mut p = default_city_pool()[0].clone();
        p.demand_curve = [0.0; 24];
        let c = Controller::new(
            &m,
            ControllerConfig {
                plan_horizon: Some(4),
                ..Default::default()
            },
        )
        .unwrap();
        let day = DaySpec {
            day_index: 1,
            window_minutes: 10,
        };
        let (rec, st) = c
            .run_day(&p, &ctx(&m, "city-a"), day, &env_rng(0, "city-a", 1), 0)
            .unwrap();
        assert_eq!(rec.c_real(), 0.0);
        assert_eq!(st.decision_times.len(), 144);
        assert!(rec.trajectory.actions.iter().all(|&l| l > 0.0 && l <= 30.0));
    }
}
