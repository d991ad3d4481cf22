use std::collections::VecDeque;

use crate::dual_map::{map_window_subsidies, DualParams};
use crate::error::{Error, Result};
use crate::rng::{hash_str, stream_id, SeededRng};
use crate::trajectory::Trajectory;
use crate::types::{
    check_action, horizon, is_valid_action, time_features, Context, MarketState, PairEconomics,
    OBS_DIM,
};

use super::CityProfile;

/// Names of the observable features, in state order.
pub const FEATURE_NAMES: [&str; OBS_DIM] = [
    "hour_sin",
    "hour_cos",
    "dow_sin",
    "dow_cos",
    "demand_rate",
    "supply_proxy",
    "completion_rate",
    "rides_last",
    "gmv_last",
    "drv_last",
    "rides_roll6",
    "gmv_roll6",
    "drv_roll6",
    "pickup_km_last",
    "broadcast_last",
    "rides_to_date",
    "gmv_to_date",
    "remaining_fraction",
    "last_action",
];

const ROLLING: usize = 6;
const SHOCK_STREAM: u64 = 0;

/// Aggregates of one executed window.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WindowOutcome {
    pub completions: u64,
    pub rides: f64,
    pub gmv_completed: f64,
    pub drv: f64,
    pub subsidy_paid: f64,
    pub pairs_broadcast: u64,
    /// Sum of caps over completed pairs (upper bound on `subsidy_paid`).
    pub cap_completed: f64,
    /// Mean pickup distance over broadcast pairs (0 when none).
    pub mean_pickup_km: f64,
}

/// Broadcast pairs for window `t` with their pickup distances.
///
/// The draw order is fixed (count, then per pair: gmv, pickup, base), so the
/// pair list does not depend on any later decision.
pub fn generate_pairs(
    profile: &CityProfile,
    t: usize,
    window_minutes: u32,
    rng: &mut SeededRng,
) -> Result<Vec<(PairEconomics, f64)>> {
    let t_max = horizon(window_minutes)?;
    if t >= t_max {
        return Err(Error::Index {
            what: "window",
            index: t,
            limit: t_max,
        });
    }
    let n = rng.poisson(profile.pair_rate(t, window_minutes));
    let mut pairs = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let gmv = rng.lognormal(profile.gmv_mu, profile.gmv_sigma);
        let pickup_km = -profile.pickup_km_mean * (1.0 - rng.uniform()).ln();
        let base_prob = rng.uniform_range(profile.base_prob_lo, profile.base_prob_hi);
        let cap = profile.cap_frac * gmv;
        let raw_slope = profile.slope_base / (1.0 + profile.slope_distance_decay * pickup_km);
        // keep base + slope * cap <= 1 on the whole box
        let slope = raw_slope.min((1.0 - base_prob) / cap).max(1e-12);
        pairs.push((
            PairEconomics {
                reward: profile.margin * gmv,
                gmv,
                slope,
                cap,
                base_prob,
            },
            pickup_km,
        ));
    }
    Ok(pairs)
}

/// `min(1, base_prob + slope * b)` for `b` in the pair's box.
pub fn completion_prob(pair: &PairEconomics, b: f64) -> Result<f64> {
    if !(b >= 0.0 && b <= pair.cap) {
        return Err(Error::Range {
            what: "subsidy",
            value: b,
            range: "[0, pair cap]",
        });
    }
    Ok((pair.base_prob + pair.slope * b).min(1.0))
}

/// Thread the cumulative subsidy and GMV through one window.
/// Returns `(rho, cum_subsidy, cum_gmv)`; `rho = 0` while no GMV has completed.
pub fn update_rho(
    prev_cum_subsidy: f64,
    prev_cum_gmv: f64,
    outcome: &WindowOutcome,
) -> (f64, f64, f64) {
    let cum_subsidy = prev_cum_subsidy + outcome.subsidy_paid;
    let cum_gmv = prev_cum_gmv + outcome.gmv_completed;
    let rho = if cum_gmv > 0.0 {
        cum_subsidy / cum_gmv
    } else {
        0.0
    };
    (rho, cum_subsidy, cum_gmv)
}

/// Full simulator state before window `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: usize,
    pub horizon: usize,
    pub window_minutes: u32,
    pub day_index: u32,
    pub cum_subsidy: f64,
    pub cum_gmv: f64,
    pub cum_rides: f64,
    pub cum_drv: f64,
    pub supply: f64,
    pub last_action: f64,
    recent: VecDeque<[f64; 3]>,
    /// Observed augmented state `x_t`.
    pub state: MarketState,
}

struct Scales {
    pairs: f64,
    gmv: f64,
    day_pairs: f64,
}

impl Scales {
    fn of(profile: &CityProfile, window_minutes: u32, horizon: usize) -> Self {
        let pairs = profile.mean_pairs_per_window(window_minutes);
        Scales {
            pairs,
            gmv: pairs * profile.mean_gmv(),
            day_pairs: pairs * horizon as f64,
        }
    }
}

impl SimState {
    pub fn initial(profile: &CityProfile, day: DaySpec) -> Result<Self> {
        profile.validate()?;
        let horizon = horizon(day.window_minutes)?;
        let mut sim = SimState {
            t: 0,
            horizon,
            window_minutes: day.window_minutes,
            day_index: day.day_index,
            cum_subsidy: 0.0,
            cum_gmv: 0.0,
            cum_rides: 0.0,
            cum_drv: 0.0,
            supply: 0.5,
            last_action: 0.0,
            recent: VecDeque::with_capacity(ROLLING),
            state: MarketState::new(vec![0.0; OBS_DIM], 0.0)?,
        };
        let demand = profile.pair_rate(0, day.window_minutes)
            / profile.mean_pairs_per_window(day.window_minutes);
        sim.state.features = sim.features(profile, demand, &WindowOutcome::default());
        Ok(sim)
    }

    fn features(&self, profile: &CityProfile, demand: f64, last: &WindowOutcome) -> Vec<f64> {
        let sc = Scales::of(profile, self.window_minutes, self.horizon);
        let [hs, hc, ds, dc] = time_features(self.t, self.window_minutes, self.day_index);
        let n = self.recent.len().max(1) as f64;
        let roll = |k: usize| self.recent.iter().map(|r| r[k]).sum::<f64>() / n;
        let completion_rate = if last.pairs_broadcast > 0 {
            last.completions as f64 / last.pairs_broadcast as f64
        } else {
            0.0
        };
        let pickup = if last.pairs_broadcast > 0 {
            last.mean_pickup_km
        } else {
            profile.pickup_km_mean
        };
        let f = vec![
            hs,
            hc,
            ds,
            dc,
            demand,
            self.supply,
            completion_rate,
            last.rides / sc.pairs,
            last.gmv_completed / sc.gmv,
            last.drv / sc.gmv,
            roll(0),
            roll(1),
            roll(2),
            pickup,
            last.pairs_broadcast as f64 / sc.pairs,
            self.cum_rides / sc.day_pairs,
            self.cum_gmv / (sc.day_pairs * profile.mean_gmv()),
            1.0 - self.t as f64 / self.horizon as f64,
            self.last_action,
        ];
        debug_assert_eq!(f.len(), OBS_DIM);
        f
    }
}

/// Execute one window under control `lambda_t`.
///
/// Draw order per window: pairs, one uniform per pair for completion, then
/// two feature-noise normals. The order is independent of `lambda_t`, so two
/// policies run on the same stream face the same orders and the same
/// acceptance thresholds.
pub fn step(
    sim: &SimState,
    profile: &CityProfile,
    lambda_t: f64,
    rng: &mut SeededRng,
) -> Result<(SimState, WindowOutcome)> {
    check_action(lambda_t)?;
    if sim.t >= sim.horizon {
        return Err(Error::Index {
            what: "window",
            index: sim.t,
            limit: sim.horizon,
        });
    }
    let pairs = generate_pairs(profile, sim.t, sim.window_minutes, rng)?;
    let dual = DualParams::new(lambda_t, profile.cap_c, profile.tolerance_delta)?;
    let econ: Vec<PairEconomics> = pairs.iter().map(|(p, _)| *p).collect();
    let subsidies = map_window_subsidies(&dual, &econ)?;

    let mut out = WindowOutcome {
        pairs_broadcast: pairs.len() as u64,
        ..Default::default()
    };
    let mut pickup_sum = 0.0;
    for ((pair, pickup_km), &b) in pairs.iter().zip(&subsidies) {
        debug_assert!(b >= 0.0 && b <= pair.cap);
        let u = rng.uniform();
        pickup_sum += pickup_km;
        let completed = profile.force_completions || u < completion_prob(pair, b)?;
        if completed {
            out.completions += 1;
            out.gmv_completed += pair.gmv;
            out.subsidy_paid += b;
            out.cap_completed += pair.cap;
            out.drv += pair.gmv - pair.reward + b;
        }
    }
    out.rides = out.completions as f64;
    if !pairs.is_empty() {
        out.mean_pickup_km = pickup_sum / pairs.len() as f64;
    }

    let (rho, cum_subsidy, cum_gmv) = update_rho(sim.cum_subsidy, sim.cum_gmv, &out);
    let supply_noise = rng.normal();
    let demand_noise = rng.normal();

    let sc = Scales::of(profile, sim.window_minutes, sim.horizon);
    let mut next = sim.clone();
    next.t = sim.t + 1;
    next.cum_subsidy = cum_subsidy;
    next.cum_gmv = cum_gmv;
    next.cum_rides += out.rides;
    next.cum_drv += out.drv;
    next.last_action = lambda_t;
    if out.pairs_broadcast > 0 {
        let rate = out.completions as f64 / out.pairs_broadcast as f64;
        next.supply = (1.0 - profile.elasticity) * sim.supply + profile.elasticity * rate;
    }
    next.supply =
        (next.supply + profile.noise_sigma * profile.elasticity * supply_noise).clamp(0.0, 2.0);
    if next.recent.len() == ROLLING {
        next.recent.pop_front();
    }
    next.recent.push_back([
        out.rides / sc.pairs,
        out.gmv_completed / sc.gmv,
        out.drv / sc.gmv,
    ]);
    let demand = if next.t < next.horizon {
        profile.pair_rate(next.t, sim.window_minutes) / sc.pairs
            * (1.0 + profile.noise_sigma * demand_noise).max(0.0)
    } else {
        0.0
    };
    next.state = MarketState {
        features: next.features(profile, demand, &out),
        subsidy_rate_so_far: rho,
    };
    Ok((next, out))
}

/// Which day a rollout simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DaySpec {
    pub day_index: u32,
    pub window_minutes: u32,
}

/// A decision rule mapping the observed augmented state to `lambda_t`.
pub trait Policy {
    fn act(&mut self, state: &[f64], t: usize, ctx: &Context) -> Result<f64>;
}

impl<F> Policy for F
where
    F: FnMut(&[f64], usize, &Context) -> Result<f64>,
{
    fn act(&mut self, state: &[f64], t: usize, ctx: &Context) -> Result<f64> {
        self(state, t, ctx)
    }
}

/// Everything a closed-loop day produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub trajectory: Trajectory,
    pub outcomes: Vec<WindowOutcome>,
    /// State after the last window; its rate is the day-end realized rate.
    pub final_state: MarketState,
}

impl RolloutRecord {
    /// Day-end cumulative subsidy over cumulative completed GMV.
    pub fn c_real(&self) -> f64 {
        self.final_state.subsidy_rate_so_far
    }

    pub fn total_subsidy(&self) -> f64 {
        self.outcomes.iter().map(|o| o.subsidy_paid).sum()
    }
}

/// Environment stream for one (city, day).
pub fn env_rng(seed: u64, city_id: &str, day_index: u32) -> SeededRng {
    SeededRng::new(seed, stream_id(&[hash_str(city_id), day_index as u64]))
}

/// Closed-loop day: the policy sees `x_t`, picks `lambda_t`, the market steps.
///
/// Day shocks come from `env.derive(0)` and window `t` uses `env.derive(t + 1)`,
/// so the exogenous randomness is shared by every policy run on `env`.
pub fn rollout(
    profile: &CityProfile,
    day: DaySpec,
    policy: &mut dyn Policy,
    ctx: &Context,
    env: &SeededRng,
) -> Result<RolloutRecord> {
    let day_profile = profile.with_day_shocks(&mut env.derive(SHOCK_STREAM));
    let mut sim = SimState::initial(&day_profile, day)?;
    let t_max = sim.horizon;
    let mut states = Vec::with_capacity(t_max);
    let mut actions = Vec::with_capacity(t_max);
    let mut outcomes = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let x = sim.state.augmented();
        let lambda = policy.act(&x, t, ctx)?;
        if !is_valid_action(lambda) {
            return Err(Error::PolicyAction {
                window: t,
                value: lambda,
            });
        }
        let (next, out) = step(&sim, &day_profile, lambda, &mut env.derive(t as u64 + 1))?;
        states.push(x);
        actions.push(lambda);
        outcomes.push(out);
        sim = next;
    }
    let trajectory = Trajectory {
        city_id: profile.city_id.clone(),
        day_index: day.day_index,
        window_minutes: day.window_minutes,
        states,
        actions,
        rides: outcomes.iter().map(|o| o.rides).collect(),
        gmv: outcomes.iter().map(|o| o.gmv_completed).collect(),
        drv: outcomes.iter().map(|o| o.drv).collect(),
        valid_length: t_max,
    };
    Ok(RolloutRecord {
        trajectory,
        outcomes,
        final_state: sim.state,
    })
}
