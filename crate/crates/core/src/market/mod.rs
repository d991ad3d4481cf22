//! Synthetic city market: profiles, broadcast pairs, completions, KPI
//! accumulation and closed-loop rollouts.

mod profile;
mod sim;

pub use profile::{default_city_pool, CityProfile};
pub use sim::{
    completion_prob, env_rng, generate_pairs, rollout, step, update_rho, DaySpec, Policy,
    RolloutRecord, SimState, WindowOutcome, FEATURE_NAMES,
};
