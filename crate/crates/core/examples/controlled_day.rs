//! Run the diffusion controller for one held-out day and print its pacing.
//!
//! Needs models from `train_planner` (the same directory layout `subsidyctl`
//! writes). Usage: `cargo run --release --example controlled_day -- <model_dir> [city] [day]`

use std::path::PathBuf;

use subsidy_control::controller::{Controller, ControllerConfig, PlannerModels};
use subsidy_control::error::Result;
use subsidy_control::eval::{score, DEFAULT_PENALTY};
use subsidy_control::market::{env_rng, DaySpec};
use subsidy_control::pipeline::ExperimentConfig;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).map_or("runs/example-models", String::as_str));
    let city = args.get(2).cloned().unwrap_or_else(|| "city-a".into());
    let cfg = ExperimentConfig::default();
    let day_index: u32 = match args.get(3) {
        Some(d) => d
            .parse()
            .map_err(|_| subsidy_control::error::Error::Config(format!("bad day {d}")))?,
        None => cfg.gen.train_days,
    };
    let models = PlannerModels::load(&dir, Some(&city), cfg.train.diffusion_steps)?;
    let profile = cfg
        .main_profiles()?
        .into_iter()
        .chain(cfg.cold_profiles()?)
        .find(|p| p.city_id == city)
        .ok_or_else(|| subsidy_control::error::Error::Config(format!("unknown city {city}")))?;
    let ctx =
        models
            .pre
            .conditioning
            .deployment(&city, profile.cap_c, profile.tolerance_delta, 1.0)?;
    let ctrl = Controller::new(&models, ControllerConfig::default())?;
    let day = DaySpec {
        day_index,
        window_minutes: cfg.gen.window_minutes,
    };
    let (rec, state) = ctrl.run_day(
        &profile,
        &ctx,
        day,
        &env_rng(cfg.gen.seed, &city, day_index),
        0,
    )?;
    let traj = &rec.trajectory;
    for t in (0..traj.horizon()).step_by(24) {
        let rate = traj
            .states
            .get(t + 1)
            .and_then(|s| s.last())
            .copied()
            .unwrap_or(rec.c_real());
        println!(
            "window {t:>3}: lambda {:>5.2}  running rate {rate:.4}",
            traj.actions[t]
        );
    }
    let mean_ms = state
        .decision_times
        .iter()
        .map(|d| d.as_secs_f64())
        .sum::<f64>()
        * 1e3
        / state.decision_times.len() as f64;
    println!(
        "{city} day {day_index}: rides {:.0}, rate {:.4} (cap {:.2}), score {:.1}, mean decide {mean_ms:.1} ms",
        traj.total_rides(),
        rec.c_real(),
        profile.cap_c,
        score(traj.total_rides(), rec.c_real(), profile.cap_c, DEFAULT_PENALTY)?
    );
    Ok(())
}
