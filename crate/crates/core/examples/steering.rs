//! Steering sweep: scale the target-Rides conditioning and watch the
//! controller's operating point move, without retraining.
//!
//! Usage: `cargo run --release --example steering -- <model_dir>`

use std::collections::BTreeMap;
use std::path::PathBuf;

use subsidy_control::controller::PlannerModels;
use subsidy_control::error::Result;
use subsidy_control::eval::steering_sweep;
use subsidy_control::pipeline::{evaluate_controller, ExperimentConfig, TrainedPlanner};
use subsidy_control::train::LossCurve;

fn main() -> Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "runs/example-models".into()),
    );
    let cfg = ExperimentConfig::default();
    let steps = cfg.train.diffusion_steps;
    let mut city_decoders = BTreeMap::new();
    for city in &cfg.gen.main_cities {
        city_decoders.insert(
            city.clone(),
            PlannerModels::load(&dir, Some(city), steps)?.decoder,
        );
    }
    let planner = TrainedPlanner {
        shared: PlannerModels::load(&dir, None, steps)?,
        city_decoders,
        denoiser_curve: LossCurve::default(),
        decoder_curve: LossCurve::default(),
        finetune_curves: BTreeMap::new(),
    };
    let profiles = cfg.main_profiles()?;
    let days = [cfg.gen.train_days];
    let sweep = steering_sweep(&[0.2, 0.6, 1.0, 1.4, 2.0], |g| {
        Ok(evaluate_controller(&planner, &profiles, &days, &cfg, g)?.0)
    })?;
    print!("{}", sweep.to_csv());
    println!(
        "rank correlation of gamma with rides: {:.3}",
        sweep.rides_rank_corr
    );
    Ok(())
}
