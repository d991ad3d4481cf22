//! One simulated day per city under a few constant multipliers: the
//! realized subsidy rate falls and rides drop as lambda grows.

use subsidy_control::dataset::{calibrated_lambda, logging_context};
use subsidy_control::error::Result;
use subsidy_control::eval::FixedLambda;
use subsidy_control::market::{default_city_pool, env_rng, rollout, DaySpec};

fn main() -> Result<()> {
    let day = DaySpec {
        day_index: 0,
        window_minutes: 5,
    };
    for profile in default_city_pool().iter().take(3) {
        let base = calibrated_lambda(profile);
        println!(
            "{} (cap {:.2}, calibrated lambda {base:.2})",
            profile.city_id, profile.cap_c
        );
        for scale in [0.5, 1.0, 2.0] {
            let rec = rollout(
                profile,
                day,
                &mut FixedLambda::new(base * scale)?,
                &logging_context(profile)?,
                &env_rng(1, &profile.city_id, 0),
            )?;
            println!(
                "  lambda {:>5.2}: rides {:>6.0}  gmv {:>8.0}  subsidy rate {:.4}",
                base * scale,
                rec.trajectory.total_rides(),
                rec.trajectory.total_gmv(),
                rec.c_real()
            );
        }
    }
    Ok(())
}
