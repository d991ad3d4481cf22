//! The two reference policies: a constant multiplier tuned on training days
//! and behavior cloning of the logs, compared day by day.

use subsidy_control::error::Result;
use subsidy_control::pipeline::{evaluate_bc, evaluate_fixed, ExperimentConfig};

fn main() -> Result<()> {
    let cfg = ExperimentConfig::default();
    let splits = cfg.generate()?;
    let profiles = cfg.main_profiles()?;
    let days = cfg.test_days();
    let (fixed, tunings) = evaluate_fixed(&profiles, &days, &cfg)?;
    for (city, t) in &tunings {
        let best_score = t
            .grid
            .iter()
            .find(|g| g.0 == t.best)
            .map_or(f64::NAN, |g| g.1);
        println!(
            "{city}: tuned lambda {:.3} (training-day mean score {best_score:.1})",
            t.best
        );
    }
    let bc = evaluate_bc(&splits.train, &profiles, &days, &cfg)?;
    for rep in [&fixed, &bc] {
        println!(
            "{:>12}: mean score {:.1}, violations {}/{}, mean UnderGap {:.4}",
            rep.policy,
            rep.mean_score(),
            rep.violations(),
            rep.rows.len(),
            rep.mean_under_gap()
        );
    }
    let cmp = fixed.compare(&bc)?;
    println!(
        "fixed - bc: mean {:.2}, 95% CI ({:.2}, {:.2}), t {:.2}, one-sided p {:.3}",
        cmp.mean_diff, cmp.ci95.0, cmp.ci95.1, cmp.t_stat, cmp.p_value
    );
    Ok(())
}
