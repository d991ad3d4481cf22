//! Map one dual multiplier to per-pair subsidies, under linear completion
//! (closed form) and a concave logistic completion curve (bisection).

use subsidy_control::dual_map::{
    closed_form_subsidy, general_subsidy, CompletionModel, DualParams, DEFAULT_ROOT_TOL,
};
use subsidy_control::error::Result;

fn main() -> Result<()> {
    let cap = 8.0;
    let logistic = CompletionModel::Logistic {
        scale: 1.2,
        steepness: 0.3,
        midpoint: -1.0,
    };
    println!("lambda  kappa   b(r=10) linear  b(r=10) logistic");
    for lambda in [0.5, 1.0, 2.0, 5.0, 10.0, 30.0] {
        let d = DualParams::new(lambda, 0.1, 0.01)?;
        let lin = closed_form_subsidy(&d, 10.0, cap)?;
        let gen = general_subsidy(&d, 10.0, cap, &logistic, DEFAULT_ROOT_TOL)?;
        println!("{lambda:>6.1}  {:.4}  {lin:>14.4}  {gen:>16.4}", d.kappa());
    }
    Ok(())
}
