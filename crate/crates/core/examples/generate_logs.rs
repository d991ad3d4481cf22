//! Generate the offline logs and write the three JSONL splits.
//!
//! Usage: `cargo run --release --example generate_logs -- [out_dir]`

use subsidy_control::dataset::{generate_default, GenConfig};
use subsidy_control::error::Result;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/example-logs".into());
    let cfg = GenConfig::default();
    let splits = generate_default(&cfg)?;
    splits.write(&out)?;
    for (name, part) in [
        ("train", &splits.train),
        ("test", &splits.test),
        ("cold_start", &splits.cold_start),
    ] {
        let mean_rate =
            part.iter().map(|t| t.last_recorded_rate()).sum::<f64>() / part.len() as f64;
        println!(
            "{name:>10}: {:>3} days, mean day-end rate {mean_rate:.4}",
            part.len()
        );
    }
    println!("wrote {out}");
    Ok(())
}
