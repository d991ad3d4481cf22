//! Pretrain the denoiser and decoder on pooled logs, fine-tune one decoder
//! per city, and save everything to a model directory.
//!
//! A short run by default; pass `full` for the standard epoch budget.
//! Usage: `cargo run --release --example train_planner -- [out_dir] [full]`

use subsidy_control::error::Result;
use subsidy_control::pipeline::{train_planner, ExperimentConfig};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args
        .get(1)
        .cloned()
        .unwrap_or_else(|| "runs/example-models".into());
    let mut cfg = ExperimentConfig::default();
    if args.get(2).map(String::as_str) != Some("full") {
        cfg.train.epochs = 20;
        cfg.train.decoder_epochs = 20;
        cfg.train.finetune_epochs = 10;
    }
    let splits = cfg.generate()?;
    let planner = train_planner(&splits.train, &cfg.gen.main_cities, &cfg.train)?;
    let d = &planner.denoiser_curve;
    println!(
        "denoiser loss: epoch 0 {:.3} -> epoch {} {:.3}",
        d.epoch_mean(0),
        d.epochs() - 1,
        d.epoch_mean(d.epochs() - 1)
    );
    for (city, c) in &planner.finetune_curves {
        println!(
            "{city}: fine-tune objective {:.4} -> {:.4}",
            c.epoch_mean(0),
            c.epoch_mean(c.epochs() - 1)
        );
    }
    planner.save(&out)?;
    println!("saved models to {out}");
    Ok(())
}
