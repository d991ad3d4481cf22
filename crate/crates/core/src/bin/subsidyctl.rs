//! Command-line front end for the subsidy-control pipeline.
//!
//! Every command reads an optional key=value config, applies `--seed` (or
//! `D3_SEED`), and writes a resolved copy of the config next to its outputs.
//! Outputs live under `--out`: `data/`, `models/`, `rollout/`, `eval/`,
//! `sweep/` and `report/`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use subsidy_control::config::KeyValues;
use subsidy_control::controller::{Controller, PlannerModels};
use subsidy_control::dataset::{logging_context, Splits};
use subsidy_control::error::{Error, Result};
use subsidy_control::eval::{emit_report, steering_sweep, EvalReport, FixedLambda};
use subsidy_control::market::{env_rng, rollout, DaySpec};
use subsidy_control::net::{Checkpoint, InverseDecoder, Mlp, TemporalDenoiser};
use subsidy_control::pipeline::{
    adapt_city, evaluate_bc, evaluate_controller, evaluate_fixed, ExperimentConfig, TrainedPlanner,
    DELTA_FRACTION,
};
use subsidy_control::train::{
    city_subset, pretrain_decoder, pretrain_denoiser, resolve_plan_noise, LossCurve, Preprocessor,
};
use subsidy_control::trajectory::{read_jsonl, write_jsonl, Trajectory};

#[derive(Parser)]
#[command(
    name = "subsidyctl",
    version,
    about = "Budget-capped subsidy control: data, training, rollout and evaluation"
)]
struct Cli {
    /// key=value config file; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for logging and training streams; overrides the config.
    #[arg(long, global = true, env = "D3_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate behavior logs for the train, held-out and cold-start splits.
    Gen,
    /// Fit normalizers and pretrain the denoiser on the pooled training logs.
    TrainDiffusion,
    /// Pretrain the inverse-dynamics decoder.
    TrainInverse,
    /// Anchored decoder fine-tuning per target city (the denoiser is read only).
    Finetune {
        /// Cities to adapt (default: the main cities).
        #[arg(long, value_delimiter = ',')]
        cities: Vec<String>,
    },
    /// Roll out one day in the simulator with the controller or a constant multiplier.
    Rollout {
        #[arg(long)]
        city: String,
        #[arg(long)]
        day: u32,
        /// Constant multiplier instead of the controller.
        #[arg(long)]
        fixed: Option<f64>,
    },
    /// Evaluate the controller against the fixed and cloned baselines on held-out days.
    Eval,
    /// Steering sweep over the gamma grid on held-out days.
    SweepGamma,
    /// Re-emit curve and summary CSVs plus a text report from saved evaluations.
    Report,
}

const RESOLVED: &str = "resolved.config";
const REPORTS: &str = "reports.json";

struct Run {
    kv: KeyValues,
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Run {
    fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Create `dir` and write the resolved config into it.
    fn output_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.dir(name);
        std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let mut kv = self.kv.clone();
        kv.merge(&self.cfg.to_key_values());
        kv.save(dir.join(RESOLVED))?;
        Ok(dir)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            hint: hint.to_string(),
        })
    }
}

fn load_split(run: &Run, index: usize) -> Result<Vec<Trajectory>> {
    read_jsonl(require(
        run.dir("data").join(Splits::FILES[index]),
        "run `subsidyctl gen` first",
    )?)
}

fn load_planner(run: &Run, cities: &[String]) -> Result<TrainedPlanner> {
    let models = run.dir("models");
    require(
        models.join(PlannerModels::DENOISER),
        "run `subsidyctl train-diffusion` first",
    )?;
    require(
        models.join(PlannerModels::DECODER),
        "run `subsidyctl train-inverse` first",
    )?;
    let shared = PlannerModels::load(&models, None, run.cfg.train.diffusion_steps)?;
    let mut city_decoders = std::collections::BTreeMap::new();
    for city in cities {
        let path = require(
            models.join(PlannerModels::city_decoder_file(city)),
            "run `subsidyctl finetune` first",
        )?;
        let mlp = Mlp::from_checkpoint(&Checkpoint::load(path, Mlp::KIND)?)?;
        city_decoders.insert(city.clone(), InverseDecoder { mlp });
    }
    Ok(TrainedPlanner {
        shared,
        city_decoders,
        denoiser_curve: LossCurve::default(),
        decoder_curve: LossCurve::default(),
        finetune_curves: Default::default(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn gen(run: &Run) -> Result<String> {
    let splits = run.cfg.generate()?;
    let dir = run.output_dir("data")?;
    splits.write(&dir)?;
    Ok(format!(
        "gen: {} train, {} held-out, {} cold-start trajectories -> {}",
        splits.train.len(),
        splits.test.len(),
        splits.cold_start.len(),
        dir.display()
    ))
}

fn train_diffusion(run: &Run) -> Result<String> {
    let train = load_split(run, 0)?;
    let pre = Preprocessor::fit(&train, DELTA_FRACTION)?;
    let examples = pre.examples(&train)?;
    let (net, curve) = pretrain_denoiser(&examples, &pre, &run.cfg.train)?;
    let dir = run.output_dir("models")?;
    let path = dir.join(PlannerModels::PREPROCESS);
    write_text(&path, &serde_json::to_string_pretty(&pre)?)?;
    net.to_checkpoint()
        .save(dir.join(PlannerModels::DENOISER))?;
    curve.write_csv(dir.join("loss_denoiser.csv"))?;
    Ok(format!(
        "train-diffusion: {} epochs, final batch loss {:.4}",
        curve.epochs(),
        curve.last().unwrap_or(f64::NAN)
    ))
}

fn train_inverse(run: &Run) -> Result<String> {
    let train = load_split(run, 0)?;
    let pre = subsidy_control::controller::load_preprocessor(&run.dir("models"))?;
    let examples = pre.examples(&train)?;
    let models_dir = run.dir("models");
    require(
        models_dir.join(PlannerModels::DENOISER),
        "run `subsidyctl train-diffusion` first",
    )?;
    let denoiser = TemporalDenoiser::from_checkpoint(&Checkpoint::load(
        models_dir.join(PlannerModels::DENOISER),
        TemporalDenoiser::KIND,
    )?)?;
    let schedule = run.cfg.train.schedule()?;
    let noise = resolve_plan_noise(&run.cfg.train, &denoiser, &schedule, &examples, &pre)?;
    let (dec, curve) = pretrain_decoder(&examples, &pre, &run.cfg.train, &noise)?;
    let dir = run.output_dir("models")?;
    dec.mlp
        .to_checkpoint()
        .save(dir.join(PlannerModels::DECODER))?;
    curve.write_csv(dir.join("loss_decoder.csv"))?;
    Ok(format!(
        "train-inverse: {} epochs, final batch loss {:.6}",
        curve.epochs(),
        curve.last().unwrap_or(f64::NAN)
    ))
}

fn finetune(run: &Run, cities: &[String]) -> Result<String> {
    let cities = if cities.is_empty() {
        run.cfg.gen.main_cities.clone()
    } else {
        cities.to_vec()
    };
    let models_dir = run.dir("models");
    require(
        models_dir.join(PlannerModels::DENOISER),
        "run `subsidyctl train-diffusion` first",
    )?;
    require(
        models_dir.join(PlannerModels::DECODER),
        "run `subsidyctl train-inverse` first",
    )?;
    let mut models = PlannerModels::load(&models_dir, None, run.cfg.train.diffusion_steps)?;
    let mut logs = load_split(run, 0)?;
    let cold = run.cfg.gen.cold_cities.iter().any(|c| cities.contains(c));
    if cold {
        // cold-start cities adapt on their first train_days days
        logs.extend(
            load_split(run, 2)?
                .into_iter()
                .filter(|t| t.day_index < run.cfg.gen.train_days),
        );
    }
    let dir = run.output_dir("models")?;
    let mut lines = Vec::new();
    for city in &cities {
        let (dec, curve) = adapt_city(&mut models, &city_subset(&logs, city), &run.cfg.train)?;
        dec.mlp
            .to_checkpoint()
            .save(dir.join(PlannerModels::city_decoder_file(city)))?;
        curve.write_csv(dir.join(format!("loss_finetune-{city}.csv")))?;
        let drift = dec.mlp.params.l2_distance(&models.decoder.mlp.params)?;
        lines.push(format!("{city} drift {drift:.3e}"));
    }
    if cold {
        // new ride scales for cold-start cities
        let path = dir.join(PlannerModels::PREPROCESS);
        write_text(&path, &serde_json::to_string_pretty(&models.pre)?)?;
    }
    Ok(format!("finetune: {}", lines.join(", ")))
}

fn rollout_cmd(run: &Run, city: &str, day: u32, fixed: Option<f64>) -> Result<String> {
    let profile = run
        .cfg
        .profile_pool()
        .into_iter()
        .find(|p| p.city_id == city)
        .ok_or_else(|| Error::Config(format!("unknown city {city}")))?;
    let spec = DaySpec {
        day_index: day,
        window_minutes: run.cfg.gen.window_minutes,
    };
    let env = env_rng(run.cfg.gen.seed, city, day);
    let (rec, label, latency) = match fixed {
        Some(level) => (
            rollout(
                &profile,
                spec,
                &mut FixedLambda::new(level)?,
                &logging_context(&profile)?,
                &env,
            )?,
            format!("fixed {level}"),
            None,
        ),
        None => {
            let planner = load_planner(run, &[city.to_string()])?;
            let models = planner.for_city(city);
            let ctx = models.pre.conditioning.deployment(
                city,
                profile.cap_c,
                profile.tolerance_delta,
                1.0,
            )?;
            let ctrl = Controller::new(&models, run.cfg.controller.clone())?;
            let (rec, state) = ctrl.run_day(&profile, &ctx, spec, &env, run.cfg.plan_seed)?;
            let n = state.decision_times.len().max(1) as u32;
            let mean = state.decision_times.iter().sum::<std::time::Duration>() / n;
            (rec, "controller".to_string(), Some(mean))
        }
    };
    let dir = run.output_dir("rollout")?;
    write_jsonl(
        dir.join(format!("{city}-day{day}.jsonl")),
        std::slice::from_ref(&rec.trajectory),
    )?;
    let eval = subsidy_control::eval::TrajectoryEval::from_record(
        &label,
        &rec,
        profile.cap_c,
        profile.tolerance_delta,
        run.cfg.beta,
    )?;
    let mut msg = format!(
        "rollout: {city} day {day} ({label}) rides {:.0} c_real {:.4} cap {} score {:.1}",
        eval.rides, eval.c_real, eval.cap_c, eval.score
    );
    if let Some(t) = latency {
        msg.push_str(&format!(" mean decide {:.1} ms", t.as_secs_f64() * 1e3));
    }
    Ok(msg)
}

fn comparison_lines(reports: &[EvalReport]) -> Result<String> {
    let mut out = String::new();
    let Some(ctrl) = reports.iter().find(|r| r.policy == "controller") else {
        return Ok(out);
    };
    for base in reports.iter().filter(|r| r.policy != "controller") {
        let c = ctrl.compare(base)?;
        out.push_str(&format!(
            "controller vs {}: n {} mean diff {:.3} ci95 [{:.3}, {:.3}] t {:.3} p {:.3e}\n",
            base.policy, c.n, c.mean_diff, c.ci95.0, c.ci95.1, c.t_stat, c.p_value
        ));
    }
    Ok(out)
}

fn summary_lines(reports: &[EvalReport]) -> String {
    reports
        .iter()
        .map(|r| {
            format!(
                "{}: mean score {:.2}, violations {}/{}, mean under-gap {:.5}\n",
                r.policy,
                r.mean_score(),
                r.violations(),
                r.rows.len(),
                r.mean_under_gap()
            )
        })
        .collect()
}

fn eval(run: &Run) -> Result<String> {
    let profiles = run.cfg.main_profiles()?;
    let days = run.cfg.test_days();
    let planner = load_planner(run, &run.cfg.gen.main_cities)?;
    let train = load_split(run, 0)?;
    let (ctrl, times) = evaluate_controller(
        &planner,
        &profiles,
        &days,
        &run.cfg,
        run.cfg.controller.gamma,
    )?;
    let (fixed, _) = evaluate_fixed(&profiles, &days, &run.cfg)?;
    let bc = evaluate_bc(&train, &profiles, &days, &run.cfg)?;
    let reports = vec![ctrl, fixed, bc];
    let dir = run.output_dir("eval")?;
    emit_report(&reports, &dir)?;
    write_text(&dir.join(REPORTS), &serde_json::to_string(&reports)?)?;
    let n = times.len().max(1) as f64;
    let mean_ms = times.iter().map(|t| t.as_secs_f64()).sum::<f64>() / n * 1e3;
    // latency is machine dependent, so it is printed but not written
    Ok(format!(
        "eval: controller {:.2} vs fixed {:.2} vs bc {:.2}; controller violations {}/{}; mean decide {mean_ms:.1} ms",
        reports[0].mean_score(),
        reports[1].mean_score(),
        reports[2].mean_score(),
        reports[0].violations(),
        reports[0].rows.len()
    ))
}

fn sweep(run: &Run) -> Result<String> {
    let profiles = run.cfg.main_profiles()?;
    let days = run.cfg.test_days();
    let planner = load_planner(run, &run.cfg.gen.main_cities)?;
    let res = steering_sweep(&run.cfg.gamma_grid, |g| {
        Ok(evaluate_controller(&planner, &profiles, &days, &run.cfg, g)?.0)
    })?;
    let dir = run.output_dir("sweep")?;
    write_text(&dir.join("sweep.csv"), &res.to_csv())?;
    Ok(format!(
        "sweep-gamma: {} points, Spearman(gamma, rides) = {:.3}",
        res.rows.len(),
        res.rides_rank_corr
    ))
}

fn report(run: &Run) -> Result<String> {
    let path = require(run.dir("eval").join(REPORTS), "run `subsidyctl eval` first")?;
    let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    let reports: Vec<EvalReport> = serde_json::from_str(&text)?;
    let dir = run.output_dir("report")?;
    emit_report(&reports, &dir)?;
    let body = summary_lines(&reports) + &comparison_lines(&reports)?;
    write_text(&dir.join("report.txt"), &body)?;
    Ok(format!(
        "report: {} policies -> {}",
        reports.len(),
        dir.display()
    ))
}

fn resolve(cli: &Cli) -> Result<Run> {
    let mut kv = match &cli.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    if let Some(seed) = cli.seed {
        kv.set("seed", seed);
    }
    let cfg = ExperimentConfig::from_key_values(&kv)?;
    Ok(Run {
        kv,
        cfg,
        out: cli.out.clone(),
    })
}

fn run(cli: &Cli) -> Result<String> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    let run = resolve(cli)?;
    match &cli.cmd {
        Command::Gen => gen(&run),
        Command::TrainDiffusion => train_diffusion(&run),
        Command::TrainInverse => train_inverse(&run),
        Command::Finetune { cities } => finetune(&run, cities),
        Command::Rollout { city, day, fixed } => rollout_cmd(&run, city, *day, *fixed),
        Command::Eval => eval(&run),
        Command::SweepGamma => sweep(&run),
        Command::Report => report(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
