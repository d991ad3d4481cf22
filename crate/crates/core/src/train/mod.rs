//! Two-stage training: pooled pretraining of the denoiser and decoder, then
//! anchored fine-tuning of the decoder alone.

mod data;
mod loss;

use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;

pub use data::{Conditioning, Example, Preprocessor, Standardizer};
pub use loss::{
    denoise_loss, denoise_loss_grad, inverse_loss, inverse_loss_grad, mndl_loss,
    DenoiseNormalization, MaskedBatch, INVERSE_EPS,
};

use crate::config::KeyValues;
use crate::diffusion::{
    forward_noise, reverse_sample, NoiseSchedule, SampleOptions, COSINE_OFFSET, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::net::{decoder_input, AdamW, DenoiserConfig, InverseDecoder, Params, TemporalDenoiser};
use crate::rng::{stream_id, SeededRng};
use crate::trajectory::Trajectory;

/// Prefix length for one training sample: uniform over
/// `{round(T/8), ..., round(7T/8)}`, clamped to `[1, T-1]`.
pub fn sample_prefix_length(horizon: usize, rng: &mut SeededRng) -> Result<usize> {
    let (lo, hi) = prefix_support(horizon)?;
    Ok(rng.int_inclusive(lo, hi))
}

/// Inclusive support of [`sample_prefix_length`].
pub fn prefix_support(horizon: usize) -> Result<(usize, usize)> {
    if horizon < 2 {
        return Err(Error::Range {
            what: "horizon",
            value: horizon as f64,
            range: "[2, inf)",
        });
    }
    let t = horizon as f64;
    let clamp = |v: f64| (v.round() as usize).clamp(1, horizon - 1);
    Ok((clamp(t / 8.0), clamp(7.0 * t / 8.0)))
}

/// Perturbation of the decoder's next-state input during training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PlanNoise {
    Off,
    /// One standard deviation (standardized units) for every feature.
    Fixed(f64),
    /// Per-feature rms error of the pretrained denoiser's first sampled row.
    #[default]
    Calibrated,
}

impl std::fmt::Display for PlanNoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlanNoise::Off => f.write_str("off"),
            PlanNoise::Fixed(sd) => write!(f, "{sd}"),
            PlanNoise::Calibrated => f.write_str("auto"),
        }
    }
}

impl std::str::FromStr for PlanNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(PlanNoise::Calibrated),
            "off" => Ok(PlanNoise::Off),
            v => v.parse().map(PlanNoise::Fixed).map_err(|_| {
                Error::Config(format!(
                    "decoder_plan_noise: expected auto, off or a number, got {v:?}"
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub decoder_epochs: usize,
    pub anchor_weight: f64,
    /// Decoupled weight decay during pretraining (fine-tuning relies on the anchor).
    pub weight_decay: f64,
    pub diffusion_steps: usize,
    pub normalization: DenoiseNormalization,
    pub width: usize,
    /// Dilations of the denoiser's residual blocks, one block each.
    pub dilations: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Noise on the decoder's next-state row while training, so the decoder
    /// does not trust a sampled plan more than the planner's accuracy warrants.
    pub decoder_plan_noise: PlanNoise,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 1e-2,
            lr_finetune: 3e-5,
            batch_size: 16,
            epochs: 300,
            finetune_epochs: 60,
            decoder_epochs: 150,
            anchor_weight: 1e-2,
            weight_decay: 1e-4,
            diffusion_steps: DEFAULT_STEPS,
            normalization: DenoiseNormalization::MaskCount,
            width: 32,
            dilations: vec![1, 2, 4, 8],
            decoder_hidden: vec![64, 64],
            decoder_plan_noise: PlanNoise::Calibrated,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_pretrain > 0.0 && self.lr_finetune > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.lr_finetune >= self.lr_pretrain {
            return bad("lr_finetune must be smaller than lr_pretrain");
        }
        if !(self.anchor_weight >= 0.0 && self.anchor_weight.is_finite()) {
            return bad("anchor_weight must be a finite value >= 0");
        }
        if self.batch_size == 0 || self.diffusion_steps == 0 || self.width == 0 {
            return bad("batch_size, diffusion_steps and width must be >= 1");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilations must be a non-empty list of values >= 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if let PlanNoise::Fixed(sd) = self.decoder_plan_noise {
            if !(sd >= 0.0 && sd.is_finite()) {
                return bad("decoder_plan_noise must be auto, off or a finite value >= 0");
            }
        }
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let normalization = match kv
            .get_or("loss_normalization", "mask".to_string())?
            .as_str()
        {
            "mask" => DenoiseNormalization::MaskCount,
            "sample" => DenoiseNormalization::SampleCount,
            other => {
                return Err(Error::Config(format!(
                    "unknown loss_normalization {other:?} (mask|sample)"
                )))
            }
        };
        let cfg = Self {
            lr_pretrain: kv.get_or("lr_pretrain", d.lr_pretrain)?,
            lr_finetune: kv.get_or("lr_finetune", d.lr_finetune)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            finetune_epochs: kv.get_or("finetune_epochs", d.finetune_epochs)?,
            decoder_epochs: kv.get_or("decoder_epochs", d.decoder_epochs)?,
            anchor_weight: kv.get_or("anchor_weight", d.anchor_weight)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            diffusion_steps: kv.get_or("diffusion_steps", d.diffusion_steps)?,
            normalization,
            width: kv.get_or("width", d.width)?,
            dilations: kv.get_list("dilations")?.unwrap_or(d.dilations),
            decoder_hidden: kv.get_list("decoder_hidden")?.unwrap_or(d.decoder_hidden),
            decoder_plan_noise: kv.get_or("decoder_plan_noise", d.decoder_plan_noise)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_key_values(&self, kv: &mut KeyValues) {
        kv.set("lr_pretrain", self.lr_pretrain);
        kv.set("lr_finetune", self.lr_finetune);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("finetune_epochs", self.finetune_epochs);
        kv.set("decoder_epochs", self.decoder_epochs);
        kv.set("anchor_weight", self.anchor_weight);
        kv.set("weight_decay", self.weight_decay);
        kv.set("diffusion_steps", self.diffusion_steps);
        kv.set(
            "loss_normalization",
            match self.normalization {
                DenoiseNormalization::MaskCount => "mask",
                DenoiseNormalization::SampleCount => "sample",
            },
        );
        kv.set("width", self.width);
        kv.set_list("dilations", &self.dilations);
        kv.set_list("decoder_hidden", &self.decoder_hidden);
        kv.set("decoder_plan_noise", self.decoder_plan_noise);
        kv.set("seed", self.seed);
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.diffusion_steps, COSINE_OFFSET)
    }
}

/// Per-batch training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub rows: Vec<(usize, usize, f64)>,
}

impl LossCurve {
    pub fn push(&mut self, epoch: usize, batch: usize, loss: f64) {
        self.rows.push((epoch, batch, loss));
    }

    pub fn epochs(&self) -> usize {
        self.rows.last().map_or(0, |r| r.0 + 1)
    }

    pub fn epoch_losses(&self, epoch: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.0 == epoch)
            .map(|r| r.2)
            .collect()
    }

    pub fn epoch_mean(&self, epoch: usize) -> f64 {
        let v = self.epoch_losses(epoch);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Population standard deviation of the batch losses within an epoch.
    pub fn epoch_std(&self, epoch: usize) -> f64 {
        let v = self.epoch_losses(epoch);
        if v.is_empty() {
            return 0.0;
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    }

    pub fn last(&self) -> Option<f64> {
        self.rows.last().map(|r| r.2)
    }

    /// CSV with columns `epoch,batch,loss,loss_std` (`loss_std` is the epoch's batch spread).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,batch,loss,loss_std\n");
        for &(e, b, l) in &self.rows {
            out.push_str(&format!("{e},{b},{l},{}\n", self.epoch_std(e)));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Cosine decay from `base` to a tenth of it over the run.
fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let progress = epoch as f64 / epochs.max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn check_horizons(examples: &[Example]) -> Result<usize> {
    let first = examples
        .first()
        .ok_or_else(|| Error::EmptyDataset("no training trajectories".into()))?;
    let t = first.horizon();
    if examples.iter().any(|e| e.horizon() != t) {
        return Err(Error::Config(
            "all training trajectories must share one window length".into(),
        ));
    }
    Ok(t)
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Noised minibatch: per sample a prefix length, a diffusion step and fresh noise.
pub fn denoise_batch(
    examples: &[&Example],
    contexts: &Standardizer,
    schedule: &NoiseSchedule,
    rng: &SeededRng,
) -> Result<MaskedBatch> {
    let n = examples.len();
    let t = examples.first().map_or(0, |e| e.horizon());
    let mut batch = MaskedBatch {
        z_noised: Vec::with_capacity(n),
        eps: Vec::with_capacity(n),
        mask: Array2::zeros((n, t)),
        tau: Vec::with_capacity(n),
        prefix_len: Vec::with_capacity(n),
        contexts: Vec::with_capacity(n),
        actions: Array2::zeros((n, t)),
        inv_mask: Array2::zeros((n, t)),
    };
    for (i, ex) in examples.iter().enumerate() {
        if ex.horizon() != t {
            return Err(Error::Shape("mixed horizons in one batch".into()));
        }
        let mut r = rng.derive(i as u64);
        let k = sample_prefix_length(t, &mut r)?;
        let tau = r.int_inclusive(1, schedule.steps());
        let noised = forward_noise(ex.states.view(), k, tau, schedule, &mut r)?;
        for s in k..ex.valid_length {
            batch.mask[[i, s]] = 1.0;
        }
        for s in 0..ex.valid_length.saturating_sub(1) {
            batch.inv_mask[[i, s]] = 1.0;
        }
        for s in 0..t {
            batch.actions[[i, s]] = ex.actions[s];
        }
        batch.z_noised.push(noised.z);
        batch.eps.push(noised.eps);
        batch.tau.push(tau);
        batch.prefix_len.push(k);
        batch.contexts.push(ex.ctx_at(k.min(t - 1), contexts));
    }
    Ok(batch)
}

/// Loss and parameter gradient of the denoiser on one batch.
/// Per-sample gradients are summed in sample order.
pub fn denoiser_step(
    net: &TemporalDenoiser,
    batch: &MaskedBatch,
    norm: DenoiseNormalization,
) -> Result<(f64, Params)> {
    batch.validate()?;
    let traced: Vec<_> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            net.forward_traced(
                batch.z_noised[i].view(),
                batch.tau[i],
                &batch.contexts[i],
                batch.prefix_len[i],
            )
        })
        .collect::<Result<_>>()?;
    let preds: Vec<Array2<f64>> = traced.iter().map(|(p, _)| p.clone()).collect();
    let loss = denoise_loss(&preds, batch, norm)?;
    let d_preds = denoise_loss_grad(&preds, batch, norm)?;
    let grads: Vec<Params> = traced
        .par_iter()
        .zip(&d_preds)
        .map(|((_, tape), d)| net.backward(tape, d.view()))
        .collect::<Result<_>>()?;
    let mut total = net.params.zeros_like();
    for g in &grads {
        total.add_assign(g)?;
    }
    Ok((loss, total))
}

/// Pretrain the denoiser on pooled examples.
pub fn pretrain_denoiser(
    examples: &[Example],
    pre: &Preprocessor,
    cfg: &TrainConfig,
) -> Result<(TemporalDenoiser, LossCurve)> {
    cfg.validate()?;
    check_horizons(examples)?;
    let root = SeededRng::new(cfg.seed, stream_id(&[0xD1F]));
    let mut dcfg = DenoiserConfig::small(crate::types::STATE_DIM, pre.ctx_dim());
    dcfg.width = cfg.width;
    dcfg.dilations = cfg.dilations.clone();
    let mut net = TemporalDenoiser::new(dcfg, &mut root.derive(0))?;
    let schedule = cfg.schedule()?;
    let mut opt = AdamW::new(cfg.lr_pretrain, cfg.weight_decay, net.params.len());
    let mut curve = LossCurve::default();
    for epoch in 0..cfg.epochs {
        opt.lr = cosine_lr(cfg.lr_pretrain, epoch, cfg.epochs);
        let erng = root.derive(stream_id(&[1, epoch as u64]));
        for (b, idx) in epoch_batches(examples.len(), cfg.batch_size, &mut erng.derive(0))
            .into_iter()
            .enumerate()
        {
            let refs: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let batch = denoise_batch(&refs, &pre.contexts, &schedule, &erng.derive(b as u64 + 1))?;
            let (loss, grad) = denoiser_step(&net, &batch, cfg.normalization)?;
            if !loss.is_finite() {
                return Err(Error::Invariant(format!(
                    "non-finite denoising loss at epoch {epoch}"
                )));
            }
            opt.step(&mut net.params, &grad)?;
            curve.push(epoch, b, loss);
        }
    }
    Ok((net, curve))
}

/// Decoder inputs for every position of every example, cached once per run.
#[derive(Debug, Clone)]
pub struct DecoderTable {
    inputs: Vec<Array2<f64>>,
    actions: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
}

impl DecoderTable {
    pub fn build(examples: &[Example], pre: &Preprocessor) -> Result<Self> {
        check_horizons(examples)?;
        let mut inputs = Vec::with_capacity(examples.len());
        for ex in examples {
            let rows: Vec<Vec<f64>> = (0..ex.horizon())
                .map(|t| decoder_input(ex.states.view(), t, &ex.ctx_at(t, &pre.contexts)))
                .collect::<Result<_>>()?;
            inputs.push(crate::net::mlp::stack_rows(&rows)?);
        }
        Ok(Self {
            inputs,
            actions: examples.iter().map(|e| e.actions.clone()).collect(),
            masks: examples
                .iter()
                .map(|e| {
                    (0..e.horizon())
                        .map(|t| if t + 1 < e.valid_length { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn horizon(&self) -> usize {
        self.inputs[0].nrows()
    }

    /// Mean logged action over supervised positions.
    pub fn mean_action(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0.0);
        for (a, m) in self.actions.iter().zip(&self.masks) {
            for (x, w) in a.iter().zip(m) {
                s += x * w;
                n += w;
            }
        }
        s / n.max(1.0)
    }

    /// Inverse loss and gradient on the given examples.
    pub fn step(&self, dec: &InverseDecoder, idx: &[usize]) -> Result<(f64, Params)> {
        self.step_perturbed(dec, idx, None)
    }

    /// [`DecoderTable::step`] with independent `N(0, sd_j^2)` added to feature `j`
    /// of the next-state block of every input when `noise = Some((sd, rng))`.
    pub fn step_perturbed(
        &self,
        dec: &InverseDecoder,
        idx: &[usize],
        noise: Option<(&[f64], &mut SeededRng)>,
    ) -> Result<(f64, Params)> {
        let t = self.horizon();
        let views: Vec<_> = idx.iter().map(|&i| self.inputs[i].view()).collect();
        let mut x =
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        if let Some((sd, rng)) = noise {
            let width = crate::types::STATE_DIM;
            if sd.len() != width {
                return Err(Error::Dimension {
                    what: "plan noise",
                    expected: width,
                    actual: sd.len(),
                });
            }
            for mut row in x.rows_mut() {
                for (v, s) in row.iter_mut().skip(3 * width).zip(sd) {
                    *v += s * rng.normal();
                }
            }
        }
        let (out, tape) = dec.mlp.forward_traced(x.view())?;
        let pred = out
            .into_shape_with_order((idx.len(), t))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let actions = Array2::from_shape_fn((idx.len(), t), |(r, c)| self.actions[idx[r]][c]);
        let mask = Array2::from_shape_fn((idx.len(), t), |(r, c)| self.masks[idx[r]][c]);
        let loss = inverse_loss(pred.view(), actions.view(), mask.view())?;
        let d = inverse_loss_grad(pred.view(), actions.view(), mask.view())?;
        let grad = dec
            .mlp
            .backward(&tape, d.as_slice().expect("standard layout"))?;
        Ok((loss, grad))
    }

    pub fn full_loss(&self, dec: &InverseDecoder) -> Result<f64> {
        let idx: Vec<usize> = (0..self.len()).collect();
        Ok(self.step(dec, &idx)?.0)
    }
}

/// Pretrain the inverse-dynamics decoder on pooled clean examples; `plan_noise`
/// (per feature, empty for none) perturbs the next-state input.
pub fn pretrain_decoder(
    examples: &[Example],
    pre: &Preprocessor,
    cfg: &TrainConfig,
    plan_noise: &[f64],
) -> Result<(InverseDecoder, LossCurve)> {
    cfg.validate()?;
    let table = DecoderTable::build(examples, pre)?;
    let root = SeededRng::new(cfg.seed, stream_id(&[0xDEC]));
    let mut dec = InverseDecoder::new(
        pre.ctx_dim(),
        cfg.decoder_hidden.clone(),
        &mut root.derive(0),
    )?;
    dec.mlp.set_output_level(table.mean_action());
    let mut opt = AdamW::new(cfg.lr_pretrain, cfg.weight_decay, dec.mlp.params.len());
    let mut curve = LossCurve::default();
    for epoch in 0..cfg.decoder_epochs {
        opt.lr = cosine_lr(cfg.lr_pretrain, epoch, cfg.decoder_epochs);
        let mut erng = root.derive(stream_id(&[1, epoch as u64]));
        let mut nrng = erng.derive(0x401);
        for (b, idx) in epoch_batches(table.len(), cfg.batch_size, &mut erng)
            .into_iter()
            .enumerate()
        {
            let noise = (!plan_noise.is_empty()).then_some((plan_noise, &mut nrng));
            let (loss, grad) = table.step_perturbed(&dec, &idx, noise)?;
            opt.step(&mut dec.mlp.params, &grad)?;
            curve.push(epoch, b, loss);
        }
    }
    Ok((dec, curve))
}

/// `L_inv(phi) + anchor * ||phi - phi0||^2` on the given examples, with its gradient.
pub fn anchored_objective(
    table: &DecoderTable,
    dec: &InverseDecoder,
    anchor: &Params,
    anchor_weight: f64,
    idx: &[usize],
) -> Result<(f64, Params)> {
    anchored(table, dec, anchor, anchor_weight, idx, None)
}

fn anchored(
    table: &DecoderTable,
    dec: &InverseDecoder,
    anchor: &Params,
    anchor_weight: f64,
    idx: &[usize],
    noise: Option<(&[f64], &mut SeededRng)>,
) -> Result<(f64, Params)> {
    let (loss, mut grad) = table.step_perturbed(dec, idx, noise)?;
    let p = &dec.mlp.params;
    p.check_same(anchor)?;
    let mut penalty = 0.0;
    for ((g, v), a) in grad.values.iter_mut().zip(&p.values).zip(&anchor.values) {
        penalty += (v - a) * (v - a);
        *g += 2.0 * anchor_weight * (v - a);
    }
    Ok((loss + anchor_weight * penalty, grad))
}

/// Anchored fine-tuning of the decoder on one target city. The denoiser is
/// not an argument, so it cannot change.
pub fn finetune(
    decoder: &InverseDecoder,
    examples: &[Example],
    pre: &Preprocessor,
    cfg: &TrainConfig,
    plan_noise: &[f64],
) -> Result<(InverseDecoder, LossCurve)> {
    cfg.validate()?;
    let table = DecoderTable::build(examples, pre)?;
    let anchor = decoder.mlp.params.clone();
    let mut dec = decoder.clone();
    let mut opt = AdamW::new(cfg.lr_finetune, 0.0, dec.mlp.params.len());
    let root = SeededRng::new(cfg.seed, stream_id(&[0xF17]));
    let mut curve = LossCurve::default();
    for epoch in 0..cfg.finetune_epochs {
        let mut erng = root.derive(epoch as u64);
        let mut nrng = erng.derive(0x401);
        for (b, idx) in epoch_batches(table.len(), cfg.batch_size, &mut erng)
            .into_iter()
            .enumerate()
        {
            let noise = (!plan_noise.is_empty()).then_some((plan_noise, &mut nrng));
            let (loss, grad) = anchored(&table, &dec, &anchor, cfg.anchor_weight, &idx, noise)?;
            opt.step(&mut dec.mlp.params, &grad)?;
            curve.push(epoch, b, loss);
        }
    }
    Ok((dec, curve))
}

/// Sampled prefixes used to calibrate [`PlanNoise::Calibrated`].
pub const PLAN_NOISE_SAMPLES: usize = 64;

/// Per-feature rms error (model units) of the first row the denoiser samples
/// after a random logged prefix, against the row that was actually logged.
pub fn plan_step_error(
    denoiser: &TemporalDenoiser,
    schedule: &NoiseSchedule,
    examples: &[Example],
    pre: &Preprocessor,
    samples: usize,
    rng: &SeededRng,
) -> Result<Vec<f64>> {
    let usable: Vec<&Example> = examples.iter().filter(|e| e.valid_length >= 2).collect();
    if usable.is_empty() || samples == 0 {
        return Err(Error::Domain(
            "plan error needs at least one example with two states".into(),
        ));
    }
    let sq: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(i as u64);
            let ex = usable[r.int_inclusive(0, usable.len() - 1)];
            let k = sample_prefix_length(ex.horizon(), &mut r)?.clamp(1, ex.valid_length - 1);
            let ctx = ex.ctx_at(k, &pre.contexts);
            let prefix = ex.states.slice(ndarray::s![..k, ..]);
            let plan = reverse_sample(
                prefix,
                ex.horizon(),
                &ctx,
                schedule,
                denoiser,
                &mut r,
                SampleOptions::default(),
            )?;
            Ok(plan
                .row(0)
                .iter()
                .zip(ex.states.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut rms = vec![0.0; crate::types::STATE_DIM];
    for row in &sq {
        for (acc, v) in rms.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(rms
        .into_iter()
        .map(|v| (v / samples as f64).sqrt())
        .collect())
}

/// Per-feature noise sd for decoder training under `cfg.decoder_plan_noise`
/// (empty when off).
pub fn resolve_plan_noise(
    cfg: &TrainConfig,
    denoiser: &TemporalDenoiser,
    schedule: &NoiseSchedule,
    examples: &[Example],
    pre: &Preprocessor,
) -> Result<Vec<f64>> {
    match cfg.decoder_plan_noise {
        PlanNoise::Off | PlanNoise::Fixed(0.0) => Ok(Vec::new()),
        PlanNoise::Fixed(sd) => Ok(vec![sd; crate::types::STATE_DIM]),
        PlanNoise::Calibrated => {
            let rng = SeededRng::new(cfg.seed, stream_id(&[0x9E5]));
            plan_step_error(denoiser, schedule, examples, pre, PLAN_NOISE_SAMPLES, &rng)
        }
    }
}

/// Raw trajectories of one city, for fine-tuning.
pub fn city_subset(trajs: &[Trajectory], city: &str) -> Vec<Trajectory> {
    trajs
        .iter()
        .filter(|t| t.city_id == city)
        .cloned()
        .collect()
}
