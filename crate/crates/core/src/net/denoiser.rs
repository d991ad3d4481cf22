//! Residual dilated temporal-convolution noise predictor.
//!
//! Input rows are `[z_t, 1{t < K}]`; the diffusion step and the context enter
//! through a shared embedding that scales and shifts every block.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::params::{Checkpoint, Layout, Params, Slot, CHECKPOINT_VERSION};
use super::{outer_add, silu, silu_grad, INIT_STD};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Width of a trajectory row.
    pub state_dim: usize,
    pub ctx_dim: usize,
    pub width: usize,
    /// Odd convolution kernel size.
    pub kernel: usize,
    /// One residual block per entry.
    pub dilations: Vec<usize>,
    pub emb_dim: usize,
    /// Sinusoidal frequencies for the step embedding (features = 2x this).
    pub step_freqs: usize,
}

impl DenoiserConfig {
    /// Default size: 4 blocks, width 32, kernel 3, dilations 1/2/4/8.
    pub fn small(state_dim: usize, ctx_dim: usize) -> Self {
        Self {
            state_dim,
            ctx_dim,
            width: 32,
            kernel: 3,
            dilations: vec![1, 2, 4, 8],
            emb_dim: 32,
            step_freqs: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.state_dim, self.width, self.emb_dim, self.step_freqs];
        if dims.contains(&0)
            || self.kernel.is_multiple_of(2)
            || self.dilations.is_empty()
            || self.dilations.contains(&0)
        {
            return Err(Error::Config(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }

    /// Rows on either side of a position that can influence its output.
    pub fn receptive_radius(&self) -> usize {
        self.dilations.iter().map(|d| d * (self.kernel / 2)).sum()
    }
}

#[derive(Debug, Clone)]
struct BlockSlots {
    conv_w: Slot,
    conv_b: Slot,
    scale_w: Slot,
    scale_b: Slot,
    shift_w: Slot,
    shift_b: Slot,
}

#[derive(Debug, Clone)]
struct Slots {
    in_w: Slot,
    in_b: Slot,
    step_w: Slot,
    ctx_w: Slot,
    emb_b: Slot,
    blocks: Vec<BlockSlots>,
    out_w: Slot,
    out_b: Slot,
}

fn build_layout(cfg: &DenoiserConfig) -> (Layout, Slots) {
    let mut l = Layout::default();
    let w = cfg.width;
    let in_w = l.add("input.weight", cfg.state_dim + 1, w);
    let in_b = l.add("input.bias", 1, w);
    let step_w = l.add("embed.step.weight", 2 * cfg.step_freqs, cfg.emb_dim);
    let ctx_w = l.add("embed.context.weight", cfg.ctx_dim, cfg.emb_dim);
    let emb_b = l.add("embed.bias", 1, cfg.emb_dim);
    let blocks = (0..cfg.dilations.len())
        .map(|i| BlockSlots {
            conv_w: l.add(format!("block{i}.conv.weight"), cfg.kernel * w, w),
            conv_b: l.add(format!("block{i}.conv.bias"), 1, w),
            scale_w: l.add(format!("block{i}.scale.weight"), cfg.emb_dim, w),
            scale_b: l.add(format!("block{i}.scale.bias"), 1, w),
            shift_w: l.add(format!("block{i}.shift.weight"), cfg.emb_dim, w),
            shift_b: l.add(format!("block{i}.shift.bias"), 1, w),
        })
        .collect();
    let out_w = l.add("output.weight", w, cfg.state_dim);
    let out_b = l.add("output.bias", 1, cfg.state_dim);
    (
        l,
        Slots {
            in_w,
            in_b,
            step_w,
            ctx_w,
            emb_b,
            blocks,
            out_w,
            out_b,
        },
    )
}

/// Sinusoidal features of the diffusion step.
pub fn step_embedding(tau: usize, freqs: usize) -> Array1<f64> {
    let mut out = Array1::zeros(2 * freqs);
    for j in 0..freqs {
        let f = (-(10_000f64).ln() * j as f64 / freqs as f64).exp();
        out[j] = (tau as f64 * f).sin();
        out[freqs + j] = (tau as f64 * f).cos();
    }
    out
}

/// Activations recorded by [`TemporalDenoiser::forward_traced`].
#[derive(Debug, Clone)]
pub struct DenoiserTape {
    input: Array2<f64>,
    step: Array1<f64>,
    ctx: Array1<f64>,
    emb_pre: Array1<f64>,
    emb: Array1<f64>,
    /// Input to each block, then the final hidden state.
    hidden: Vec<Array2<f64>>,
    conv: Vec<Array2<f64>>,
    gain: Vec<Array1<f64>>,
    pre_act: Vec<Array2<f64>>,
    n_params: usize,
}

impl DenoiserTape {
    pub fn rows(&self) -> usize {
        self.input.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct TemporalDenoiser {
    cfg: DenoiserConfig,
    slots: Slots,
    pub params: Params,
}

/// `out[t] += sum_k h[t + (k - r) d] W_k` with zero padding.
fn conv_forward(
    h: ArrayView2<f64>,
    w: ArrayView2<f64>,
    kernel: usize,
    dil: usize,
    out: &mut Array2<f64>,
) {
    let rows = h.nrows() as isize;
    let width = h.ncols();
    let radius = (kernel / 2) as isize;
    for k in 0..kernel {
        let off = (k as isize - radius) * dil as isize;
        let lo = (-off).max(0);
        let hi = (rows - off).min(rows);
        if lo >= hi {
            continue;
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let src = h.slice(s![
            (lo as isize + off) as usize..(hi as isize + off) as usize,
            ..
        ]);
        let wk = w.slice(s![k * width..(k + 1) * width, ..]);
        general_mat_mul(1.0, &src, &wk, 1.0, &mut out.slice_mut(s![lo..hi, ..]));
    }
}

fn conv_backward(
    h: ArrayView2<f64>,
    w: ArrayView2<f64>,
    du: ArrayView2<f64>,
    kernel: usize,
    dil: usize,
    dw: &mut ndarray::ArrayViewMut2<f64>,
    dh: &mut Array2<f64>,
) {
    let rows = h.nrows() as isize;
    let width = h.ncols();
    let radius = (kernel / 2) as isize;
    for k in 0..kernel {
        let off = (k as isize - radius) * dil as isize;
        let lo = (-off).max(0);
        let hi = (rows - off).min(rows);
        if lo >= hi {
            continue;
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let (slo, shi) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
        let src = h.slice(s![slo..shi, ..]);
        let g = du.slice(s![lo..hi, ..]);
        general_mat_mul(
            1.0,
            &src.t(),
            &g,
            1.0,
            &mut dw.slice_mut(s![k * width..(k + 1) * width, ..]),
        );
        let wk = w.slice(s![k * width..(k + 1) * width, ..]);
        general_mat_mul(1.0, &g, &wk.t(), 1.0, &mut dh.slice_mut(s![slo..shi, ..]));
    }
}

fn add_row(m: &mut Array2<f64>, row: ArrayView1<f64>) {
    for mut r in m.axis_iter_mut(Axis(0)) {
        r += &row;
    }
}

impl TemporalDenoiser {
    pub fn new(cfg: DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (layout, slots) = build_layout(&cfg);
        let params = Params::init_normal(layout, INIT_STD, rng);
        Ok(Self { cfg, slots, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn check_inputs(
        &self,
        z: ArrayView2<f64>,
        tau: usize,
        ctx: &[f64],
        prefix_len: usize,
    ) -> Result<()> {
        if z.ncols() != self.cfg.state_dim {
            return Err(Error::Dimension {
                what: "denoiser input row",
                expected: self.cfg.state_dim,
                actual: z.ncols(),
            });
        }
        if ctx.len() != self.cfg.ctx_dim {
            return Err(Error::Dimension {
                what: "denoiser context",
                expected: self.cfg.ctx_dim,
                actual: ctx.len(),
            });
        }
        if prefix_len > z.nrows() || z.nrows() == 0 || tau == 0 {
            return Err(Error::Shape(format!(
                "denoiser called with {} rows, prefix {prefix_len}, step {tau}",
                z.nrows()
            )));
        }
        Ok(())
    }

    pub fn forward_traced(
        &self,
        z: ArrayView2<f64>,
        tau: usize,
        ctx: &[f64],
        prefix_len: usize,
    ) -> Result<(Array2<f64>, DenoiserTape)> {
        self.check_inputs(z, tau, ctx, prefix_len)?;
        let p = &self.params;
        let sl = &self.slots;
        let rows = z.nrows();
        let d = self.cfg.state_dim;

        let mut input = Array2::zeros((rows, d + 1));
        input.slice_mut(s![.., ..d]).assign(&z);
        input.slice_mut(s![..prefix_len, d]).fill(1.0);

        let mut h = input.dot(&p.mat(sl.in_w));
        add_row(&mut h, p.vec(sl.in_b));

        let step = step_embedding(tau, self.cfg.step_freqs);
        let ctx = Array1::from(ctx.to_vec());
        let emb_pre = step.dot(&p.mat(sl.step_w)) + ctx.dot(&p.mat(sl.ctx_w)) + p.vec(sl.emb_b);
        let emb = emb_pre.mapv(silu);

        let nb = self.cfg.dilations.len();
        let mut hidden = Vec::with_capacity(nb + 1);
        let mut conv = Vec::with_capacity(nb);
        let mut gain = Vec::with_capacity(nb);
        let mut pre_act = Vec::with_capacity(nb);
        for (b, &dil) in self.cfg.dilations.iter().enumerate() {
            let bs = &sl.blocks[b];
            let mut u = Array2::zeros((rows, self.cfg.width));
            conv_forward(h.view(), p.mat(bs.conv_w), self.cfg.kernel, dil, &mut u);
            add_row(&mut u, p.vec(bs.conv_b));
            let g = emb.dot(&p.mat(bs.scale_w)) + p.vec(bs.scale_b) + 1.0;
            let shift = emb.dot(&p.mat(bs.shift_w)) + p.vec(bs.shift_b);
            let mut v = &u * &g;
            add_row(&mut v, shift.view());
            let next = &h + &v.mapv(silu);
            hidden.push(h);
            conv.push(u);
            gain.push(g);
            pre_act.push(v);
            h = next;
        }
        let mut out = h.dot(&p.mat(sl.out_w));
        add_row(&mut out, p.vec(sl.out_b));
        hidden.push(h);
        Ok((
            out,
            DenoiserTape {
                input,
                step,
                ctx,
                emb_pre,
                emb,
                hidden,
                conv,
                gain,
                pre_act,
                n_params: p.len(),
            },
        ))
    }

    pub fn forward(
        &self,
        z: ArrayView2<f64>,
        tau: usize,
        ctx: &[f64],
        prefix_len: usize,
    ) -> Result<Array2<f64>> {
        Ok(self.forward_traced(z, tau, ctx, prefix_len)?.0)
    }

    /// Gradient of `sum(d_out * output)` with respect to every parameter.
    pub fn backward(&self, tape: &DenoiserTape, d_out: ArrayView2<f64>) -> Result<Params> {
        let rows = tape.rows();
        if tape.n_params != self.params.len() || tape.hidden.len() != self.cfg.dilations.len() + 1 {
            return Err(Error::Shape(
                "tape was recorded by a different network".into(),
            ));
        }
        if d_out.dim() != (rows, self.cfg.state_dim) {
            return Err(Error::Shape(format!(
                "output cotangent {:?}, expected {:?}",
                d_out.dim(),
                (rows, self.cfg.state_dim)
            )));
        }
        let p = &self.params;
        let sl = &self.slots;
        let mut g = p.zeros_like();

        let last = &tape.hidden[self.cfg.dilations.len()];
        g.mat_mut(sl.out_w).assign(&last.t().dot(&d_out));
        g.vec_mut(sl.out_b).assign(&d_out.sum_axis(Axis(0)));
        let mut dh = d_out.dot(&p.mat(sl.out_w).t());
        let mut d_emb = Array1::<f64>::zeros(self.cfg.emb_dim);

        for (b, &dil) in self.cfg.dilations.iter().enumerate().rev() {
            let bs = &sl.blocks[b];
            let v = &tape.pre_act[b];
            let u = &tape.conv[b];
            let dv = &dh * &v.mapv(silu_grad);
            let du = &dv * &tape.gain[b];
            let d_gain = (&dv * u).sum_axis(Axis(0));
            let d_shift = dv.sum_axis(Axis(0));
            outer_add(&mut g.mat_mut(bs.scale_w), tape.emb.view(), d_gain.view());
            g.vec_mut(bs.scale_b).assign(&d_gain);
            outer_add(&mut g.mat_mut(bs.shift_w), tape.emb.view(), d_shift.view());
            g.vec_mut(bs.shift_b).assign(&d_shift);
            d_emb += &p.mat(bs.scale_w).dot(&d_gain);
            d_emb += &p.mat(bs.shift_w).dot(&d_shift);
            g.vec_mut(bs.conv_b).assign(&du.sum_axis(Axis(0)));
            // residual path keeps dh; the conv path adds to it
            let mut dw = g.mat_mut(bs.conv_w);
            conv_backward(
                tape.hidden[b].view(),
                p.mat(bs.conv_w),
                du.view(),
                self.cfg.kernel,
                dil,
                &mut dw,
                &mut dh,
            );
        }

        let d_emb_pre = &d_emb * &tape.emb_pre.mapv(silu_grad);
        outer_add(
            &mut g.mat_mut(sl.step_w),
            tape.step.view(),
            d_emb_pre.view(),
        );
        outer_add(&mut g.mat_mut(sl.ctx_w), tape.ctx.view(), d_emb_pre.view());
        g.vec_mut(sl.emb_b).assign(&d_emb_pre);
        g.mat_mut(sl.in_w).assign(&tape.input.t().dot(&dh));
        g.vec_mut(sl.in_b).assign(&dh.sum_axis(Axis(0)));
        Ok(g)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<DenoiserConfig> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: Self::KIND.into(),
            config: self.cfg.clone(),
            params: self.params.to_records(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<DenoiserConfig>) -> Result<Self> {
        ck.config.validate()?;
        let (layout, slots) = build_layout(&ck.config);
        let params = Params::from_records(layout, &ck.params)?;
        Ok(Self {
            cfg: ck.config.clone(),
            slots,
            params,
        })
    }

    pub const KIND: &'static str = "temporal-denoiser";
}

impl Denoiser for TemporalDenoiser {
    fn predict_noise(
        &self,
        z: ArrayView2<f64>,
        tau: usize,
        ctx: &[f64],
        prefix_len: usize,
    ) -> Result<Array2<f64>> {
        self.forward(z, tau, ctx, prefix_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::gradcheck::{check_gradient, sample_indices};

    fn tiny(rng: &mut SeededRng) -> TemporalDenoiser {
        let cfg = DenoiserConfig {
            state_dim: 3,
            ctx_dim: 4,
            width: 5,
            kernel: 3,
            dilations: vec![1, 2],
            emb_dim: 4,
            step_freqs: 3,
        };
        let mut net = TemporalDenoiser::new(cfg, rng).unwrap();
        for v in &mut net.params.values {
            *v = 0.4 * rng.normal();
        }
        net
    }

    #[test]
    fn output_shape_for_day_lengths() {
        let mut rng = SeededRng::new(0, 0);
        let net = TemporalDenoiser::new(DenoiserConfig::small(20, 10), &mut rng).unwrap();
        for t in [144, 288, 720] {
            let z = Array2::from_shape_fn((t, 20), |_| rng.normal());
            let out = net.forward(z.view(), 3, &[0.1; 10], t / 2).unwrap();
            assert_eq!(out.dim(), (t, 20));
            assert_eq!(out, net.forward(z.view(), 3, &[0.1; 10], t / 2).unwrap());
        }
        let z = Array2::zeros((10, 19));
        assert!(net.forward(z.view(), 3, &[0.1; 10], 1).is_err());
    }

    #[test]
    fn every_tensor_is_live() {
        let mut rng = SeededRng::new(1, 0);
        let mut net = tiny(&mut rng);
        let z = Array2::from_shape_fn((12, 3), |_| rng.normal());
        let ctx = [0.3, -0.2, 1.0, 0.5];
        let base = net.forward(z.view(), 2, &ctx, 4).unwrap();
        for spec in net.params.layout().specs().to_vec() {
            let i = spec.offset;
            net.params.values[i] += 1e-3;
            let moved = net.forward(z.view(), 2, &ctx, 4).unwrap();
            net.params.values[i] -= 1e-3;
            assert_ne!(moved, base, "{} has no effect", spec.name);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut rng = SeededRng::new(2, 0);
        let net = tiny(&mut rng);
        let z = Array2::from_shape_fn((9, 3), |_| rng.normal());
        let (out, tape) = net.forward_traced(z.view(), 1, &[0.0; 4], 3).unwrap();
        let g = net
            .backward(&tape, Array2::zeros(out.raw_dim()).view())
            .unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = SeededRng::new(10 + seed, 0);
            let mut net = tiny(&mut rng);
            let z = Array2::from_shape_fn((11, 3), |_| rng.normal());
            let ctx: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let cot = Array2::from_shape_fn((11, 3), |_| rng.normal());
            let (_, tape) = net.forward_traced(z.view(), 5, &ctx, 4).unwrap();
            let analytic = net.backward(&tape, cot.view()).unwrap();
            let idx = sample_indices(net.params.len(), 100, &mut rng);
            let report = check_gradient(
                &mut net,
                |n| &mut n.params,
                &analytic,
                &idx,
                1e-5,
                |n| Ok((n.forward(z.view(), 5, &ctx, 4)? * &cot).sum()),
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-4, "{report:?}");
        }
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let mut rng = SeededRng::new(3, 0);
        let a = tiny(&mut rng);
        let b = TemporalDenoiser::new(DenoiserConfig::small(3, 4), &mut rng).unwrap();
        let z = Array2::zeros((6, 3));
        let (out, tape) = a.forward_traced(z.view(), 1, &[0.0; 4], 0).unwrap();
        assert!(b.backward(&tape, out.view()).is_err());
        assert!(a.backward(&tape, Array2::zeros((5, 3)).view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = SeededRng::new(4, 0);
        let net = tiny(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("den.json");
        net.to_checkpoint().save(&path).unwrap();
        let back = TemporalDenoiser::from_checkpoint(
            &Checkpoint::load(&path, TemporalDenoiser::KIND).unwrap(),
        )
        .unwrap();
        assert_eq!(back.params, net.params);
        assert!(Checkpoint::<DenoiserConfig>::load(&path, "mlp").is_err());
    }
}
