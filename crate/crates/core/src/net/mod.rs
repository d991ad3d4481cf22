//! Differentiable networks with hand-written reverse passes.

pub mod adam;
pub mod denoiser;
pub mod gradcheck;
pub mod mlp;
pub mod params;

use ndarray::{ArrayView1, ArrayViewMut2};

pub use adam::AdamW;
pub use denoiser::{DenoiserConfig, DenoiserTape, TemporalDenoiser};
pub use mlp::{action_from_logit, decoder_input, InverseDecoder, Mlp, MlpConfig, MlpTape};
pub use params::{Checkpoint, Params};

/// Standard deviation of initial weights.
pub const INIT_STD: f64 = 0.02;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `m += a b^T`.
pub(crate) fn outer_add(m: &mut ArrayViewMut2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in m.rows_mut().into_iter().zip(a) {
        row.scaled_add(ai, &b);
    }
}
