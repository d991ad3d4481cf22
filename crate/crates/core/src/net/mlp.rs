//! Tanh MLP with a scalar head mapped into the action range.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::params::{Checkpoint, Layout, Params, Slot, CHECKPOINT_VERSION};
use super::{sigmoid, INIT_STD};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::types::{MAX_ACTION, STATE_DIM};

/// Smallest reachable output; keeps `lambda = 0` out of reach.
pub const ACTION_FLOOR: f64 = 1e-3;

/// `30 * sigmoid(u) * (1 - floor) + floor`, inside `(0, 30]` for every `u`.
pub fn action_from_logit(u: f64) -> f64 {
    MAX_ACTION * sigmoid(u) * (1.0 - ACTION_FLOOR) + ACTION_FLOOR
}

fn action_grad(u: f64) -> f64 {
    let s = sigmoid(u);
    MAX_ACTION * (1.0 - ACTION_FLOOR) * s * (1.0 - s)
}

/// Inverse of [`action_from_logit`], for initializing the head bias.
pub fn logit_for_action(lambda: f64) -> f64 {
    let s = ((lambda - ACTION_FLOOR) / (MAX_ACTION * (1.0 - ACTION_FLOOR))).clamp(1e-9, 1.0 - 1e-9);
    (s / (1.0 - s)).ln()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid MLP config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Layer inputs: the batch itself, then each hidden activation.
    acts: Vec<Array2<f64>>,
    logits: Array1<f64>,
    n_params: usize,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    cfg: MlpConfig,
    layers: Vec<(Slot, Slot)>,
    pub params: Params,
}

fn build_layout(cfg: &MlpConfig) -> (Layout, Vec<(Slot, Slot)>) {
    let mut l = Layout::default();
    let mut dims = vec![cfg.input_dim];
    dims.extend(&cfg.hidden);
    dims.push(1);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            (
                l.add(format!("layer{i}.weight"), w[0], w[1]),
                l.add(format!("layer{i}.bias"), 1, w[1]),
            )
        })
        .collect();
    (l, layers)
}

impl Mlp {
    pub const KIND: &'static str = "mlp";

    pub fn new(cfg: MlpConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (layout, layers) = build_layout(&cfg);
        let params = Params::init_normal(layout, INIT_STD, rng);
        Ok(Self {
            cfg,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    /// Start the head at a given action level.
    pub fn set_output_level(&mut self, lambda: f64) {
        let (_, b) = *self.layers.last().expect("at least one layer");
        self.params.vec_mut(b)[0] = logit_for_action(lambda);
    }

    pub fn forward_traced(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, MlpTape)> {
        if x.ncols() != self.cfg.input_dim {
            return Err(Error::Dimension {
                what: "MLP input",
                expected: self.cfg.input_dim,
                actual: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite network input".into()));
        }
        let mut acts = vec![x.to_owned()];
        let n = self.layers.len();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let mut y = acts[i].dot(&self.params.mat(w));
            for mut row in y.axis_iter_mut(Axis(0)) {
                row += &self.params.vec(b);
            }
            if i + 1 < n {
                acts.push(y.mapv(f64::tanh));
            } else {
                let logits = y.column(0).to_owned();
                let out = logits.mapv(action_from_logit);
                return Ok((
                    out,
                    MlpTape {
                        acts,
                        logits,
                        n_params: self.params.len(),
                    },
                ));
            }
        }
        unreachable!("layer list ends with the head")
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_traced(x)?.0)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<f64> {
        let x = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward(x)?[0])
    }

    /// Gradient of `sum(d_out * outputs)`.
    pub fn backward(&self, tape: &MlpTape, d_out: &[f64]) -> Result<Params> {
        if tape.n_params != self.params.len() || tape.acts.len() != self.layers.len() {
            return Err(Error::Shape(
                "tape was recorded by a different network".into(),
            ));
        }
        if d_out.len() != tape.logits.len() {
            return Err(Error::Dimension {
                what: "MLP output cotangent",
                expected: tape.logits.len(),
                actual: d_out.len(),
            });
        }
        let mut g = self.params.zeros_like();
        let mut delta = Array2::from_shape_fn((d_out.len(), 1), |(i, _)| {
            d_out[i] * action_grad(tape.logits[i])
        });
        for (i, &(w, b)) in self.layers.iter().enumerate().rev() {
            let input = &tape.acts[i];
            g.mat_mut(w).assign(&input.t().dot(&delta));
            g.vec_mut(b).assign(&delta.sum_axis(Axis(0)));
            if i > 0 {
                let back = delta.dot(&self.params.mat(w).t());
                delta = &back * &input.mapv(|a| 1.0 - a * a);
            }
        }
        Ok(g)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<MlpConfig> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: Self::KIND.into(),
            config: self.cfg.clone(),
            params: self.params.to_records(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<MlpConfig>) -> Result<Self> {
        ck.config.validate()?;
        let (layout, layers) = build_layout(&ck.config);
        let params = Params::from_records(layout, &ck.params)?;
        Ok(Self {
            cfg: ck.config.clone(),
            layers,
            params,
        })
    }
}

/// Rows of the decoder window around `t`: `t-2, t-1, t, t+1`, clamped to the trajectory.
pub fn window_rows(t: usize, rows: usize) -> [usize; 4] {
    let last = rows - 1;
    [
        t.saturating_sub(2),
        t.saturating_sub(1),
        t.min(last),
        (t + 1).min(last),
    ]
}

/// Input vector for the inverse-dynamics decoder: four rows then the context.
pub fn decoder_input(traj: ArrayView2<f64>, t: usize, ctx: &[f64]) -> Result<Vec<f64>> {
    if t >= traj.nrows() {
        return Err(Error::Index {
            what: "decoder window",
            index: t,
            limit: traj.nrows(),
        });
    }
    let mut v = Vec::with_capacity(4 * traj.ncols() + ctx.len());
    for r in window_rows(t, traj.nrows()) {
        v.extend(traj.row(r).iter());
    }
    v.extend_from_slice(ctx);
    Ok(v)
}

/// Context-conditioned inverse dynamics `lambda_t = g(z_{t-2..t+1}, c)`.
#[derive(Debug, Clone)]
pub struct InverseDecoder {
    pub mlp: Mlp,
}

impl InverseDecoder {
    pub fn new(ctx_dim: usize, hidden: Vec<usize>, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(
                MlpConfig {
                    input_dim: 4 * STATE_DIM + ctx_dim,
                    hidden,
                },
                rng,
            )?,
        })
    }

    pub fn ctx_dim(&self) -> usize {
        self.mlp.cfg.input_dim - 4 * STATE_DIM
    }

    /// Decode `lambda_t` from a (normalized) trajectory.
    pub fn decode(&self, traj: ArrayView2<f64>, t: usize, ctx: &[f64]) -> Result<f64> {
        if traj.ncols() != STATE_DIM {
            return Err(Error::Dimension {
                what: "decoder trajectory row",
                expected: STATE_DIM,
                actual: traj.ncols(),
            });
        }
        if ctx.len() != self.ctx_dim() {
            return Err(Error::Dimension {
                what: "decoder context",
                expected: self.ctx_dim(),
                actual: ctx.len(),
            });
        }
        self.mlp.forward_one(&decoder_input(traj, t, ctx)?)
    }
}

/// Stack several decoder inputs into a batch matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::Dimension {
                what: "batch row",
                expected: width,
                actual: r.len(),
            });
        }
        m.slice_mut(s![i, ..])
            .assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::gradcheck::{check_gradient, sample_indices};

    #[test]
    fn head_stays_inside_action_range() {
        for u in [-1e6, -50.0, 0.0, 50.0, 1e6, f64::MAX, f64::MIN] {
            let a = action_from_logit(u);
            assert!(a > 0.0 && a <= MAX_ACTION, "{u} -> {a}");
        }
        for lam in [0.01, 1.0, 12.5, 29.0] {
            assert!((action_from_logit(logit_for_action(lam)) - lam).abs() < 1e-9);
        }
    }

    #[test]
    fn extreme_inputs_stay_in_range() {
        let mut rng = SeededRng::new(0, 0);
        let dec = InverseDecoder::new(9, vec![16, 16], &mut rng).unwrap();
        let mut big = dec.clone();
        big.mlp.params.values.iter_mut().for_each(|v| *v *= 100.0);
        for net in [&dec, &big] {
            for scale in [1e6, -1e6] {
                let traj = Array2::from_shape_fn((5, STATE_DIM), |(i, j)| {
                    scale * (((i + j) % 3) as f64 - 1.0)
                });
                let ctx: Vec<f64> = (0..9).map(|i| scale * (i as f64 - 4.0)).collect();
                for t in 0..5 {
                    let lam = net.decode(traj.view(), t, &ctx).unwrap();
                    assert!(lam > 0.0 && lam <= MAX_ACTION);
                }
            }
        }
        let mut bad = Array2::zeros((3, STATE_DIM));
        bad[[1, 1]] = f64::NAN;
        assert!(dec.decode(bad.view(), 1, &[0.0; 9]).is_err());
    }

    #[test]
    fn boundary_windows_repeat_nearest_row() {
        assert_eq!(window_rows(0, 10), [0, 0, 0, 1]);
        assert_eq!(window_rows(1, 10), [0, 0, 1, 2]);
        assert_eq!(window_rows(9, 10), [7, 8, 9, 9]);
        assert_eq!(window_rows(0, 1), [0, 0, 0, 0]);
        let traj = Array2::from_shape_fn((3, 2), |(i, j)| (10 * i + j) as f64);
        assert_eq!(
            decoder_input(traj.view(), 0, &[7.0]).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 10.0, 11.0, 7.0]
        );
        assert!(decoder_input(traj.view(), 3, &[]).is_err());
    }

    #[test]
    fn single_layer_gradient_is_the_input() {
        // no hidden layers: d out / d w = action_grad(u) * x
        let mut rng = SeededRng::new(1, 0);
        let net = Mlp::new(
            MlpConfig {
                input_dim: 3,
                hidden: vec![],
            },
            &mut rng,
        )
        .unwrap();
        let x = ndarray::arr2(&[[0.5, -1.0, 2.0]]);
        let (_, tape) = net.forward_traced(x.view()).unwrap();
        let g = net.backward(&tape, &[1.0]).unwrap();
        let u = tape.logits[0];
        for j in 0..3 {
            assert!((g.values[j] - action_grad(u) * x[[0, j]]).abs() < 1e-15);
        }
        assert!((g.values[3] - action_grad(u)).abs() < 1e-15);
        let zero = net.backward(&tape, &[0.0]).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = SeededRng::new(20 + seed, 0);
            let mut net = Mlp::new(
                MlpConfig {
                    input_dim: 6,
                    hidden: vec![7, 5],
                },
                &mut rng,
            )
            .unwrap();
            for v in &mut net.params.values {
                *v = 0.5 * rng.normal();
            }
            let x = Array2::from_shape_fn((4, 6), |_| rng.normal());
            let cot: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let (_, tape) = net.forward_traced(x.view()).unwrap();
            let analytic = net.backward(&tape, &cot).unwrap();
            let idx = sample_indices(net.params.len(), 100, &mut rng);
            let report = check_gradient(
                &mut net,
                |n| &mut n.params,
                &analytic,
                &idx,
                1e-5,
                |n| {
                    Ok(n.forward(x.view())?
                        .iter()
                        .zip(&cot)
                        .map(|(a, b)| a * b)
                        .sum())
                },
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-4, "{report:?}");
        }
    }
}
