//! Masked denoising and inverse-dynamics losses with their gradients.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Guard in the inverse-loss denominator.
pub const INVERSE_EPS: f64 = 1e-8;

/// A minibatch for both training objectives. All samples share the horizon `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub z_noised: Vec<Array2<f64>>,
    /// True noise; meaningful only where `mask` is 1.
    pub eps: Vec<Array2<f64>>,
    /// `N x T`, 1 on valid suffix positions.
    pub mask: Array2<f64>,
    pub tau: Vec<usize>,
    pub prefix_len: Vec<usize>,
    /// Normalized context vectors at each sample's prefix boundary.
    pub contexts: Vec<Vec<f64>>,
    /// `N x T` logged actions.
    pub actions: Array2<f64>,
    /// `N x T`, 1 where the decoder is supervised.
    pub inv_mask: Array2<f64>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.z_noised.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_noised.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.mask.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let t = self.horizon();
        let lens = [
            self.eps.len(),
            self.tau.len(),
            self.prefix_len.len(),
            self.contexts.len(),
            self.mask.nrows(),
        ];
        if lens.iter().any(|&l| l != n)
            || self.actions.dim() != (n, t)
            || self.inv_mask.dim() != (n, t)
        {
            return Err(Error::Shape("inconsistent batch sizes".into()));
        }
        for i in 0..n {
            if self.z_noised[i].nrows() != t || self.eps[i].dim() != self.z_noised[i].dim() {
                return Err(Error::Shape(format!(
                    "sample {i} has mismatched trajectory shapes"
                )));
            }
            if (0..self.prefix_len[i].min(t)).any(|k| self.mask[[i, k]] != 0.0) {
                return Err(Error::Invariant(format!(
                    "sample {i} supervises a prefix position"
                )));
            }
        }
        Ok(())
    }
}

/// Weight applied to `sum_t m ||pred - eps||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DenoiseNormalization {
    /// Divide by the number of supervised positions.
    #[default]
    MaskCount,
    /// Divide by the number of samples only.
    SampleCount,
}

fn check_preds(pred: &[Array2<f64>], batch: &MaskedBatch) -> Result<()> {
    if pred.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} samples",
            pred.len(),
            batch.len()
        )));
    }
    for (p, e) in pred.iter().zip(&batch.eps) {
        if p.dim() != e.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs noise {:?}",
                p.dim(),
                e.dim()
            )));
        }
    }
    Ok(())
}

fn denominator(batch: &MaskedBatch, norm: DenoiseNormalization) -> Result<f64> {
    let count: f64 = batch.mask.sum();
    if count == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(match norm {
        DenoiseNormalization::MaskCount => count,
        DenoiseNormalization::SampleCount => batch.len() as f64,
    })
}

/// Masked squared error summed over supervised positions and features.
fn masked_sse(pred: &[Array2<f64>], batch: &MaskedBatch) -> f64 {
    let mut total = 0.0;
    for (n, (p, e)) in pred.iter().zip(&batch.eps).enumerate() {
        for (t, (pr, er)) in p.rows().into_iter().zip(e.rows()).enumerate() {
            let m = batch.mask[[n, t]];
            if m != 0.0 {
                total += m * pr
                    .iter()
                    .zip(er)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
    }
    total
}

/// Mask-normalized denoising loss.
pub fn mndl_loss(pred: &[Array2<f64>], batch: &MaskedBatch) -> Result<f64> {
    denoise_loss(pred, batch, DenoiseNormalization::MaskCount)
}

pub fn denoise_loss(
    pred: &[Array2<f64>],
    batch: &MaskedBatch,
    norm: DenoiseNormalization,
) -> Result<f64> {
    check_preds(pred, batch)?;
    Ok(masked_sse(pred, batch) / denominator(batch, norm)?)
}

/// Gradient of [`denoise_loss`] with respect to each prediction.
pub fn denoise_loss_grad(
    pred: &[Array2<f64>],
    batch: &MaskedBatch,
    norm: DenoiseNormalization,
) -> Result<Vec<Array2<f64>>> {
    check_preds(pred, batch)?;
    let scale = 2.0 / denominator(batch, norm)?;
    Ok(pred
        .iter()
        .zip(&batch.eps)
        .enumerate()
        .map(|(n, (p, e))| {
            let mut g = Array2::zeros(p.raw_dim());
            for t in 0..p.nrows() {
                let m = batch.mask[[n, t]];
                if m != 0.0 {
                    for j in 0..p.ncols() {
                        g[[t, j]] = scale * m * (p[[t, j]] - e[[t, j]]);
                    }
                }
            }
            g
        })
        .collect())
}

/// `sum m_inv (pred - lambda)^2 / (sum m_inv + eps)`.
pub fn inverse_loss(
    pred: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    inv_mask: ArrayView2<f64>,
) -> Result<f64> {
    check_inverse(pred, actions, inv_mask)?;
    let mut total = 0.0;
    for ((p, a), m) in pred.iter().zip(actions).zip(inv_mask) {
        if *m != 0.0 {
            total += m * (p - a) * (p - a);
        }
    }
    Ok(total / (inv_mask.sum() + INVERSE_EPS))
}

pub fn inverse_loss_grad(
    pred: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    inv_mask: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_inverse(pred, actions, inv_mask)?;
    let scale = 2.0 / (inv_mask.sum() + INVERSE_EPS);
    let mut g = Array2::zeros(pred.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(pred)
        .and(actions)
        .and(inv_mask)
        .for_each(|g, &p, &a, &m| {
            if m != 0.0 {
                *g = scale * m * (p - a);
            }
        });
    Ok(g)
}

fn check_inverse(
    pred: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    inv_mask: ArrayView2<f64>,
) -> Result<()> {
    if pred.dim() != actions.dim() || pred.dim() != inv_mask.dim() {
        return Err(Error::Shape(format!(
            "inverse loss shapes {:?} / {:?} / {:?}",
            pred.dim(),
            actions.dim(),
            inv_mask.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, s, Array2};

    fn batch(eps: Vec<Array2<f64>>, mask: Array2<f64>, prefix: Vec<usize>) -> MaskedBatch {
        let n = eps.len();
        let t = mask.ncols();
        MaskedBatch {
            z_noised: eps.clone(),
            eps,
            mask,
            tau: vec![1; n],
            prefix_len: prefix,
            contexts: vec![vec![]; n],
            actions: Array2::zeros((n, t)),
            inv_mask: Array2::zeros((n, t)),
        }
    }

    #[test]
    fn worked_example() {
        let b = batch(vec![arr2(&[[9.0], [0.0]])], arr2(&[[0.0, 1.0]]), vec![1]);
        b.validate().unwrap();
        let pred = vec![arr2(&[[-4.0], [0.5]])];
        assert_eq!(mndl_loss(&pred, &b).unwrap(), 0.25);
        assert_eq!(mndl_loss(&b.eps.clone(), &b).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_mask_is_an_error() {
        let b = batch(vec![arr2(&[[1.0], [0.0]])], arr2(&[[0.0, 0.0]]), vec![2]);
        assert!(matches!(
            mndl_loss(&b.eps.clone(), &b),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn prefix_supervision_is_rejected() {
        let b = batch(vec![arr2(&[[1.0], [0.0]])], arr2(&[[1.0, 1.0]]), vec![1]);
        assert!(matches!(b.validate(), Err(Error::Invariant(_))));
    }

    #[test]
    fn padding_leaves_losses_unchanged_exactly() {
        let mut rng = crate::rng::SeededRng::new(3, 0);
        let t = 7;
        let eps: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((t, 4), |_| rng.normal()))
            .collect();
        let pred: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((t, 4), |_| rng.normal()))
            .collect();
        let mask = Array2::from_shape_fn((3, t), |(n, k)| if k > n { 1.0 } else { 0.0 });
        let b = batch(eps.clone(), mask.clone(), vec![1, 2, 3]);
        let base = mndl_loss(&pred, &b).unwrap();

        let pad = |m: &Array2<f64>, fill: f64| {
            let mut out = Array2::from_elem((m.nrows() + 10, m.ncols()), fill);
            out.slice_mut(s![..m.nrows(), ..]).assign(m);
            out
        };
        let eps_p: Vec<_> = eps.iter().map(|e| pad(e, 0.0)).collect();
        let pred_p: Vec<_> = pred.iter().map(|p| pad(p, 123.0)).collect();
        let mut mask_p = Array2::zeros((3, t + 10));
        mask_p.slice_mut(s![.., ..t]).assign(&mask);
        let bp = batch(eps_p, mask_p.clone(), vec![1, 2, 3]);
        assert_eq!(mndl_loss(&pred_p, &bp).unwrap(), base);

        let lam = Array2::from_shape_fn((3, t), |_| rng.uniform_range(0.1, 5.0));
        let lam_hat = Array2::from_shape_fn((3, t), |_| rng.uniform_range(0.1, 5.0));
        let inv = inverse_loss(lam_hat.view(), lam.view(), mask.view()).unwrap();
        let pad_cols = |m: &Array2<f64>, fill: f64| {
            let mut out = Array2::from_elem((m.nrows(), m.ncols() + 10), fill);
            out.slice_mut(s![.., ..m.ncols()]).assign(m);
            out
        };
        let inv_p = inverse_loss(
            pad_cols(&lam_hat, 9.0).view(),
            pad_cols(&lam, 1.0).view(),
            mask_p.view(),
        )
        .unwrap();
        assert_eq!(inv, inv_p);
    }

    #[test]
    fn inverse_loss_cases() {
        let lam = arr2(&[[1.0, 2.0, 3.0]]);
        let m = arr2(&[[1.0, 1.0, 0.0]]);
        assert_eq!(inverse_loss(lam.view(), lam.view(), m.view()).unwrap(), 0.0);
        let one = arr2(&[[0.0, 1.0, 0.0]]);
        let pred = arr2(&[[1.0, 4.0, 3.0]]);
        let l = inverse_loss(pred.view(), lam.view(), one.view()).unwrap();
        assert_eq!(l, 4.0 / (1.0 + INVERSE_EPS));
        let zero = Array2::zeros((1, 3));
        assert_eq!(
            inverse_loss(pred.view(), lam.view(), zero.view()).unwrap(),
            0.0
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::SeededRng::new(4, 0);
        let eps: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((5, 3), |_| rng.normal()))
            .collect();
        let mask = arr2(&[[0.0, 1.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0, 1.0]]);
        let b = batch(eps, mask, vec![1, 3]);
        let pred: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((5, 3), |_| rng.normal()))
            .collect();
        for norm in [
            DenoiseNormalization::MaskCount,
            DenoiseNormalization::SampleCount,
        ] {
            let g = denoise_loss_grad(&pred, &b, norm).unwrap();
            for (n, t, j) in [(0, 2, 1), (1, 4, 0), (0, 0, 2)] {
                let mut p = pred.clone();
                p[n][[t, j]] += 1e-6;
                let up = denoise_loss(&p, &b, norm).unwrap();
                p[n][[t, j]] -= 2e-6;
                let down = denoise_loss(&p, &b, norm).unwrap();
                assert!((g[n][[t, j]] - (up - down) / 2e-6).abs() < 1e-7);
            }
        }
    }
}
