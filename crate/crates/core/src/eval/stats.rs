use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// p-value reported when every paired difference is the same positive number.
pub const DEGENERATE_P: f64 = 1e-12;

/// One-sided paired t-test of `H0: E[a - b] <= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedComparison {
    pub n: usize,
    pub mean_diff: f64,
    /// Two-sided 95% interval for the mean difference.
    pub ci95: (f64, f64),
    pub t_stat: f64,
    pub p_value: f64,
}

pub fn paired_compare(a: &[f64], b: &[f64]) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "paired samples",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Domain(
            "paired comparison needs at least two pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
    let se = (var / nf).sqrt();
    if se == 0.0 {
        let (t_stat, p_value) = if mean > 0.0 {
            (f64::INFINITY, DEGENERATE_P)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(PairedComparison {
            n,
            mean_diff: mean,
            ci95: (mean, mean),
            t_stat,
            p_value,
        });
    }
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let t_stat = mean / se;
    let half = dist.inverse_cdf(0.975) * se;
    Ok(PairedComparison {
        n,
        mean_diff: mean,
        ci95: (mean - half, mean + half),
        t_stat,
        p_value: 1.0 - dist.cdf(t_stat),
    })
}

/// Average ranks (1-based), ties share their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation (Pearson on average ranks). Constant input gives 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain(
            "spearman needs two equal-length series of length >= 2".into(),
        ));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}
