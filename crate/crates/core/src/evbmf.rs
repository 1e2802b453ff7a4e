//! Empirical variational Bayes matrix factorization (global analytic
//! solution) as a per-layer rank estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{svd, unfold, Matrix, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvbmfEstimate {
    pub estimated_rank: usize,
    pub noise_variance: f64,
    /// singular values above the threshold, non-increasing
    pub retained_singular_values: Vec<f64>,
}

/// Points of the coarse log-spaced scan over the noise variance.
const SCAN_POINTS: usize = 400;
const REFINE_ITERS: usize = 100;

fn tau(x: f64, alpha: f64) -> f64 {
    let b = x - (1.0 + alpha);
    0.5 * (b + (b * b - 4.0 * alpha).max(0.0).sqrt())
}

/// Free energy (up to constants) as a function of the noise variance, all
/// `min(rows, cols)` components kept.
fn objective(sigma2: f64, l: f64, m: f64, s: &[f64], xubar: f64) -> f64 {
    let alpha = l / m;
    let mut obj = 0.0;
    for &sv in s {
        let x = sv * sv / (m * sigma2);
        if x > xubar {
            let t = tau(x, alpha);
            obj += x - t + ((t + 1.0) / x).ln() + alpha * (t / alpha + 1.0).ln();
        } else {
            obj += x - x.ln();
        }
    }
    obj
}

/// Minimize `objective` over `[lo, hi]`: a log-spaced scan to locate the
/// global basin, then golden-section refinement on its bracket.
fn minimize_sigma2(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return hi;
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    let at = |i: usize| (llo + (lhi - llo) * i as f64 / (SCAN_POINTS - 1) as f64).exp();
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for i in 0..SCAN_POINTS {
        let v = f(at(i));
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let (mut a, mut b) = (at(best.saturating_sub(1)).ln(), at((best + 1).min(SCAN_POINTS - 1)).ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let fl = |t: f64| f(t.exp());
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (fl(c), fl(d));
    for _ in 0..REFINE_ITERS {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = fl(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = fl(d);
        }
    }
    let refined = ((a + b) / 2.0).exp();
    if f(refined) <= best_val {
        refined
    } else {
        at(best)
    }
}

/// Rank and noise variance of `a` under the globally optimal analytic
/// empirical VB solution; the rank counts singular values above the
/// threshold implied by the estimated noise variance.
pub fn evbmf_rank(a: &Matrix) -> Result<EvbmfEstimate> {
    if a.rows() * a.cols() < 4 {
        return Err(Error::arg(format!(
            "EVBMF needs at least 4 entries, got a {}×{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if a.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("EVBMF input contains non-finite values".into()));
    }
    let zero = EvbmfEstimate {
        estimated_rank: 0,
        noise_variance: 0.0,
        retained_singular_values: Vec::new(),
    };
    if a.data().iter().all(|&v| v == 0.0) {
        return Ok(zero);
    }
    let (l, m) = (a.rows().min(a.cols()), a.rows().max(a.cols()));
    let s = svd(a, l)?.singular_values;
    let (lf, mf) = (l as f64, m as f64);
    let alpha = lf / mf;
    let tauubar = 2.5129 * alpha.sqrt();
    let xubar = (1.0 + tauubar) * (1.0 + alpha / tauubar);

    let total: f64 = a.data().iter().map(|v| v * v).sum();
    let upper = total / (lf * mf);
    // index of the largest rank the model can support, as in the reference solution
    let max_rank = ((lf / (1.0 + alpha)).ceil() as usize).saturating_sub(1).min(l);
    let tail = &s[max_rank.min(l - 1)..];
    let lower = (s[max_rank.min(l - 1)].powi(2) / (mf * xubar))
        .max(tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64 / mf)
        .max(upper * 1e-12);

    let sigma2 = minimize_sigma2(|v| objective(v, lf, mf, &s, xubar), lower, upper);
    if !(sigma2 > 0.0) {
        return Ok(zero);
    }
    let threshold = (mf * sigma2 * xubar).sqrt();
    let retained: Vec<f64> = s.iter().copied().take_while(|&v| v > threshold).collect();
    Ok(EvbmfEstimate {
        estimated_rank: retained.len(),
        noise_variance: sigma2,
        retained_singular_values: retained,
    })
}

/// `(r1, r2)` from the input-channel and output-channel unfoldings, each at least 1.
pub fn evbmf_tucker_ranks(w: &Tensor4) -> Result<(usize, usize)> {
    let r1 = evbmf_rank(&unfold(w, 2)?)?.estimated_rank.max(1);
    let r2 = evbmf_rank(&unfold(w, 1)?)?.estimated_rank.max(1);
    Ok((r1, r2))
}
