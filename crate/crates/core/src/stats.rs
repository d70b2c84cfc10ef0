//! Small statistical toolkit: entropy, binomial interval estimates, and the
//! Welch t-statistic used by the leakage-assessment tests.

use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Shannon entropy of a (not necessarily normalized) distribution, in bits.
/// Zero entries contribute nothing.
pub fn entropy_bits(p: &[f64]) -> f64 {
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &w in p {
        if w > 0.0 {
            let pi = w / total;
            h -= pi * pi.log2();
        }
    }
    h
}

fn check_counts(successes: u64, n: u64, confidence: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParams("sample count must be >= 1".into()));
    }
    if successes > n {
        return Err(Error::InvalidParams(format!(
            "successes {successes} exceed sample count {n}"
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParams(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    Ok(())
}

/// Two-sided Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    check_counts(successes, n, confidence)?;
    let z = Normal::new(0.0, 1.0)
        .expect("unit normal")
        .inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    let nf = n as f64;
    let p_hat = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p_hat + z2 / (2.0 * nf)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // The boundary ends are exact by construction; clamping also removes
    // floating-point dust that would otherwise exclude p-hat = 0 or 1.
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}

/// One-sided Clopper–Pearson upper confidence bound for a binomial
/// proportion (exact; the conservative choice for zero-success counts).
pub fn clopper_pearson_upper(successes: u64, n: u64, confidence: f64) -> Result<f64> {
    check_counts(successes, n, confidence)?;
    if successes == n {
        return Ok(1.0);
    }
    let beta = Beta::new(successes as f64 + 1.0, (n - successes) as f64)
        .expect("valid beta shape");
    // Bisect the (accurate) regularized-incomplete-beta CDF ourselves; the
    // library's generic inverse_cdf stops around 1e-5 absolute, which is too
    // coarse for the closed-form cross-checks.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if beta.cdf(mid) < confidence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Welch's t-statistic from per-group sample moments
/// (`var` is the unbiased sample variance). Zero when both variances vanish.
pub fn welch_t_from_moments(
    mean_a: f64,
    var_a: f64,
    n_a: usize,
    mean_b: f64,
    var_b: f64,
    n_b: usize,
) -> f64 {
    debug_assert!(n_a > 1 && n_b > 1);
    let denom = (var_a / n_a as f64 + var_b / n_b as f64).sqrt();
    if denom == 0.0 {
        if mean_a == mean_b {
            0.0
        } else {
            f64::INFINITY * (mean_a - mean_b).signum()
        }
    } else {
        (mean_a - mean_b) / denom
    }
}

/// Total-variation distance between two distributions over the same support:
/// `0.5 * sum |p_i - q_i|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean and unbiased sample variance of a slice (variance 0 for n < 2).
pub fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
