//! Circular (wrapped) Gaussian observation channel over Z_q.
//!
//! An observation of a coefficient `x` is `y = (x + e) mod q` with
//! `e ~ N(0, sigma^2)`, reduced into `[0, q)`. The noise scale is set from a
//! dimensionless effective signal-to-noise ratio `snr_n` (SNR aggregated over
//! the trace budget) via `sigma^2 = Var_uniform(q) / snr_n`, where
//! `Var_uniform(q) = (q^2 - 1)/12` is the variance of a uniform residue.
//!
//! Likelihood vectors sum the Gaussian density over enough lattice wraps that
//! the neglected tail mass is below 1e-12, making the channel exactly
//! circular: shifting `y` by an integer rotates the posterior without
//! changing its shape. Mutual information per observed coefficient is
//! estimated by Monte Carlo over the exact q-term posterior, and the
//! genie-aided recovery bound is `min(log2 q, L * MI_1)` for `L` observed
//! layers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::stats::entropy_bits;

/// Gaussian tail quantile with upper tail mass below 1e-12
/// (`exp(-z^2/2) = 1e-12`).
const WRAP_TAIL_Z: f64 = 7.433942;

/// Variance of a uniform residue on `0..q`.
pub fn uniform_variance(q: u32) -> f64 {
    let qf = q as f64;
    (qf * qf - 1.0) / 12.0
}

/// Noise model shared by every observed coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub q: u32,
    /// Effective SNR x N. `f64::INFINITY` for an exact (sigma = 0) channel.
    pub snr_n: f64,
    /// Noise standard deviation in coefficient units.
    pub sigma: f64,
    /// Lattice wraps summed on each side of the mean in likelihoods.
    pub wrap_terms: usize,
}

/// Build a channel from the effective SNR x N operating point.
pub fn channel_from_snr_n(q: u32, snr_n: f64) -> Result<ChannelParams> {
    if !(snr_n > 0.0) || !snr_n.is_finite() {
        return Err(Error::InvalidParams(format!(
            "snr_n must be positive and finite, got {snr_n}"
        )));
    }
    let sigma = (uniform_variance(q) / snr_n).sqrt();
    ChannelParams::with_sigma(q, sigma)
}

impl ChannelParams {
    /// Build a channel directly from a noise standard deviation
    /// (`sigma = 0` is the exact-observation limit).
    pub fn with_sigma(q: u32, sigma: f64) -> Result<Self> {
        if q < 2 {
            return Err(Error::InvalidParams(format!("modulus {q} too small")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParams(format!(
                "sigma must be finite and non-negative, got {sigma}"
            )));
        }
        let snr_n = if sigma == 0.0 {
            f64::INFINITY
        } else {
            uniform_variance(q) / (sigma * sigma)
        };
        // Smallest W with the Gaussian tail beyond W*q - q/2 below 1e-12;
        // the nearest wrapped representative is then always included. Beyond
        // sigma = 2q the wrapped density is uniform to ~1e-34 (theta-function
        // decay exp(-2 pi^2 sigma^2/q^2)), and likelihoods short-circuit to
        // exactly uniform, so W never needs to grow past that point.
        let wrap_terms = if sigma == 0.0 || sigma >= 2.0 * q as f64 {
            1
        } else {
            (0.5 + WRAP_TAIL_Z * sigma / q as f64).ceil().max(1.0) as usize
        };
        Ok(Self {
            q,
            snr_n,
            sigma,
            wrap_terms,
        })
    }

    /// Draw one observation of `x`, reduced into `[0, q)`.
    pub fn observe(&self, x: u32, rng: &mut impl Rng) -> f64 {
        debug_assert!(x < self.q);
        if self.sigma == 0.0 {
            return x as f64;
        }
        let e: f64 = rng.sample::<f64, _>(StandardNormal) * self.sigma;
        (x as f64 + e).rem_euclid(self.q as f64)
    }

    /// Posterior over `0..q` given `y` under a uniform prior, normalized to
    /// sum to 1. With `sigma = 0` this is a delta at `round(y) mod q`.
    pub fn likelihood_vector(&self, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.q as usize];
        self.likelihood_into(y, &mut out);
        out
    }

    /// Allocation-free variant of [`ChannelParams::likelihood_vector`].
    pub fn likelihood_into(&self, y: f64, out: &mut [f64]) {
        let q = self.q as usize;
        assert_eq!(out.len(), q);
        if self.sigma == 0.0 {
            out.fill(0.0);
            let x = (y.round() as i64).rem_euclid(self.q as i64) as usize;
            out[x] = 1.0;
            return;
        }
        if self.sigma >= 2.0 * self.q as f64 {
            out.fill(1.0 / q as f64);
            return;
        }
        let qf = self.q as f64;
        let inv2s2 = 1.0 / (2.0 * self.sigma * self.sigma);
        let w_max = self.wrap_terms as i64;
        // Log weights with a single global max-subtraction for stability.
        let mut max_log = f64::NEG_INFINITY;
        for (x, slot) in out.iter_mut().enumerate() {
            let d = y - x as f64;
            let mut best = f64::NEG_INFINITY;
            for w in -w_max..=w_max {
                let r = d - w as f64 * qf;
                best = best.max(-r * r * inv2s2);
            }
            *slot = best; // stash per-entry max log weight
            max_log = max_log.max(best);
        }
        let mut total = 0.0;
        for (x, slot) in out.iter_mut().enumerate() {
            let d = y - x as f64;
            let mut acc = 0.0;
            for w in -w_max..=w_max {
                let r = d - w as f64 * qf;
                acc += (-r * r * inv2s2 - max_log).exp();
            }
            *slot = acc;
            total += acc;
        }
        let inv = 1.0 / total;
        for slot in out.iter_mut() {
            *slot *= inv;
        }
    }
}

/// Monte Carlo mutual-information estimate in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub bits: f64,
    /// Standard error of the Monte Carlo mean, in bits.
    pub std_err_bits: f64,
    pub n_samples: usize,
}

/// Estimate `I(X; Y) = log2(q) - E_y[H(posterior)]` for a uniform secret
/// coefficient observed once through the channel.
///
/// Each sample draws from its own counter-derived RNG stream, so the
/// estimate is independent of how samples are scheduled across threads.
pub fn mi_single_layer(channel: &ChannelParams, n_samples: usize, seed: u64) -> Result<MiEstimate> {
    if n_samples < 10_000 {
        return Err(Error::InvalidParams(format!(
            "mutual-information estimate needs >= 10000 samples, got {n_samples}"
        )));
    }
    let entropies = par::map_indexed(n_samples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let x = rng.gen_range(0..channel.q);
        let y = channel.observe(x, &mut rng);
        entropy_bits(&channel.likelihood_vector(y))
    });
    let n = n_samples as f64;
    let mean: f64 = entropies.iter().sum::<f64>() / n;
    let var: f64 = entropies.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / (n - 1.0);
    Ok(MiEstimate {
        bits: (channel.q as f64).log2() - mean,
        std_err_bits: (var / n).sqrt(),
        n_samples,
    })
}

/// Genie-aided information bound for `layer_count` independently observed
/// layers: `min(log2 q, L * mi_1)`.
pub fn genie_bound_from_mi(q: u32, mi_1_bits: f64, layer_count: usize) -> Result<f64> {
    if layer_count == 0 {
        return Err(Error::InvalidParams("layer_count must be >= 1".into()));
    }
    Ok((q as f64).log2().min(layer_count as f64 * mi_1_bits))
}

/// [`genie_bound_from_mi`] with the single-layer MI estimated in place.
pub fn genie_bound(
    channel: &ChannelParams,
    layer_count: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mi = mi_single_layer(channel, n_samples, seed)?;
    genie_bound_from_mi(channel.q, mi.bits, layer_count)
}

/// Smallest `snr_n` (to `resolution`) at which the genie bound saturates,
/// i.e. `layer_count * MI_1(snr_n) >= log2 q`. Bisection over
/// `[lo, hi]`; errors if the bracket does not straddle saturation.
pub fn genie_saturation_threshold(
    q: u32,
    layer_count: usize,
    lo: f64,
    hi: f64,
    resolution: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(lo > 0.0 && hi > lo && resolution > 0.0) {
        return Err(Error::InvalidParams(
            "need 0 < lo < hi and a positive resolution".into(),
        ));
    }
    let target = (q as f64).log2();
    let l = layer_count as f64;
    let mi_at = |snr: f64, step: u64| -> Result<f64> {
        let ch = channel_from_snr_n(q, snr)?;
        Ok(mi_single_layer(&ch, n_samples, seed.wrapping_add(step))?.bits)
    };
    if l * mi_at(lo, 0)? >= target {
        return Err(Error::InvalidParams(format!(
            "already saturated at snr_n = {lo}"
        )));
    }
    if l * mi_at(hi, 1)? < target {
        return Err(Error::InvalidParams(format!(
            "not saturated even at snr_n = {hi}"
        )));
    }
    let (mut lo, mut hi) = (lo, hi);
    let mut step = 2u64;
    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        if l * mi_at(mid, step)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
        step += 1;
    }
    Ok(hi)
}
