//! Prime-field arithmetic and layered Gentleman–Sande inverse-NTT cascades.
//!
//! Everything downstream (factor graphs, belief propagation, leakage models)
//! operates on the intermediate states of an inverse-NTT butterfly cascade,
//! so this module fixes the conventions once:
//!
//! * residues are canonical, in `[0, q)`;
//! * a cascade over `n = 2^m` coefficients has `layers = K <= m` butterfly
//!   layers; layer `l` (1-based) pairs positions `(j, j + len)` with
//!   `len = 2^(m - K + l - 1)`, so the final layer always spans `n/2`. For
//!   the ML-KEM instance (`q = 3329, n = 256, K = 7`) this is exactly the
//!   FIPS 203 Algorithm 10 loop structure (`len = 2, 4, ..., 128`);
//! * each butterfly computes `u_out = u + v mod q`,
//!   `v_out = zeta * (v - u) mod q`;
//! * twiddles follow the FIPS 203 schedule generalized to `K` layers:
//!   group `i` (counting down from `2^K - 1` across the cascade) uses
//!   `zeta = gamma^BitRev_K(i)`;
//! * the *layered trace* records the raw cascade states (level 0 = input,
//!   level `k` = state after layer `k`) without the final `2^-K` scaling;
//!   [`intt`] applies the scaling to produce the actual inverse transform,
//!   matching FIPS 203's trailing multiply by `128^-1 = 3303` for ML-KEM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modular addition of canonical residues.
#[inline(always)]
pub fn mod_add(a: u32, b: u32, q: u32) -> u32 {
    let s = a + b;
    if s >= q {
        s - q
    } else {
        s
    }
}

/// Modular subtraction of canonical residues.
#[inline(always)]
pub fn mod_sub(a: u32, b: u32, q: u32) -> u32 {
    if a >= b {
        a - b
    } else {
        a + q - b
    }
}

/// Modular multiplication via u64 widening.
#[inline(always)]
pub fn mod_mul(a: u32, b: u32, q: u32) -> u32 {
    ((a as u64 * b as u64) % q as u64) as u32
}

/// Modular exponentiation by repeated squaring.
pub fn mod_pow(base: u32, mut exp: u64, q: u32) -> u32 {
    let mut base = (base % q) as u64;
    let mut acc = 1u64 % q as u64;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * base % q as u64;
        }
        base = base * base % q as u64;
        exp >>= 1;
    }
    acc as u32
}

/// Modular inverse via Fermat's little theorem (`q` must be prime).
pub fn mod_inv(a: u32, q: u32) -> Result<u32> {
    if a % q == 0 {
        return Err(Error::InvalidInput(format!("no inverse of 0 mod {q}")));
    }
    Ok(mod_pow(a, q as u64 - 2, q))
}

/// Reverse the low `width` bits of `k`.
pub fn bitrev(k: u32, width: u32) -> u32 {
    debug_assert!(width <= 31 && k < (1 << width));
    let mut out = 0;
    for b in 0..width {
        out |= ((k >> b) & 1) << (width - 1 - b);
    }
    out
}

/// One Gentleman–Sande butterfly: `(u, v) -> (u + v, zeta * (v - u))`.
#[inline(always)]
pub fn gs_butterfly(u: u32, v: u32, zeta: u32, q: u32) -> (u32, u32) {
    (mod_add(u, v, q), mod_mul(zeta, mod_sub(v, u, q), q))
}

/// Inverse of [`gs_butterfly`]: recovers `(u, v)` from `(u_out, v_out)`.
///
/// Requires `zeta` and `2` invertible mod `q` (any nonzero `zeta`, odd prime `q`).
pub fn gs_butterfly_inv(u_out: u32, v_out: u32, zeta: u32, q: u32) -> Result<(u32, u32)> {
    let diff = mod_mul(mod_inv(zeta, q)?, v_out, q); // v - u
    let inv2 = mod_inv(2, q)?;
    let u = mod_mul(inv2, mod_sub(u_out, diff, q), q);
    let v = mod_mul(inv2, mod_add(u_out, diff, q), q);
    Ok((u, v))
}

fn is_prime(q: u32) -> bool {
    if q < 2 {
        return false;
    }
    let mut d = 2u32;
    while (d as u64) * (d as u64) <= q as u64 {
        if q % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// How the twiddle generator relates to the cascade size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwiddleMode {
    /// `gamma^(2^K) = -1 mod q`: the cascade is a genuine negacyclic
    /// (inverse-)NTT and the forward transform is the standard
    /// Cooley–Tukey cascade.
    Exact,
    /// No element of order `2^(K+1)` exists mod `q` (e.g. `q = 97` with
    /// `K = 8`). `gamma` is an element of the largest power-of-two order
    /// available; butterflies remain bijective, and the forward transform
    /// is the algebraic butterfly-by-butterfly inverse of the cascade.
    Surrogate,
}

/// Parameters of one cascade instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldParams {
    /// Odd prime modulus.
    pub q: u32,
    /// Number of coefficients, a power of two `>= 2`.
    pub n: usize,
    /// Number of butterfly layers `K`, `1 <= K <= log2(n)`.
    pub layers: usize,
    /// Twiddle generator.
    pub gamma: u32,
    /// Whether `gamma` gives a true negacyclic NTT or a surrogate schedule.
    pub twiddle_mode: TwiddleMode,
}

impl FieldParams {
    /// Validated constructor. Rejects a `gamma` that does not satisfy
    /// `gamma^(2^K) = -1 mod q`; use [`FieldParams::toy`] to auto-derive a
    /// generator (including surrogate schedules where no exact one exists).
    pub fn new(q: u32, n: usize, layers: usize, gamma: u32) -> Result<Self> {
        Self::validate_shape(q, n, layers)?;
        if gamma == 0 || gamma >= q {
            return Err(Error::InvalidParams(format!(
                "gamma must be a nonzero residue mod {q}, got {gamma}"
            )));
        }
        if mod_pow(gamma, 1u64 << layers, q) != q - 1 {
            return Err(Error::InvalidParams(format!(
                "gamma = {gamma} does not satisfy gamma^(2^{layers}) = -1 mod {q}"
            )));
        }
        Ok(Self {
            q,
            n,
            layers,
            gamma,
            twiddle_mode: TwiddleMode::Exact,
        })
    }

    /// The ML-KEM instance: `q = 3329`, `n = 256`, `K = 7`, `gamma = 17`
    /// (the FIPS 203 primitive 256th root of unity; `17^128 = 3328 mod 3329`).
    pub fn ml_kem() -> Self {
        Self::new(3329, 256, 7, 17).expect("ML-KEM parameters are valid")
    }

    /// Derive a toy instance, searching for the smallest usable generator.
    ///
    /// Prefers an exact generator (`gamma^(2^K) = -1`); when `2^(K+1)` does
    /// not divide `q - 1` it falls back to an element of the largest
    /// power-of-two order available and marks the instance [`TwiddleMode::Surrogate`].
    pub fn toy(q: u32, n: usize, layers: usize) -> Result<Self> {
        Self::validate_shape(q, n, layers)?;
        if (q as u64 - 1) % (1u64 << (layers + 1)) == 0 {
            for g in 2..q {
                if mod_pow(g, 1u64 << layers, q) == q - 1 {
                    return Self::new(q, n, layers, g);
                }
            }
            return Err(Error::InvalidParams(format!(
                "no exact twiddle generator found mod {q}"
            )));
        }
        // Largest power-of-two order 2^s dividing q - 1.
        let s = (q as u64 - 1).trailing_zeros();
        let odd = (q as u64 - 1) >> s;
        for g in 2..q {
            let h = mod_pow(g, odd, q); // order of h divides 2^s
            if s >= 1 && mod_pow(h, 1u64 << (s - 1), q) == q - 1 {
                return Ok(Self {
                    q,
                    n,
                    layers,
                    gamma: h,
                    twiddle_mode: TwiddleMode::Surrogate,
                });
            }
        }
        Err(Error::InvalidParams(format!(
            "no surrogate twiddle generator found mod {q}"
        )))
    }

    fn validate_shape(q: u32, n: usize, layers: usize) -> Result<()> {
        if q < 3 || q % 2 == 0 || !is_prime(q) {
            return Err(Error::InvalidParams(format!("q must be an odd prime, got {q}")));
        }
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::InvalidParams(format!(
                "n must be a power of two >= 2, got {n}"
            )));
        }
        let m = n.trailing_zeros() as usize;
        if layers == 0 || layers > m {
            return Err(Error::InvalidParams(format!(
                "layers must be in 1..=log2(n) = {m}, got {layers}"
            )));
        }
        Ok(())
    }

    /// log2(n).
    pub fn log_n(&self) -> usize {
        self.n.trailing_zeros() as usize
    }

    /// Butterfly span of layer `l` (1-based): `2^(m - K + l - 1)`.
    pub fn len_at_layer(&self, layer: usize) -> usize {
        debug_assert!(layer >= 1 && layer <= self.layers);
        1 << (self.log_n() - self.layers + layer - 1)
    }

    /// Butterflies per layer: `n / 2`.
    pub fn butterflies_per_layer(&self) -> usize {
        self.n / 2
    }

    /// Total variables of the layered model: `n * (K + 1)`.
    pub fn variable_count(&self) -> usize {
        self.n * (self.layers + 1)
    }

    /// Total butterfly factors: `(n / 2) * K`.
    pub fn factor_count(&self) -> usize {
        self.n / 2 * self.layers
    }

    /// Twiddle table indexed by the cascade's group counter:
    /// `table[i] = gamma^BitRev_K(i)` for `i` in `1..2^K` (`table[0]` unused).
    pub fn twiddle_table(&self) -> Vec<u32> {
        let k = self.layers as u32;
        (0..1u32 << k)
            .map(|i| mod_pow(self.gamma, bitrev(i, k) as u64, self.q))
            .collect()
    }

    /// Per-layer group twiddles in ascending start order: `zetas[l - 1]` holds
    /// the zeta of each butterfly group of layer `l`, matching the schedule's
    /// countdown (group index starts at `2^K - 1` for layer 1, start 0).
    pub fn layer_group_zetas(&self) -> Vec<Vec<u32>> {
        let table = self.twiddle_table();
        let mut i = (1usize << self.layers) - 1;
        let mut out = Vec::with_capacity(self.layers);
        for layer in 1..=self.layers {
            let len = self.len_at_layer(layer);
            let groups = self.n / (2 * len);
            let mut layer_zetas = Vec::with_capacity(groups);
            for _ in 0..groups {
                layer_zetas.push(table[i]);
                i -= 1;
            }
            out.push(layer_zetas);
        }
        debug_assert_eq!(i, 0, "twiddle countdown must end at 0");
        out
    }

    fn check_poly(&self, f: &[u32]) -> Result<()> {
        if f.len() != self.n {
            return Err(Error::InvalidInput(format!(
                "polynomial has {} coefficients, instance needs {}",
                f.len(),
                self.n
            )));
        }
        if let Some(c) = f.iter().find(|&&c| c >= self.q) {
            return Err(Error::InvalidInput(format!(
                "coefficient {c} out of range [0, {})",
                self.q
            )));
        }
        Ok(())
    }
}

/// States of one cascade run: `levels[0]` is the input, `levels[k]` the state
/// after butterfly layer `k`. No final scaling is applied; see [`intt`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayeredTrace {
    pub levels: Vec<Vec<u32>>,
}

impl LayeredTrace {
    /// Value of coefficient slot `pos` at `level`.
    pub fn value(&self, level: usize, pos: usize) -> u32 {
        self.levels[level][pos]
    }
}

/// Run the inverse cascade, recording every intermediate level.
pub fn intt_layers(params: &FieldParams, input: &[u32]) -> Result<LayeredTrace> {
    params.check_poly(input)?;
    let q = params.q;
    let mut levels = Vec::with_capacity(params.layers + 1);
    let mut state = input.to_vec();
    levels.push(state.clone());
    let zetas = params.layer_group_zetas();
    for layer in 1..=params.layers {
        let len = params.len_at_layer(layer);
        for (group, &zeta) in zetas[layer - 1].iter().enumerate() {
            let start = group * 2 * len;
            for j in start..start + len {
                let u = state[j];
                let v = state[j + len];
                let (uo, vo) = gs_butterfly(u, v, zeta, q);
                state[j] = uo;
                state[j + len] = vo;
            }
        }
        levels.push(state.clone());
    }
    Ok(LayeredTrace { levels })
}

/// Inverse transform: the cascade's final level scaled by `2^-K mod q`
/// (for ML-KEM this is the FIPS 203 trailing multiply by `3303`).
pub fn intt(params: &FieldParams, input: &[u32]) -> Result<Vec<u32>> {
    let trace = intt_layers(params, input)?;
    let scale = mod_inv(mod_pow(2, params.layers as u64, params.q), params.q)?;
    Ok(trace.levels[params.layers]
        .iter()
        .map(|&c| mod_mul(c, scale, params.q))
        .collect())
}

/// Forward transform, the exact inverse of [`intt`].
///
/// For [`TwiddleMode::Exact`] instances this is the Cooley–Tukey cascade with
/// the same twiddle schedule walked in reverse (FIPS 203 Algorithm 9 for the
/// ML-KEM instance). For [`TwiddleMode::Surrogate`] instances it undoes the
/// `2^-K` scaling and inverts each butterfly algebraically.
pub fn ntt_forward(params: &FieldParams, input: &[u32]) -> Result<Vec<u32>> {
    params.check_poly(input)?;
    let q = params.q;
    let zetas = params.layer_group_zetas();
    let mut state = input.to_vec();
    match params.twiddle_mode {
        TwiddleMode::Exact => {
            // CT cascade: layers walked from widest span to narrowest. The
            // schedule counts group indices up while the inverse counts them
            // down, so within a layer the forward group at `start` uses the
            // zeta the inverse schedule assigned to the mirrored group; that
            // mirroring is what makes each inverse-layer zeta the negated
            // reciprocal of the forward zeta for the same butterfly group.
            for layer in (1..=params.layers).rev() {
                let len = params.len_at_layer(layer);
                for (group, &zeta) in zetas[layer - 1].iter().rev().enumerate() {
                    let start = group * 2 * len;
                    for j in start..start + len {
                        let t = mod_mul(zeta, state[j + len], q);
                        state[j + len] = mod_sub(state[j], t, q);
                        state[j] = mod_add(state[j], t, q);
                    }
                }
            }
        }
        TwiddleMode::Surrogate => {
            let scale = mod_pow(2, params.layers as u64, q);
            for c in state.iter_mut() {
                *c = mod_mul(*c, scale, q);
            }
            for layer in (1..=params.layers).rev() {
                let len = params.len_at_layer(layer);
                for (group, &zeta) in zetas[layer - 1].iter().enumerate() {
                    let start = group * 2 * len;
                    for j in start..start + len {
                        let (u, v) = gs_butterfly_inv(state[j], state[j + len], zeta, q)?;
                        state[j] = u;
                        state[j + len] = v;
                    }
                }
            }
        }
    }
    Ok(state)
}

/// Draw a uniform polynomial over `Z_q^n`.
pub fn random_poly<R: rand::Rng + ?Sized>(params: &FieldParams, rng: &mut R) -> Vec<u32> {
    (0..params.n).map(|_| rng.gen_range(0..params.q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mod_pow_known_values() {
        // gamma = 17 is a primitive 256th root mod 3329: 17^128 = -1.
        assert_eq!(mod_pow(17, 128, 3329), 3328);
        // First nontrivial entry of the standard zeta table.
        assert_eq!(mod_pow(17, 64, 3329), 1729);
        assert_eq!(mod_pow(2, 10, 1_000_003), 1024);
        assert_eq!(mod_pow(0, 0, 17), 1);
    }

    #[test]
    fn mod_inv_roundtrips() {
        for a in 1..17 {
            assert_eq!(mod_mul(a, mod_inv(a, 17).unwrap(), 17), 1);
        }
        assert_eq!(mod_mul(3303, 128, 3329), 1, "FIPS 203 scaling constant");
        assert!(mod_inv(0, 17).is_err());
    }

    #[test]
    fn bitrev_known_and_involutive() {
        assert_eq!(bitrev(1, 7), 64);
        assert_eq!(bitrev(0b1100101, 7), 0b1010011);
        for k in 0..128 {
            assert_eq!(bitrev(bitrev(k, 7), 7), k);
        }
    }

    #[test]
    fn butterfly_hand_example() {
        // q = 17, zeta = 2: (3, 5) -> (8, 2 * 2) = (8, 4).
        assert_eq!(gs_butterfly(3, 5, 2, 17), (8, 4));
        assert_eq!(gs_butterfly_inv(8, 4, 2, 17).unwrap(), (3, 5));
    }

    #[test]
    fn butterfly_bijective_exhaustive_q17() {
        let q = 17;
        for zeta in 1..q {
            let mut seen = vec![false; (q * q) as usize];
            for u in 0..q {
                for v in 0..q {
                    let (uo, vo) = gs_butterfly(u, v, zeta, q);
                    let idx = (uo * q + vo) as usize;
                    assert!(!seen[idx], "collision at zeta={zeta}");
                    seen[idx] = true;
                    assert_eq!(gs_butterfly_inv(uo, vo, zeta, q).unwrap(), (u, v));
                }
            }
        }
    }

    #[test]
    fn ml_kem_params_and_twiddles() {
        let p = FieldParams::ml_kem();
        assert_eq!(p.twiddle_mode, TwiddleMode::Exact);
        assert_eq!(p.len_at_layer(1), 2);
        assert_eq!(p.len_at_layer(7), 128);
        assert_eq!(p.variable_count(), 2048);
        assert_eq!(p.factor_count(), 896);
        let table = p.twiddle_table();
        assert_eq!(table[1], 1729); // 17^BitRev_7(1) = 17^64
        assert!(table[1..].iter().all(|&z| z != 0));
        let by_layer = p.layer_group_zetas();
        assert_eq!(by_layer.len(), 7);
        assert_eq!(by_layer[0].len(), 64); // layer 1: 64 groups of 2 butterflies
        assert_eq!(by_layer[6].len(), 1); // layer 7: one group of 128
        // Layer 1's first group is group index 127, layer 7's is index 1.
        assert_eq!(by_layer[0][0], table[127]);
        assert_eq!(by_layer[6][0], table[1]);
    }

    #[test]
    fn toy_exact_generator_search() {
        let p = FieldParams::toy(17, 4, 2).unwrap();
        assert_eq!(p.twiddle_mode, TwiddleMode::Exact);
        assert_eq!(mod_pow(p.gamma, 4, 17), 16);
        assert_eq!(p.gamma, 2, "smallest element with gamma^4 = -1 mod 17");
        assert_eq!(p.len_at_layer(1), 1);
        assert_eq!(p.len_at_layer(2), 2);

        let tiny = FieldParams::toy(17, 2, 1).unwrap();
        assert_eq!(tiny.twiddle_mode, TwiddleMode::Exact);
        assert_eq!(mod_pow(tiny.gamma, 2, 17), 16);
    }

    #[test]
    fn toy_surrogate_generator_for_q97() {
        // q - 1 = 96 = 2^5 * 3: no element of order 2^9, so K = 8 needs the
        // surrogate schedule built from an element of order 32.
        let p = FieldParams::toy(97, 256, 8).unwrap();
        assert_eq!(p.twiddle_mode, TwiddleMode::Surrogate);
        assert_eq!(mod_pow(p.gamma, 16, 97), 96);
        assert_eq!(mod_pow(p.gamma, 32, 97), 1);
        assert_eq!(p.variable_count(), 2304);
        assert_eq!(p.factor_count(), 1024);
        assert!(p.twiddle_table()[1..].iter().all(|&z| z != 0));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(FieldParams::new(3330, 256, 7, 17).is_err(), "even q");
        assert!(FieldParams::new(3331, 256, 7, 17).is_err(), "composite q");
        assert!(FieldParams::new(3329, 255, 7, 17).is_err(), "n not a power of two");
        assert!(FieldParams::new(3329, 256, 0, 17).is_err(), "zero layers");
        assert!(FieldParams::new(3329, 256, 9, 17).is_err(), "layers > log2 n");
        assert!(FieldParams::new(3329, 256, 6, 17).is_err(), "17^64 != -1");
        assert!(FieldParams::new(3329, 256, 7, 0).is_err(), "gamma = 0");
    }

    #[test]
    fn trace_shape_and_input_validation() {
        let p = FieldParams::ml_kem();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_poly(&p, &mut rng);
        let trace = intt_layers(&p, &f).unwrap();
        assert_eq!(trace.levels.len(), 8);
        assert_eq!(trace.levels[0], f);
        assert!(trace.levels.iter().all(|l| l.len() == 256));

        assert!(intt_layers(&p, &f[..255]).is_err());
        let mut bad = f;
        bad[0] = 3329;
        assert!(intt_layers(&p, &bad).is_err());
    }

    #[test]
    fn roundtrip_ml_kem() {
        let p = FieldParams::ml_kem();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let f = random_poly(&p, &mut rng);
            assert_eq!(ntt_forward(&p, &intt(&p, &f).unwrap()).unwrap(), f);
            // And the other composition order.
            assert_eq!(intt(&p, &ntt_forward(&p, &f).unwrap()).unwrap(), f);
        }
    }

    #[test]
    fn roundtrip_toys() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for p in [
            FieldParams::toy(17, 4, 2).unwrap(),
            FieldParams::toy(17, 2, 1).unwrap(),
            FieldParams::toy(97, 256, 8).unwrap(),
            FieldParams::toy(3329, 8, 2).unwrap(),
            FieldParams::toy(3329, 16, 3).unwrap(),
        ] {
            for _ in 0..10 {
                let f = random_poly(&p, &mut rng);
                assert_eq!(
                    ntt_forward(&p, &intt(&p, &f).unwrap()).unwrap(),
                    f,
                    "roundtrip failed for q={} n={} K={}",
                    p.q,
                    p.n,
                    p.layers
                );
            }
        }
    }

    #[test]
    fn forward_matches_dft_evaluation_q17() {
        // For the exact q = 17, n = 4, K = 2 instance the forward cascade is a
        // negacyclic DFT: output k evaluates f at gamma^(2 * BitRev_2(k) + 1).
        let p = FieldParams::toy(17, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let f = random_poly(&p, &mut rng);
            let fwd = ntt_forward(&p, &f).unwrap();
            for k in 0..4u32 {
                let root = mod_pow(p.gamma, (2 * bitrev(k, 2) + 1) as u64, p.q);
                let mut acc = 0u32;
                let mut pw = 1u32;
                for &c in &f {
                    acc = mod_add(acc, mod_mul(c, pw, p.q), p.q);
                    pw = mod_mul(pw, root, p.q);
                }
                assert_eq!(fwd[k as usize], acc, "evaluation mismatch at k={k}");
            }
        }
    }

    #[test]
    fn layered_trace_satisfies_butterflies() {
        // Spot-check the trace against per-layer butterfly recomputation.
        let p = FieldParams::toy(97, 256, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let f = random_poly(&p, &mut rng);
        let trace = intt_layers(&p, &f).unwrap();
        let zetas = p.layer_group_zetas();
        for layer in 1..=p.layers {
            let len = p.len_at_layer(layer);
            for (group, &zeta) in zetas[layer - 1].iter().enumerate() {
                let start = group * 2 * len;
                for j in start..start + len {
                    let (uo, vo) = gs_butterfly(
                        trace.value(layer - 1, j),
                        trace.value(layer - 1, j + len),
                        zeta,
                        p.q,
                    );
                    assert_eq!(trace.value(layer, j), uo);
                    assert_eq!(trace.value(layer, j + len), vo);
                }
            }
        }
    }
}
