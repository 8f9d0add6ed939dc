//! Small numeric helpers shared across modules.

use std::sync::OnceLock;

/// Stable softplus: `max(x, 0) + ln(1 + exp(-|x|))`.
///
/// Equals `ln(1 + e^x)` but never overflows for large `x` and keeps full
/// precision for very negative `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`: `y + ln(1 - e^{-y})`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y + (-(-y).exp()).ln_1p()
}

/// ln(softplus(x)), accurate far into the left tail where softplus underflows.
#[inline]
pub fn ln_softplus(x: f64) -> f64 {
    if x < -30.0 {
        // softplus(x) = e^x (1 + O(e^x)); the correction is below f64 precision.
        x
    } else {
        softplus(x).ln()
    }
}

/// Logistic function, the derivative of softplus.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(mean(exp(v))) without overflow.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m; // all -inf (or a NaN/inf poisoned the set)
    }
    let sum: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + (sum / values.len() as f64).ln()
}

/// ln(k!) via a cached cumulative table, extended by Stirling's series for
/// counts beyond the table (unrealistically large for spike data).
pub fn ln_factorial(k: u64) -> f64 {
    const TABLE_SIZE: usize = 4097;
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = vec![0.0; TABLE_SIZE];
        for i in 2..TABLE_SIZE {
            t[i] = t[i - 1] + (i as f64).ln();
        }
        t
    });
    if (k as usize) < TABLE_SIZE {
        table[k as usize]
    } else {
        // Stirling with 1/(12n) and 1/(360n^3) corrections.
        let n = k as f64;
        n * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI * n).ln() + 1.0 / (12.0 * n)
            - 1.0 / (360.0 * n * n * n)
    }
}

/// Deterministic per-task seed derivation (splitmix64 over `seed ^ f(stream)`).
///
/// Every parallel unit of work (condition, fold, grid cell, sample batch)
/// derives its own RNG as `rng_for_task(base_seed, stream)` so results do not
/// depend on scheduling order.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha RNG for a derived task seed. See [`derive_seed`].
pub fn rng_for_task(base: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}
