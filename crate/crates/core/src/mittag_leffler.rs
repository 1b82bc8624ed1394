//! The Mittag-Leffler function `E_{1/2}`, which appears in every Gronwall
//! bound with a square-root singular kernel.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const REL_TOL: f64 = 1e-15;
const MAX_TERMS: usize = 20_000;

/// `E_{1/2}(z) = Σ_k z^k / Γ(k/2 + 1)`.
///
/// The even and odd subsequences each obey a one-step recurrence,
/// `t_{k+2} = t_k · z² / (k/2 + 1)`, so no Gamma evaluations are needed.
/// Summation stops once a term falls below `1e-15` of the partial sum.
/// Returns [`Error::Overflow`] when the sum is not representable.
pub fn mittag_leffler_half(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Overflow(z));
    }
    if z == 0.0 {
        return Ok(1.0);
    }
    let z2 = z * z;
    let mut even = 1.0; // z^0 / Γ(1)
    let mut odd = 2.0 * z / PI.sqrt(); // z / Γ(3/2)
    let mut sum = even + odd;
    let mut k = 0usize;
    while k < MAX_TERMS {
        even *= z2 / (k as f64 / 2.0 + 1.0);
        odd *= z2 / ((k + 1) as f64 / 2.0 + 1.0);
        let step = even + odd;
        sum += step;
        if !sum.is_finite() {
            return Err(Error::Overflow(z));
        }
        k += 2;
        // Terms first grow (up to k ≈ 2z²) before decaying.
        let peaked = (k as f64) / 2.0 > z2;
        if peaked && even.abs() + odd.abs() < REL_TOL * sum.abs() {
            return Ok(sum);
        }
    }
    Err(Error::Overflow(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::erf::erfc;

    // Independent oracle: E_{1/2}(z) = exp(z²)·erfc(−z).
    fn oracle(z: f64) -> f64 {
        (z * z).exp() * erfc(-z)
    }

    #[test]
    fn origin_is_one() {
        assert_eq!(mittag_leffler_half(0.0).unwrap(), 1.0);
    }

    #[test]
    fn reference_values() {
        // Frozen from the erfc identity.
        assert!((mittag_leffler_half(1.0).unwrap() - 5.008_980_080_762_283).abs() < 1e-9);
        assert!((mittag_leffler_half(2.0).unwrap() - 108.940_904_389_977_97).abs() < 1e-7);
        assert!((oracle(1.0) - 5.008_980_080_762_283).abs() < 1e-9);
    }

    #[test]
    fn agrees_with_erfc_identity_on_zero_to_ten() {
        for i in 0..=200 {
            let z = i as f64 * 0.05;
            let got = mittag_leffler_half(z).unwrap();
            let want = oracle(z);
            assert!(
                ((got - want) / want).abs() < 1e-10,
                "z = {z}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn overflow_is_reported() {
        assert!(matches!(mittag_leffler_half(40.0), Err(Error::Overflow(_))));
        assert!(mittag_leffler_half(f64::INFINITY).is_err());
    }

    proptest::proptest! {
        #[test]
        fn increasing_and_above_two_term_bound(a in 0.0f64..8.0, b in 0.0f64..8.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let e_lo = mittag_leffler_half(lo).unwrap();
            let e_hi = mittag_leffler_half(hi).unwrap();
            proptest::prop_assert!(e_lo <= e_hi);
            if hi > lo + 1e-9 {
                proptest::prop_assert!(e_lo < e_hi);
            }
            proptest::prop_assert!(e_lo >= 1.0 + 2.0 * lo / PI.sqrt());
        }
    }
}
