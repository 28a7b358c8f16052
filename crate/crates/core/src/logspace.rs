//! Log-space arithmetic with explicit sign tracking.
//!
//! Estimates of normalising constants routinely overflow `f64` in linear space
//! (an Ising partition function has log of order `N^2`), and the series
//! estimators produce terms of either sign. Magnitudes are therefore carried
//! as natural logs together with a separate sign.

use serde::{Deserialize, Serialize};

/// A possibly negative quantity stored as `sign * exp(log_magnitude)`.
///
/// `sign == 0` encodes an exactly zero value; `log_magnitude` is then `-inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedValue {
    pub log_magnitude: f64,
    pub sign: i8,
}

impl SignedValue {
    pub fn zero() -> Self {
        SignedValue { log_magnitude: f64::NEG_INFINITY, sign: 0 }
    }

    pub fn one() -> Self {
        SignedValue { log_magnitude: 0.0, sign: 1 }
    }

    /// A positive value given directly in log space.
    pub fn from_log(log_magnitude: f64) -> Self {
        SignedValue { log_magnitude, sign: 1 }
    }

    pub fn from_real(x: f64) -> Self {
        if x == 0.0 {
            Self::zero()
        } else {
            SignedValue { log_magnitude: x.abs().ln(), sign: if x > 0.0 { 1 } else { -1 } }
        }
    }

    /// Reconstructs the real value; overflows to +/-inf for large magnitudes.
    pub fn to_real(self) -> f64 {
        f64::from(self.sign) * self.log_magnitude.exp()
    }

    pub fn is_finite(self) -> bool {
        self.sign == 0 || self.log_magnitude.is_finite()
    }

    /// Products add log-magnitudes and multiply signs.
    pub fn mul(self, other: SignedValue) -> SignedValue {
        let sign = self.sign * other.sign;
        if sign == 0 {
            return Self::zero();
        }
        SignedValue { log_magnitude: self.log_magnitude + other.log_magnitude, sign }
    }

    /// Signed addition via log-sum-exp / log-diff-exp.
    pub fn add(self, other: SignedValue) -> SignedValue {
        if self.sign == 0 {
            return other;
        }
        if other.sign == 0 {
            return self;
        }
        if self.sign == other.sign {
            SignedValue {
                log_magnitude: log_add_exp(self.log_magnitude, other.log_magnitude),
                sign: self.sign,
            }
        } else {
            let (big, small) = if self.log_magnitude >= other.log_magnitude {
                (self, other)
            } else {
                (other, self)
            };
            if big.log_magnitude == small.log_magnitude {
                return Self::zero();
            }
            SignedValue {
                log_magnitude: log_sub_exp(big.log_magnitude, small.log_magnitude),
                sign: big.sign,
            }
        }
    }

    pub fn scale_log(self, log_factor: f64) -> SignedValue {
        if self.sign == 0 {
            return self;
        }
        SignedValue { log_magnitude: self.log_magnitude + log_factor, sign: self.sign }
    }

    pub fn powi(self, n: u32) -> SignedValue {
        if self.sign == 0 {
            return if n == 0 { Self::one() } else { Self::zero() };
        }
        let sign = if self.sign < 0 && n % 2 == 1 { -1 } else { 1 };
        SignedValue { log_magnitude: self.log_magnitude * f64::from(n), sign }
    }
}

/// log(exp(a) + exp(b)) without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log(exp(a) - exp(b)) for a > b.
pub fn log_sub_exp(a: f64, b: f64) -> f64 {
    debug_assert!(a >= b);
    if b == f64::NEG_INFINITY {
        return a;
    }
    a + ln_1m_exp(b - a)
}

/// log(1 - exp(x)) for x < 0, stable near both ends.
pub fn ln_1m_exp(x: f64) -> f64 {
    debug_assert!(x <= 0.0);
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// log of the mean of exp(values).
pub fn log_mean_exp(values: &[f64]) -> f64 {
    log_sum_exp(values) - (values.len() as f64).ln()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    let sum: f64 = values.iter().map(|v| (v - hi).exp()).sum();
    hi + sum.ln()
}

/// Kahan compensated running sum. The roulette estimators accumulate weighted
/// tails that alternate in sign, where naive summation loses low bits.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn signed_roundtrip() {
        for &x in &[1.5, -2.25, 0.0, 1e-8, -3e7] {
            assert_relative_eq!(SignedValue::from_real(x).to_real(), x, max_relative = 1e-14);
        }
    }

    #[test]
    fn zero_sign_is_flagged() {
        let z = SignedValue::from_real(0.0);
        assert_eq!(z.sign, 0);
        assert_relative_eq!(z.add(SignedValue::from_real(3.0)).to_real(), 3.0, max_relative = 1e-15);
        assert_eq!(z.mul(SignedValue::from_real(3.0)).sign, 0);
    }

    #[test]
    fn ln_1m_exp_matches_naive() {
        for &x in &[-1e-6, -0.1, -0.5, -1.0, -5.0, -40.0] {
            assert_relative_eq!(ln_1m_exp(x), (1.0 - x.exp()).ln(), max_relative = 1e-9);
        }
    }

    proptest! {
        // Composition rule: products and sums agree with direct arithmetic
        // at moderate magnitudes (|log| <= 30).
        #[test]
        fn products_match_direct(a in -1e4f64..1e4, b in -1e4f64..1e4) {
            let p = SignedValue::from_real(a).mul(SignedValue::from_real(b));
            prop_assert!((p.to_real() - a * b).abs() <= 1e-12 * (a * b).abs().max(1e-300));
        }

        #[test]
        fn sums_match_direct(a in -1e4f64..1e4, b in -1e4f64..1e4) {
            let s = SignedValue::from_real(a).add(SignedValue::from_real(b));
            let direct = a + b;
            // cancellation loses relative precision in log space; scale slack by the inputs
            let slack = 1e-10 * (a.abs() + b.abs()).max(1e-300);
            prop_assert!((s.to_real() - direct).abs() <= slack);
        }
    }

    #[test]
    fn kahan_beats_naive_on_alternating_tail() {
        let mut k = KahanSum::new();
        let terms: Vec<f64> = (0..100_000)
            .map(|i| if i % 2 == 0 { 1.0 + 1e-12 * i as f64 } else { -1.0 })
            .collect();
        for &t in &terms {
            k.add(t);
        }
        let exact: f64 = terms.iter().map(|&t| t as f64).fold(0.0, |a, b| a + b);
        assert_relative_eq!(k.value(), exact, max_relative = 1e-9);
    }
}
