//! Order-independent summation.
//!
//! Every addend is truncated onto a fixed binary grid of `2^(e − 96)` and
//! accumulated in `i128`. Integer addition is associative, so a sum comes
//! out bit-identical no matter how its terms are split across ranks or in
//! which order partial sums are combined. `e` is chosen from a global bound
//! on the addends, which every rank must agree on.

use crate::linalg::Mat;
use crate::scalar::Real;

/// Bits kept below the scaled unit.
pub const FRACTION_BITS: i32 = 96;

/// Upper limit on the number of addends that cannot overflow an `i128`
/// when every scaled addend is at most 1/2 in magnitude.
pub const MAX_TERMS: u64 = 1 << 31;

/// Exact power of two for any exponent in the normal range.
fn pow2(k: i32) -> f64 {
    if k > 1023 {
        pow2(1023) * pow2(k - 1023)
    } else if k < -1022 {
        pow2(-1022) * pow2(k + 1022)
    } else {
        f64::from_bits(((1023 + k) as u64) << 52)
    }
}

/// Fixed-point grid shared by all contributors to a sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedScale {
    exponent: i32,
    down: f64,
}

impl FixedScale {
    /// Grid for addends bounded by `bound` in magnitude.
    pub fn for_bound(bound: f64) -> Self {
        let exponent = if bound > 0.0 && bound.is_finite() {
            // smallest e with 2·bound ≤ 2^e, so scaled addends stay within ±1/2
            let mut e = (2.0 * bound).log2().ceil() as i32;
            while pow2(e) < 2.0 * bound {
                e += 1;
            }
            while e > -1000 && pow2(e - 1) >= 2.0 * bound {
                e -= 1;
            }
            e
        } else {
            0
        };
        FixedScale {
            exponent,
            down: pow2(-exponent),
        }
    }

    /// Grid for Gram-type sums of products of entries bounded by `max_abs`.
    pub fn for_products(max_abs: f64) -> Self {
        Self::for_bound(max_abs * max_abs)
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    /// `trunc(x · 2^(96 − e))` computed exactly with two `i64` conversions.
    #[inline]
    pub fn to_fixed(&self, x: f64) -> i128 {
        let z = x * self.down * 17_179_869_184.0; // 2^34
        let hi = z.trunc();
        let lo = ((z - hi) * 4_611_686_018_427_387_904.0) as i64; // 2^62
        ((hi as i64 as i128) << 62) + lo as i128
    }

    pub fn to_float(&self, v: i128) -> f64 {
        (v as f64) * pow2(self.exponent - FRACTION_BITS)
    }
}

/// `Qᵀ Q` accumulated on the fixed grid; entries in column-major order.
pub fn gram_fixed<T: Real>(q: &Mat<T>, scale: &FixedScale) -> Vec<i128> {
    const CHUNK: usize = 256;
    let n = q.ncols();
    let mut g = vec![0i128; n * n];
    let mut start = 0;
    while start < q.nrows() {
        let end = (start + CHUNK).min(q.nrows());
        for j in 0..n {
            let cj = &q.col(j)[start..end];
            for i in 0..=j {
                let ci = &q.col(i)[start..end];
                let mut acc = 0i128;
                for (&a, &b) in ci.iter().zip(cj) {
                    acc += scale.to_fixed((a * b).to_f64());
                }
                g[j * n + i] += acc;
            }
        }
        start = end;
    }
    for j in 0..n {
        for i in 0..j {
            g[i * n + j] = g[j * n + i];
        }
    }
    g
}

/// Converts a fixed-grid matrix back to floating point.
pub fn fixed_to_mat<T: Real>(values: &[i128], n: usize, scale: &FixedScale) -> Mat<T> {
    Mat::from_fn(n, n, |i, j| T::of(scale.to_float(values[j * n + i])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scale_keeps_addends_within_half() {
        for bound in [1e-300, 1e-5, 0.3, 1.0, 3.0, 1e9, 1e300] {
            let s = FixedScale::for_bound(bound);
            let scaled = bound * pow2(-s.exponent());
            assert!(scaled <= 0.5 && scaled > 0.25, "{bound}: {scaled}");
        }
    }

    #[test]
    fn exactly_representable_values_round_trip() {
        let s = FixedScale::for_bound(4.0);
        for x in [0.0, 1.0, -1.0, 0.375, -3.999755859375, 1e-20] {
            let back = s.to_float(s.to_fixed(x));
            assert!((back - x).abs() <= pow2(s.exponent() - FRACTION_BITS), "{x}");
        }
    }

    proptest! {
        #[test]
        fn sum_is_independent_of_split(values in prop::collection::vec(-1.0f64..1.0, 1..200), cut in 0usize..200) {
            let s = FixedScale::for_bound(1.0);
            let whole: i128 = values.iter().map(|&v| s.to_fixed(v)).sum();
            let cut = cut.min(values.len());
            let (a, b) = values.split_at(cut);
            let left: i128 = a.iter().rev().map(|&v| s.to_fixed(v)).sum();
            let right: i128 = b.iter().map(|&v| s.to_fixed(v)).sum();
            prop_assert_eq!(whole, right + left);
            let naive: f64 = values.iter().sum();
            prop_assert!((s.to_float(whole) - naive).abs() < 1e-12);
        }
    }
}
