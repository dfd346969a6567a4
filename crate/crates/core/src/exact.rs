//! Exact floating-point summation.
//!
//! [`ExactSum`] keeps the running sum as a list of non-overlapping partials
//! (Shewchuk's expansion), so the represented value is the exact real sum of
//! every finite input and [`ExactSum::value`] is its correctly rounded `f64`.
//! Results are independent of input order.

use alloc::vec::Vec;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExactSum {
    /// Non-overlapping, increasing magnitude; their real sum is the total.
    partials: Vec<f64>,
    /// Plain sum of non-finite inputs and overflowed intermediates.
    special: Option<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        if !x.is_finite() {
            self.special = Some(self.special.unwrap_or(0.0) + x);
            return;
        }
        let mut x = x;
        let mut kept = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                core::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            if !hi.is_finite() {
                self.special = Some(self.special.unwrap_or(0.0) + hi);
                return;
            }
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    /// Adds the exact value held by `other`, optionally negated.
    pub fn add_exact(&mut self, other: &ExactSum, negate: bool) {
        for &p in &other.partials {
            self.add(if negate { -p } else { p });
        }
        if let Some(s) = other.special {
            self.add(if negate { -s } else { s });
        }
    }

    /// Adds `|other|` exactly.
    pub fn add_abs(&mut self, other: &ExactSum) {
        let negative = match other.special {
            Some(s) => s < 0.0,
            None => other.partials.iter().rev().find(|&&p| p != 0.0).is_some_and(|&p| p < 0.0),
        };
        self.add_exact(other, negative);
    }

    /// Correctly rounded (ties to even) value of the exact sum.
    pub fn value(&self) -> f64 {
        if let Some(s) = self.special {
            return s;
        }
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // the remaining partials break a tie in `hi + lo` away from even
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

/// Correctly rounded sum of `values`.
pub fn fsum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = ExactSum::new();
    s.extend(values);
    s.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cancellation_is_exact() {
        assert_eq!(fsum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(fsum([0.1; 10]), 1.0);
        assert_eq!(fsum([1.0, 1e-16, 1e-16]), 1.0000000000000002);
    }

    #[test]
    fn ties_round_to_even() {
        // 1 + 2^-53 is a tie; the extra 2^-80 pushes it up
        let tiny = 2f64.powi(-80);
        assert_eq!(fsum([1.0, 2f64.powi(-53)]), 1.0);
        assert_eq!(fsum([1.0, 2f64.powi(-53), tiny]), 1.0 + f64::EPSILON);
    }

    #[test]
    fn order_does_not_matter() {
        let v = [3.3, -1e-7, 2e20, 0.7, -2e20, 1e-30];
        let mut r = v;
        r.reverse();
        assert_eq!(fsum(v), fsum(r));
    }

    #[test]
    fn absolute_value_of_expansion() {
        let mut d = ExactSum::new();
        d.extend([0.1, -0.3]);
        let mut t = ExactSum::new();
        t.add_abs(&d);
        assert_eq!(t.value(), -d.value());
    }

    #[test]
    fn non_finite_propagates() {
        assert!(fsum([1.0, f64::NAN]).is_nan());
        assert_eq!(fsum([1.0, f64::INFINITY]), f64::INFINITY);
        assert_eq!(fsum([f64::MAX, f64::MAX]), f64::INFINITY);
    }
}
