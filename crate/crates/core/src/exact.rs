//! Exact floating-point accumulation.
//!
//! Admittance entries are accumulated as non-overlapping expansions
//! (Shewchuk's partials) and rounded once at the end. The rounded value is
//! the correctly rounded exact sum, so it does not depend on the order in
//! which stamps were added or on how they were grouped into regional
//! partials before merging.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Exact sum of a multiset of `f64` values.
///
/// Partials are kept in increasing order of magnitude and never overlap.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let mut x = value;
        let mut kept = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
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

    /// Adds every partial of `other`; exact, so grouping is irrelevant.
    pub fn absorb(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    /// Correctly rounded value of the exact sum.
    pub fn value(&self) -> f64 {
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
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round-half-even correction when the remainder sits exactly on a tie.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }

    pub fn partials(&self) -> &[f64] {
        &self.partials
    }

    /// Rebuilds an accumulator from serialized partials. The input is
    /// re-accumulated, so arbitrary (even overlapping) lists are accepted.
    pub fn from_terms(terms: &[f64]) -> Self {
        let mut s = Self::new();
        for &t in terms {
            s.add(t);
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactComplex {
    pub re: ExactSum,
    pub im: ExactSum,
}

impl ExactComplex {
    pub fn add(&mut self, z: Complex64) {
        self.re.add(z.re);
        self.im.add(z.im);
    }

    pub fn absorb(&mut self, other: &ExactComplex) {
        self.re.absorb(&other.re);
        self.im.absorb(&other.im);
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re.value(), self.im.value())
    }
}
