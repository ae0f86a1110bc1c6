//! Exactly rounded f64 summation (Shewchuk-style expansion).
//!
//! Per-sequence loss terms are added into an expansion that represents their
//! real-valued sum exactly; `value()` rounds once at the end. Because the
//! representation is exact, the rounded mean is invariant to the order of the
//! terms, and duplicating a batch reproduces the mean loss bit-for-bit.

/// Error-free transformation: returns `(s, e)` with `s = fl(a + b)` and
/// `a + b = s + e` exactly (Knuth two-sum).
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    // Non-overlapping components in increasing magnitude order.
    parts: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> ExactSum {
        ExactSum::default()
    }

    pub fn add(&mut self, x: f64) {
        let mut q = x;
        let mut kept = 0;
        for i in 0..self.parts.len() {
            let (s, e) = two_sum(q, self.parts[i]);
            q = s;
            if e != 0.0 {
                self.parts[kept] = e;
                kept += 1;
            }
        }
        self.parts.truncate(kept);
        if q != 0.0 {
            self.parts.push(q);
        }
    }

    /// Correctly rounded value of the accumulated sum.
    pub fn value(&self) -> f64 {
        // Summing the non-overlapping parts from smallest to largest leaves
        // only the final rounding step.
        self.parts.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn sums_small_integers_exactly() {
        let mut s = ExactSum::new();
        for i in 0..1000 {
            s.add(i as f64);
        }
        assert_eq!(s.value(), 499_500.0);
    }

    #[test]
    fn recovers_cancellation() {
        let mut s = ExactSum::new();
        s.add(1e16);
        s.add(1.0);
        s.add(-1e16);
        assert_eq!(s.value(), 1.0);
    }

    #[test]
    fn order_invariant_and_duplication_doubles() {
        let mut rng = SplitMix64::new(77);
        let terms: Vec<f64> = (0..500)
            .map(|_| (rng.next_f64() - 0.5) * 1e6)
            .collect();

        let forward = {
            let mut s = ExactSum::new();
            terms.iter().for_each(|&t| s.add(t));
            s.value()
        };
        let backward = {
            let mut s = ExactSum::new();
            terms.iter().rev().for_each(|&t| s.add(t));
            s.value()
        };
        assert_eq!(forward.to_bits(), backward.to_bits());

        let doubled = {
            let mut s = ExactSum::new();
            terms.iter().chain(terms.iter()).for_each(|&t| s.add(t));
            s.value()
        };
        assert_eq!(doubled.to_bits(), (2.0 * forward).to_bits());
    }
}
