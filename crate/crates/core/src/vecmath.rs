//! Small dense-vector helpers used throughout the crate.
//!
//! Commodity bundles, prices, and excess vectors are plain `[f64]` slices of
//! length `ell`; nothing here allocates unless it returns a new vector.

/// Dot product. Panics in debug builds on length mismatch.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l1_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

pub fn linf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn add_scaled(acc: &mut [f64], a: &[f64], s: f64) {
    debug_assert_eq!(acc.len(), a.len());
    for (t, x) in acc.iter_mut().zip(a) {
        *t += x * s;
    }
}

/// Compensated (Kahan) summation; keeps harmonic-style sums accurate to a
/// few ulps even for millions of terms.
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

pub fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = KahanSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Harmonic number H_n = sum_{s=1..n} 1/s by compensated summation.
pub fn harmonic(n: usize) -> f64 {
    kahan_sum((1..=n).map(|s| 1.0 / s as f64))
}

/// Lexicographic comparison of two bundles (used for deterministic
/// tie-breaking among utility maximizers).
pub fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_beats_naive_on_harmonic() {
        // Exact identity: (1/S_n) * sum(1/s) == 1.
        let n = 100_000;
        let s = harmonic(n);
        let ratio = kahan_sum((1..=n).map(|k| 1.0 / (s * k as f64)));
        assert!((ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lex_order() {
        assert!(lex_less(&[0.0, 2.0], &[1.0, 0.0]));
        assert!(!lex_less(&[1.0, 0.0], &[1.0, 0.0]));
        assert!(lex_less(&[1.0, 0.0], &[1.0, 0.5]));
    }
}
