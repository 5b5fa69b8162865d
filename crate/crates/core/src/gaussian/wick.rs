//! Wick even moments of a mean-zero Gaussian vector.

use crate::float::Float;

/// E[x_{i₁}···x_{i₂ₘ}] for a mean-zero Gaussian with covariance `cov`,
/// summed over all (2m−1)!! perfect pairings. Odd index counts return 0.
///
/// `cov(a, b)` looks up the covariance of components `indices[a]` and
/// `indices[b]`.
pub fn wick_even_moment<F: Float>(cov: &dyn Fn(usize, usize) -> F, indices: &[usize]) -> F {
    if indices.len() % 2 == 1 {
        return F::zero();
    }
    let mut active: Vec<usize> = indices.to_vec();
    pairings(cov, &mut active)
}

fn pairings<F: Float>(cov: &dyn Fn(usize, usize) -> F, active: &mut Vec<usize>) -> F {
    if active.is_empty() {
        return F::one();
    }
    let first = active[0];
    let mut total = F::zero();
    for j in 1..active.len() {
        let partner = active[j];
        let mut rest: Vec<usize> = Vec::with_capacity(active.len() - 2);
        rest.extend(active[1..j].iter().copied());
        rest.extend(active[j + 1..].iter().copied());
        total += cov(first, partner) * pairings(cov, &mut rest);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_is_covariance() {
        let cov = |a: usize, b: usize| ((a + 1) * (b + 1)) as f64;
        let m: f64 = wick_even_moment(&|a, b| cov(a, b), &[0, 1]);
        assert_eq!(m, 2.0);
    }

    #[test]
    fn four_point_has_three_pairings() {
        // Distinct symbolic covariances: cov(a,b) = prime(a)·prime(b) keeps
        // products distinguishable; expected A12A34 + A13A24 + A14A23.
        let p = [2.0, 3.0, 5.0, 7.0];
        let cov = move |a: usize, b: usize| p[a] * p[b];
        let m: f64 = wick_even_moment(&cov, &[0, 1, 2, 3]);
        let expected = (2.0 * 3.0) * (5.0 * 7.0) + (2.0 * 5.0) * (3.0 * 7.0) + (2.0 * 7.0) * (3.0 * 5.0);
        assert_eq!(m, expected);
    }

    #[test]
    fn odd_counts_vanish() {
        let cov = |_: usize, _: usize| 1.0f64;
        assert_eq!(wick_even_moment(&cov, &[0]), 0.0);
        assert_eq!(wick_even_moment(&cov, &[0, 1, 2]), 0.0);
    }

    #[test]
    fn six_point_counts_fifteen_pairings() {
        let cov = |_: usize, _: usize| 1.0f64;
        let m: f64 = wick_even_moment(&cov, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(m, 15.0);
    }
}
