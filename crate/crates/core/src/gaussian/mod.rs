//! Gaussian expectations behind the kernel and NTK recursions: activation
//! pair integrals ⟨f g⟩_K over a 2×2 mean-zero Gaussian, self-attention
//! moments over the query–key dot product, and Wick even moments.

pub mod moments;
pub mod quadrature;
pub mod wick;

pub use moments::{attention_moments, qk_covariance, AttnKernel, AttnMoments};
pub use wick::wick_even_moment;

use crate::arch::Activation;
use crate::error::{Error, Result};
use crate::float::Float;
use quadrature::hermite_rule;

/// Default quadrature order per dimension.
pub const DEFAULT_QUAD_ORDER: usize = 64;

/// An activation function or its derivative, as used inside pair integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairFn {
    Value(Activation),
    Deriv(Activation),
}

impl PairFn {
    pub fn eval<F: Float>(self, x: F) -> F {
        match self {
            PairFn::Value(a) => a.eval(x),
            PairFn::Deriv(a) => a.deriv(x),
        }
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// E[f(w₁)·g(w₂)] for (w₁, w₂) mean-zero Gaussian with covariance
/// [[k11, k12], [k12, k22]], by tensor-product Gauss–Hermite quadrature.
///
/// Diagonal entries (k12 = k11 = k22) reduce exactly to a one-dimensional
/// rule; degenerate covariances (a zero variance or perfect correlation)
/// reduce likewise. ReLU pairs short-circuit to the arc-cosine closed forms:
/// the kink at zero drops Gauss–Hermite to algebraic convergence, too slow
/// for the tolerances downstream.
pub fn gauss_pair_expect<F: Float>(
    f: PairFn,
    g: PairFn,
    k11: F,
    k12: F,
    k22: F,
    order: usize,
) -> Result<F> {
    let (a11, a12, a22) = (k11.to_f64_lossy(), k12.to_f64_lossy(), k22.to_f64_lossy());
    if !(a11.is_finite() && a12.is_finite() && a22.is_finite()) {
        return Err(Error::InvalidCovariance("non-finite covariance entry".into()));
    }
    if a11 < 0.0 || a22 < 0.0 {
        return Err(Error::InvalidCovariance(format!("negative variance (k11={a11}, k22={a22})")));
    }
    // Cauchy–Schwarz with a little float slack.
    let bound = (a11 * a22).sqrt();
    if a12.abs() > bound * (1.0 + 1e-9) + 1e-300 {
        return Err(Error::InvalidCovariance(format!(
            "|k12|={} exceeds sqrt(k11*k22)={bound}",
            a12.abs()
        )));
    }
    if a11 > 0.0 && a22 > 0.0 {
        if let Some(v) = relu_pair_closed_form(f, g, a11, a12, a22) {
            return Ok(F::cast(v));
        }
    }
    let rule = hermite_rule(order);
    let norm_1d = 1.0 / std::f64::consts::PI.sqrt();

    // w1 identically zero: 1-D integral over w2.
    if a11 == 0.0 {
        let f0 = f.eval(F::zero()).to_f64_lossy();
        let s2 = a22.sqrt();
        let mut acc = 0.0;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            acc += w * g.eval(F::cast(SQRT_2 * s2 * x)).to_f64_lossy();
        }
        return Ok(F::cast(f0 * acc * norm_1d));
    }
    if a22 == 0.0 {
        let g0 = g.eval(F::zero()).to_f64_lossy();
        let s1 = a11.sqrt();
        let mut acc = 0.0;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            acc += w * f.eval(F::cast(SQRT_2 * s1 * x)).to_f64_lossy();
        }
        return Ok(F::cast(g0 * acc * norm_1d));
    }

    let s1 = a11.sqrt();
    let slope = a12 / s1;
    let resid = (a22 - slope * slope).max(0.0);
    let s2 = resid.sqrt();

    // Perfect correlation (includes the diagonal case): exact 1-D reduction
    // w2 = slope/s1 · w1.
    if s2 == 0.0 || s2 < 1e-12 * a22.sqrt() {
        let mut acc = 0.0;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let w1 = SQRT_2 * s1 * x;
            let w2 = slope / s1 * w1;
            acc += w * f.eval(F::cast(w1)).to_f64_lossy() * g.eval(F::cast(w2)).to_f64_lossy();
        }
        return Ok(F::cast(acc * norm_1d));
    }

    // General 2-D tensor product under the Cholesky substitution
    // w1 = s1·x, w2 = slope·x + s2·y.
    let norm_2d = 1.0 / std::f64::consts::PI;
    let mut acc = 0.0;
    for (&x, &wx) in rule.nodes.iter().zip(&rule.weights) {
        let w1 = SQRT_2 * s1 * x;
        let fx = f.eval(F::cast(w1)).to_f64_lossy();
        let base = SQRT_2 * slope * x;
        let mut inner = 0.0;
        for (&y, &wy) in rule.nodes.iter().zip(&rule.weights) {
            let w2 = base + SQRT_2 * s2 * y;
            inner += wy * g.eval(F::cast(w2)).to_f64_lossy();
        }
        acc += wx * fx * inner;
    }
    Ok(F::cast(acc * norm_2d))
}

/// Exact pair expectations when both functions are ReLU or its derivative,
/// for nondegenerate variances. With ρ = k12/√(k11·k22) and θ = arccos ρ:
///
/// - E[relu(w₁)relu(w₂)] = √(k11·k22)·(sin θ + (π−θ)·cos θ)/(2π)
/// - E[step(w₁)step(w₂)] = (π−θ)/(2π)
/// - E[relu(w₁)step(w₂)] = √k11·(1+ρ)/(2√(2π))
fn relu_pair_closed_form(f: PairFn, g: PairFn, k11: f64, k12: f64, k22: f64) -> Option<f64> {
    use Activation::Relu;
    let rho = (k12 / (k11 * k22).sqrt()).clamp(-1.0, 1.0);
    let theta = rho.acos();
    let pi = std::f64::consts::PI;
    match (f, g) {
        (PairFn::Value(Relu), PairFn::Value(Relu)) => {
            Some((k11 * k22).sqrt() * (theta.sin() + (pi - theta) * rho) / (2.0 * pi))
        }
        (PairFn::Deriv(Relu), PairFn::Deriv(Relu)) => Some((pi - theta) / (2.0 * pi)),
        (PairFn::Value(Relu), PairFn::Deriv(Relu)) => Some(k11.sqrt() * (1.0 + rho) / (2.0 * (2.0 * pi).sqrt())),
        (PairFn::Deriv(Relu), PairFn::Value(Relu)) => Some(k22.sqrt() * (1.0 + rho) / (2.0 * (2.0 * pi).sqrt())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::float::Float as _;
    use crate::rng::stream;

    fn id() -> PairFn {
        PairFn::Value(Activation::Identity)
    }

    fn relu() -> PairFn {
        PairFn::Value(Activation::Relu)
    }

    #[test]
    fn identity_reproduces_covariance() {
        for (k11, k12, k22) in [(1.0, 0.3, 2.0), (0.5, -0.6, 0.8), (3.0, 0.0, 0.25)] {
            let e: f64 = gauss_pair_expect(id(), id(), k11, k12, k22, 8).unwrap();
            assert!((e - k12).abs() < 1e-10, "{e} vs {k12}");
        }
    }

    #[test]
    fn relu_diagonal_is_half_variance() {
        let e: f64 = gauss_pair_expect(relu(), relu(), 1.7, 1.7, 1.7, 64).unwrap();
        assert!((e - 0.85).abs() < 1e-10);
    }

    #[test]
    fn relu_independent_matches_closed_form() {
        // E[relu(x)]² = (1/√(2π))² = 1/(2π) for unit variances, zero correlation.
        let e: f64 = gauss_pair_expect(relu(), relu(), 1.0, 0.0, 1.0, 64).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI);
        assert!((e - expected).abs() < 1e-10);
    }

    #[test]
    fn relu_pairs_match_monte_carlo() {
        // Independent Monte-Carlo oracle for the ReLU value and derivative
        // pair expectations at several correlations.
        let mut rng = stream(23, "test/relu-mc", 0);
        for rho in [-0.8f64, -0.2, 0.5, 0.95] {
            let (k11, k22) = (1.3f64, 0.7f64);
            let k12 = rho * (k11 * k22).sqrt();
            let vv: f64 = gauss_pair_expect(relu(), relu(), k11, k12, k22, 64).unwrap();
            let dd: f64 =
                gauss_pair_expect(PairFn::Deriv(Activation::Relu), PairFn::Deriv(Activation::Relu), k11, k12, k22, 64)
                    .unwrap();
            let n = 400_000;
            let s1 = k11.sqrt();
            let slope = k12 / s1;
            let s2 = (k22 - slope * slope).max(0.0).sqrt();
            let (mut sum_v, mut sumsq_v, mut sum_d, mut sumsq_d) = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..n {
                let x = f64::standard_normal(&mut rng);
                let y = f64::standard_normal(&mut rng);
                let w1 = s1 * x;
                let w2 = slope * x + s2 * y;
                let v = Activation::Relu.eval(w1) * Activation::Relu.eval(w2);
                let d = Activation::Relu.deriv(w1) * Activation::Relu.deriv(w2);
                sum_v += v;
                sumsq_v += v * v;
                sum_d += d;
                sumsq_d += d * d;
            }
            let nf = n as f64;
            let mean_v = sum_v / nf;
            let se_v = ((sumsq_v / nf - mean_v * mean_v) / (nf - 1.0)).sqrt();
            let mean_d = sum_d / nf;
            let se_d = ((sumsq_d / nf - mean_d * mean_d) / (nf - 1.0)).sqrt();
            assert!((vv - mean_v).abs() < 4.0 * se_v, "rho={rho}: value {vv} vs mc {mean_v} ± {se_v}");
            assert!((dd - mean_d).abs() < 4.0 * se_d, "rho={rho}: deriv {dd} vs mc {mean_d} ± {se_d}");
        }
    }

    #[test]
    fn gelu_matches_monte_carlo() {
        let (k11, k12, k22) = (1.2f64, 0.4f64, 0.9f64);
        let q: f64 =
            gauss_pair_expect(PairFn::Value(Activation::Gelu), PairFn::Value(Activation::Gelu), k11, k12, k22, 64)
                .unwrap();
        // Plain Monte-Carlo oracle.
        let mut rng = stream(11, "test/gelu-mc", 0);
        let n = 200_000;
        let s1 = k11.sqrt();
        let slope = k12 / s1;
        let s2 = (k22 - slope * slope).sqrt();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = f64::standard_normal(&mut rng);
            let y = f64::standard_normal(&mut rng);
            let w1 = s1 * x;
            let w2 = slope * x + s2 * y;
            let v = Activation::Gelu.eval(w1) * Activation::Gelu.eval(w2);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / (n as f64 - 1.0)).sqrt();
        assert!((q - mean).abs() < 4.0 * se, "quad {q} vs mc {mean} ± {se}");
    }

    #[test]
    fn derivative_tags_work() {
        // E[σ'(w)²] for relu with unit variance is P(w>0) = 1/2.
        let e: f64 = gauss_pair_expect(PairFn::Deriv(Activation::Relu), PairFn::Deriv(Activation::Relu), 1.0, 1.0, 1.0, 64)
            .unwrap();
        assert!((e - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_covariance() {
        assert!(gauss_pair_expect::<f64>(id(), id(), -1.0, 0.0, 1.0, 8).is_err());
        assert!(gauss_pair_expect::<f64>(id(), id(), 1.0, 2.0, 1.0, 8).is_err());
    }

    #[test]
    fn zero_variance_reduces_to_point_mass() {
        let e: f64 = gauss_pair_expect(relu(), id(), 0.0, 0.0, 1.0, 16).unwrap();
        assert_eq!(e, 0.0);
    }
}
