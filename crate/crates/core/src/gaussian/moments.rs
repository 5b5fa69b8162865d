//! Monte-Carlo moments of the self-attention matrix.
//!
//! The query–key dot product W̃ is Gaussian at leading order, with covariance
//! A over joint indices (sample; token, token). Draws of W̃ go through the
//! (masked) softmax to give attention matrices Ω, whose second moments and
//! softmax-Jacobian second moments feed the MHSA kernel and NTK steps.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::arch::Masking;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::kernel::PairKernel;
use crate::rng::stream;

/// Covariance of the query–key dot product over (sample; t, t′) indices,
/// dimension |D|·T².
#[derive(Debug, Clone)]
pub struct AttnKernel<F> {
    samples: usize,
    tokens: usize,
    a: Array2<F>,
}

impl<F: Float> AttnKernel<F> {
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.samples * self.tokens * self.tokens
    }

    /// Flat index of (sample α, querier t, queried t′).
    pub fn idx(&self, sample: usize, t: usize, tp: usize) -> usize {
        (sample * self.tokens + t) * self.tokens + tp
    }

    pub fn get(&self, p: usize, q: usize) -> F {
        self.a[(p, q)]
    }

    pub fn matrix(&self) -> &Array2<F> {
        &self.a
    }
}

/// A = C_Q·C_K·F_{(α₁;t₁)(α₂;t₂)}·F_{(α₁;t′₁)(α₂;t′₂)}, one head's worth
/// (heads are independent and identically distributed).
pub fn qk_covariance<F: Float>(f: &PairKernel<F>, c_q: F, c_k: F) -> AttnKernel<F> {
    let samples = f.samples();
    let tokens = f.tokens();
    let dim = samples * tokens * tokens;
    let cc = c_q * c_k;
    let mut a = Array2::from_elem((dim, dim), F::zero());
    for p in 0..dim {
        let a1 = p / (tokens * tokens);
        let t1 = (p / tokens) % tokens;
        let tp1 = p % tokens;
        for q in p..dim {
            let a2 = q / (tokens * tokens);
            let t2 = (q / tokens) % tokens;
            let tp2 = q % tokens;
            let v = cc * f.at(a1, t1, a2, t2) * f.at(a1, tp1, a2, tp2);
            a[(p, q)] = v;
            a[(q, p)] = v;
        }
    }
    AttnKernel { samples, tokens, a }
}

/// Monte-Carlo estimates of E[Ω Ω] and E[∂Ω ∂Ω] with per-entry standard
/// errors.
///
/// `omega2` is indexed by flat (α; t, t′) on both sides; `domega2` by flat
/// (α; t, t′, t″) where the entry is ∂Ω_{tt′}/∂W̃_{tt″} (the softmax Jacobian
/// vanishes across rows, so only the shared querier index t is kept).
#[derive(Debug, Clone)]
pub struct AttnMoments<F> {
    samples: usize,
    tokens: usize,
    pub n_samples: usize,
    pub masking: Masking,
    omega2: Array2<F>,
    omega2_stderr: Array2<F>,
    domega2: Array2<F>,
    domega2_stderr: Array2<F>,
}

impl<F: Float> AttnMoments<F> {
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    fn om_idx(&self, sample: usize, t: usize, u: usize) -> usize {
        (sample * self.tokens + t) * self.tokens + u
    }

    fn d_idx(&self, sample: usize, t: usize, u: usize, c: usize) -> usize {
        ((sample * self.tokens + t) * self.tokens + u) * self.tokens + c
    }

    /// E[Ω_{α₁;t₁u}·Ω_{α₂;t₂v}].
    pub fn omega2(&self, a1: usize, t1: usize, u: usize, a2: usize, t2: usize, v: usize) -> F {
        self.omega2[(self.om_idx(a1, t1, u), self.om_idx(a2, t2, v))]
    }

    pub fn omega2_stderr(&self, a1: usize, t1: usize, u: usize, a2: usize, t2: usize, v: usize) -> F {
        self.omega2_stderr[(self.om_idx(a1, t1, u), self.om_idx(a2, t2, v))]
    }

    /// E[∂Ω_{α₁;t₁u₁}/∂W̃_{α₁;t₁c₁} · ∂Ω_{α₂;t₂u₂}/∂W̃_{α₂;t₂c₂}].
    #[allow(clippy::too_many_arguments)]
    pub fn domega2(&self, a1: usize, t1: usize, u1: usize, c1: usize, a2: usize, t2: usize, u2: usize, c2: usize) -> F {
        self.domega2[(self.d_idx(a1, t1, u1, c1), self.d_idx(a2, t2, u2, c2))]
    }

    #[allow(clippy::too_many_arguments)]
    pub fn domega2_stderr(&self, a1: usize, t1: usize, u1: usize, c1: usize, a2: usize, t2: usize, u2: usize, c2: usize) -> F {
        self.domega2_stderr[(self.d_idx(a1, t1, u1, c1), self.d_idx(a2, t2, u2, c2))]
    }

    pub fn max_omega2_stderr(&self) -> f64 {
        self.omega2_stderr.iter().fold(0.0f64, |m, &v| m.max(v.to_f64_lossy()))
    }

    pub fn max_domega2_stderr(&self) -> f64 {
        self.domega2_stderr.iter().fold(0.0f64, |m, &v| m.max(v.to_f64_lossy()))
    }

    pub fn check_compatible(&self, samples: usize, tokens: usize) -> Result<()> {
        if self.samples != samples || self.tokens != tokens {
            return Err(Error::MissingMoments(format!(
                "moments cover ({}, {}) but kernel needs ({samples}, {tokens})",
                self.samples, self.tokens
            )));
        }
        Ok(())
    }
}

/// Symmetric PSD repair and square root of A.
///
/// A is PSD in exact arithmetic; floating error may push eigenvalues slightly
/// negative. Eigenvalues in [−10⁻¹⁰‖A‖, 10⁻¹²‖A‖) are clipped up to
/// 10⁻¹²‖A‖; anything below that band means A was not a covariance at all.
fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let norm = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let lo = -1e-10 * norm;
    let floor = 1e-12 * norm;
    let mut roots = eig.eigenvalues.clone();
    for l in roots.iter_mut() {
        if *l < lo {
            return Err(Error::Factorization(format!(
                "eigenvalue {l} below the repair band (norm {norm})"
            )));
        }
        *l = l.max(floor).max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Row-wise softmax of one sample's W̃, honoring the mask.
fn softmax_rows(wtilde: &[f64], tokens: usize, masking: Masking, omega: &mut [f64]) {
    for t in 0..tokens {
        let limit = match masking {
            Masking::Bidirectional => tokens,
            Masking::Masked => t + 1,
        };
        let row = &wtilde[t * tokens..(t + 1) * tokens];
        let max = row[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for tp in 0..limit {
            let e = (row[tp] - max).exp();
            omega[t * tokens + tp] = e;
            denom += e;
        }
        for tp in 0..limit {
            omega[t * tokens + tp] /= denom;
        }
        for tp in limit..tokens {
            omega[t * tokens + tp] = 0.0;
        }
    }
}

/// Draws W̃ ~ N(0, A), forms (masked) softmax matrices and their Jacobians,
/// and returns empirical second-moment tensors with standard errors.
///
/// `seed`/`index` key the random stream; the same pair always reproduces the
/// same moments bit for bit.
pub fn attention_moments<F: Float>(
    a: &AttnKernel<F>,
    masking: Masking,
    n_samples: usize,
    seed: u64,
    index: u64,
) -> Result<AttnMoments<F>> {
    if n_samples < 2 {
        return Err(Error::MissingMoments("at least two Monte-Carlo samples required".into()));
    }
    let samples = a.samples();
    let tokens = a.tokens();
    let dim = a.dim();
    let a64 = DMatrix::from_fn(dim, dim, |i, j| a.get(i, j).to_f64_lossy());
    let root = psd_sqrt(&a64)?;

    let om_dim = samples * tokens * tokens;
    let d_dim = samples * tokens * tokens * tokens;
    let mut om_sum = vec![0.0f64; om_dim * om_dim];
    let mut om_sumsq = vec![0.0f64; om_dim * om_dim];
    let mut d_sum = vec![0.0f64; d_dim * d_dim];
    let mut d_sumsq = vec![0.0f64; d_dim * d_dim];

    let mut rng = stream(seed, "attention-moments", index);
    let mut z = vec![0.0f64; dim];
    let mut wtilde = vec![0.0f64; dim];
    let mut omega = vec![0.0f64; om_dim];
    let mut jac = vec![0.0f64; d_dim];

    for _ in 0..n_samples {
        for zi in z.iter_mut() {
            *zi = f64::standard_normal(&mut rng);
        }
        // W̃ = S·z with S the symmetric square root.
        for i in 0..dim {
            let mut acc = 0.0;
            for j in 0..dim {
                acc += root[(i, j)] * z[j];
            }
            wtilde[i] = acc;
        }
        for s in 0..samples {
            let base = s * tokens * tokens;
            softmax_rows(&wtilde[base..base + tokens * tokens], tokens, masking, &mut omega[base..base + tokens * tokens]);
        }
        // ∂Ω_{tu}/∂W̃_{tc} = Ω_{tu}(δ_{uc} − Ω_{tc}).
        for s in 0..samples {
            for t in 0..tokens {
                for u in 0..tokens {
                    let o_tu = omega[(s * tokens + t) * tokens + u];
                    for c in 0..tokens {
                        let o_tc = omega[(s * tokens + t) * tokens + c];
                        let delta = if u == c { 1.0 } else { 0.0 };
                        jac[((s * tokens + t) * tokens + u) * tokens + c] = o_tu * (delta - o_tc);
                    }
                }
            }
        }
        accumulate(&omega, &mut om_sum, &mut om_sumsq);
        accumulate(&jac, &mut d_sum, &mut d_sumsq);
    }

    let (omega2, omega2_stderr) = finalize::<F>(&om_sum, &om_sumsq, om_dim, n_samples);
    let (domega2, domega2_stderr) = finalize::<F>(&d_sum, &d_sumsq, d_dim, n_samples);

    Ok(AttnMoments {
        samples,
        tokens,
        n_samples,
        masking,
        omega2,
        omega2_stderr,
        domega2,
        domega2_stderr,
    })
}

/// Rank-1 accumulation of v·vᵀ into running sum and sum of squares
/// (upper triangle only; mirrored in `finalize`).
fn accumulate(v: &[f64], sum: &mut [f64], sumsq: &mut [f64]) {
    let d = v.len();
    for i in 0..d {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        let row = i * d;
        for j in i..d {
            let prod = vi * v[j];
            sum[row + j] += prod;
            sumsq[row + j] += prod * prod;
        }
    }
}

fn finalize<F: Float>(sum: &[f64], sumsq: &[f64], d: usize, n: usize) -> (Array2<F>, Array2<F>) {
    let nf = n as f64;
    let mut mean = Array2::from_elem((d, d), F::zero());
    let mut se = Array2::from_elem((d, d), F::zero());
    for i in 0..d {
        for j in i..d {
            let m = sum[i * d + j] / nf;
            let var = (sumsq[i * d + j] / nf - m * m).max(0.0) / (nf - 1.0);
            let s = var.sqrt();
            mean[(i, j)] = F::cast(m);
            mean[(j, i)] = F::cast(m);
            se[(i, j)] = F::cast(s);
            se[(j, i)] = F::cast(s);
        }
    }
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelRole;

    fn ln_like_kernel(samples: usize, tokens: usize, off: f64) -> PairKernel<f64> {
        PairKernel::from_fn(samples, tokens, KernelRole::LayerNorm, |p, q| if p == q { 1.0 } else { off })
    }

    #[test]
    fn qk_covariance_hand_values() {
        let f = ln_like_kernel(2, 1, 0.5);
        let a = qk_covariance(&f, 1.0, 1.0);
        // Diagonal A entry on the post-LN kernel: C_Q·C_K·1·1.
        assert_eq!(a.get(a.idx(0, 0, 0), a.idx(0, 0, 0)), 1.0);
        // Cross-sample entry: F₁₂² = 0.25.
        assert_eq!(a.get(a.idx(0, 0, 0), a.idx(1, 0, 0)), 0.25);
    }

    #[test]
    fn single_token_softmax_is_constant_one() {
        let f = ln_like_kernel(1, 1, 0.0);
        let a = qk_covariance(&f, 0.5, 0.5);
        let m = attention_moments(&a, Masking::Bidirectional, 16, 1, 0).unwrap();
        assert!((m.omega2(0, 0, 0, 0, 0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(m.domega2(0, 0, 0, 0, 0, 0, 0, 0), 0.0);
    }

    #[test]
    fn zero_covariance_gives_uniform_attention_exactly() {
        let tokens = 4;
        let f = PairKernel::<f64>::from_fn(1, tokens, KernelRole::LayerNorm, |_, _| 0.0);
        let a = qk_covariance(&f, 0.5, 0.5);
        let m = attention_moments(&a, Masking::Bidirectional, 8, 1, 0).unwrap();
        let unif = 1.0 / tokens as f64;
        for u in 0..tokens {
            for v in 0..tokens {
                assert!((m.omega2(0, 0, u, 0, 1, v) - unif * unif).abs() < 1e-15);
            }
        }
        // Softmax Jacobian at the uniform point: (1/T)(δ − 1/T).
        let d = m.domega2(0, 0, 1, 1, 0, 0, 1, 1);
        let expect = (unif * (1.0 - unif)).powi(2);
        assert!((d - expect).abs() < 1e-15);
        let d_off = m.domega2(0, 0, 1, 2, 0, 0, 1, 2);
        let expect_off = (unif * unif).powi(2);
        assert!((d_off - expect_off).abs() < 1e-15);
    }

    #[test]
    fn rows_sum_to_one() {
        let tokens = 3;
        let f = PairKernel::<f64>::from_fn(2, tokens, KernelRole::LayerNorm, |p, q| if p == q { 1.0 } else { 0.4 });
        let a = qk_covariance(&f, 0.5, 0.5);
        for masking in [Masking::Bidirectional, Masking::Masked] {
            let m = attention_moments(&a, masking, 256, 9, 1).unwrap();
            // Σ_{u,v} E[Ω_{tu}Ω_{sv}] = E[(ΣΩ_{tu})(ΣΩ_{sv})] = 1 exactly.
            for t in 0..tokens {
                for s2 in 0..tokens {
                    let mut acc = 0.0;
                    for u in 0..tokens {
                        for v in 0..tokens {
                            acc += m.omega2(0, t, u, 1, s2, v);
                        }
                    }
                    assert!((acc - 1.0).abs() < 1e-12, "{masking:?} rows ({t},{s2}) sum {acc}");
                }
            }
        }
    }

    #[test]
    fn masked_future_tokens_are_zero() {
        let tokens = 4;
        let f = PairKernel::<f64>::from_fn(1, tokens, KernelRole::LayerNorm, |p, q| if p == q { 1.0 } else { 0.2 });
        let a = qk_covariance(&f, 0.5, 0.5);
        let m = attention_moments(&a, Masking::Masked, 64, 2, 0).unwrap();
        for t in 0..tokens {
            for u in (t + 1)..tokens {
                assert_eq!(m.omega2(0, t, u, 0, t, u), 0.0);
            }
        }
        // First row attends only to itself.
        assert!((m.omega2(0, 0, 0, 0, 0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn moments_are_reproducible_per_seed() {
        let f = ln_like_kernel(1, 3, 0.3);
        let a = qk_covariance(&f, 0.5, 0.5);
        let m1 = attention_moments(&a, Masking::Bidirectional, 64, 5, 2).unwrap();
        let m2 = attention_moments(&a, Masking::Bidirectional, 64, 5, 2).unwrap();
        assert_eq!(m1.omega2.as_slice().unwrap(), m2.omega2.as_slice().unwrap());
        let m3 = attention_moments(&a, Masking::Bidirectional, 64, 5, 3).unwrap();
        assert_ne!(m1.omega2.as_slice().unwrap(), m3.omega2.as_slice().unwrap());
    }

    #[test]
    fn sampler_matches_wick_for_low_moments() {
        // Check Gaussianity of the W̃ sampler itself: empirical 2nd and 4th
        // moments against the covariance and the 3-term Wick sum.
        let f = PairKernel::<f64>::from_fn(1, 2, KernelRole::LayerNorm, |p, q| if p == q { 1.0 } else { 0.6 });
        let a = qk_covariance(&f, 0.7, 0.7);
        let dim = a.dim();
        let a64 = DMatrix::from_fn(dim, dim, |i, j| a.get(i, j));
        let root = psd_sqrt(&a64).unwrap();
        let n = 60_000;
        let mut rng = stream(3, "test/wick-sampler", 0);
        let mut sum2 = vec![0.0; dim * dim];
        let mut sum4 = 0.0f64;
        let mut sum4sq = 0.0f64;
        let idx = [0usize, 1, 2, 3];
        for _ in 0..n {
            let z: Vec<f64> = (0..dim).map(|_| f64::standard_normal(&mut rng)).collect();
            let w: Vec<f64> = (0..dim)
                .map(|i| (0..dim).map(|j| root[(i, j)] * z[j]).sum())
                .collect();
            for i in 0..dim {
                for j in 0..dim {
                    sum2[i * dim + j] += w[i] * w[j];
                }
            }
            let prod = w[idx[0]] * w[idx[1]] * w[idx[2]] * w[idx[3]];
            sum4 += prod;
            sum4sq += prod * prod;
        }
        for i in 0..dim {
            for j in 0..dim {
                let emp = sum2[i * dim + j] / n as f64;
                let se = (2.0f64 / n as f64).sqrt().max(1e-3);
                assert!(
                    (emp - a.get(i, j)).abs() < 4.0 * se,
                    "2nd moment ({i},{j}): {emp} vs {}",
                    a.get(i, j)
                );
            }
        }
        let emp4 = sum4 / n as f64;
        let se4 = ((sum4sq / n as f64 - emp4 * emp4) / (n as f64 - 1.0)).sqrt();
        let wick: f64 = crate::gaussian::wick_even_moment(&|x, y| a.get(idx[x], idx[y]), &[0, 1, 2, 3]);
        assert!((emp4 - wick).abs() < 4.0 * se4, "4th moment {emp4} vs wick {wick} ± {se4}");
    }

    #[test]
    fn rejects_tiny_sample_counts() {
        let f = ln_like_kernel(1, 2, 0.1);
        let a = qk_covariance(&f, 0.5, 0.5);
        assert!(attention_moments(&a, Masking::Bidirectional, 1, 0, 0).is_err());
    }
}
