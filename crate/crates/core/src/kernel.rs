//! Forward preactivation-kernel recursion: input and stem kernels, the
//! layer-norm kernel, MHSA/MLP block steps, and the head kernel.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, BlockKind, Modality, ParamGroup, Pooling};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::gaussian::{attention_moments, gauss_pair_expect, qk_covariance, AttnMoments, PairFn, DEFAULT_QUAD_ORDER};
use crate::inputs::Batch;
use crate::plan::ScalingPlan;

/// What a symmetric pair matrix represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelRole {
    /// Preactivation kernel G.
    Preactivation,
    /// Layer-normalized kernel F.
    LayerNorm,
    /// Neural tangent kernel Θ.
    Ntk,
}

/// Symmetric matrix over (sample, token) pairs, row-major with the sample
/// index outer and the token index inner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: serde::de::DeserializeOwned"))]
pub struct PairKernel<F> {
    samples: usize,
    tokens: usize,
    role: KernelRole,
    mat: Array2<F>,
}

impl<F: Float> PairKernel<F> {
    /// Builds from an entry function, mirroring the upper triangle so the
    /// result is symmetric to the bit.
    pub fn from_fn(samples: usize, tokens: usize, role: KernelRole, mut entry: impl FnMut(usize, usize) -> F) -> Self {
        let dim = samples * tokens;
        let mut mat = Array2::from_elem((dim, dim), F::zero());
        for p in 0..dim {
            for q in p..dim {
                let v = entry(p, q);
                mat[(p, q)] = v;
                mat[(q, p)] = v;
            }
        }
        PairKernel { samples, tokens, role, mat }
    }

    pub fn zeros(samples: usize, tokens: usize, role: KernelRole) -> Self {
        Self::from_fn(samples, tokens, role, |_, _| F::zero())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.samples * self.tokens
    }

    pub fn role(&self) -> KernelRole {
        self.role
    }

    pub fn with_role(mut self, role: KernelRole) -> Self {
        self.role = role;
        self
    }

    /// Flat pair index of (sample, token).
    pub fn idx(&self, sample: usize, token: usize) -> usize {
        sample * self.tokens + token
    }

    pub fn get(&self, p: usize, q: usize) -> F {
        self.mat[(p, q)]
    }

    pub fn at(&self, s1: usize, t1: usize, s2: usize, t2: usize) -> F {
        self.mat[(self.idx(s1, t1), self.idx(s2, t2))]
    }

    pub fn diag(&self, p: usize) -> F {
        self.mat[(p, p)]
    }

    pub fn matrix(&self) -> &Array2<F> {
        &self.mat
    }

    pub fn max_abs(&self) -> F {
        self.mat.iter().fold(F::zero(), |m, &v| m.max(v.abs()))
    }

    /// Smallest eigenvalue (computed in f64), for PSD assertions.
    pub fn min_eigenvalue(&self) -> f64 {
        let dim = self.dim();
        let m = nalgebra::DMatrix::from_fn(dim, dim, |i, j| self.mat[(i, j)].to_f64_lossy());
        m.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Entrywise combination preserving exact symmetry.
    pub fn zip_with(&self, other: &PairKernel<F>, role: KernelRole, mut f: impl FnMut(F, F) -> F) -> PairKernel<F> {
        PairKernel::from_fn(self.samples, self.tokens, role, |p, q| f(self.mat[(p, q)], other.mat[(p, q)]))
    }
}

/// Input kernel G⁽⁰⁾: normalized dot products for vision, same-token
/// indicators for language.
pub fn input_kernel<F: Float>(batch: &Batch<F>) -> Result<PairKernel<F>> {
    if batch.samples() == 0 {
        return Err(Error::EmptyBatch);
    }
    let samples = batch.samples();
    let tokens = batch.tokens();
    match batch {
        Batch::Vision(x) => {
            let n_patch = x.shape()[2];
            let inv = F::cast(1.0 / n_patch as f64);
            Ok(PairKernel::from_fn(samples, tokens, KernelRole::Preactivation, |p, q| {
                let (a1, t1) = (p / tokens, p % tokens);
                let (a2, t2) = (q / tokens, q % tokens);
                let mut acc = F::zero();
                for j in 0..n_patch {
                    acc += x[(a1, t1, j)] * x[(a2, t2, j)];
                }
                acc * inv
            }))
        }
        Batch::Language(ids) => Ok(PairKernel::from_fn(samples, tokens, KernelRole::Preactivation, |p, q| {
            let (a1, t1) = (p / tokens, p % tokens);
            let (a2, t2) = (q / tokens, q % tokens);
            if ids[(a1, t1)] == ids[(a2, t2)] {
                F::one()
            } else {
                F::zero()
            }
        })),
    }
}

/// Stem kernel G⁽¹⁾ = C_emb·G⁽⁰⁾ + C_PE·δ_{t₁t₂}.
pub fn stem_kernel<F: Float>(g0: &PairKernel<F>, c_emb: F, c_pe: F) -> PairKernel<F> {
    let tokens = g0.tokens();
    PairKernel::from_fn(g0.samples(), tokens, KernelRole::Preactivation, |p, q| {
        let same_token = p % tokens == q % tokens;
        let pe = if same_token { c_pe } else { F::zero() };
        c_emb * g0.get(p, q) + pe
    })
}

/// Layer-norm kernel F_pq = G_pq / (√(G_pp+ε)·√(G_qq+ε)).
pub fn layer_norm_kernel<F: Float>(g: &PairKernel<F>, eps: F) -> Result<PairKernel<F>> {
    let dim = g.dim();
    let mut inv_root = Vec::with_capacity(dim);
    for p in 0..dim {
        let d = g.diag(p) + eps;
        if d <= F::zero() {
            return Err(Error::NonpositiveDiagonal { index: p, value: d.to_f64_lossy() });
        }
        inv_root.push(F::one() / d.sqrt());
    }
    Ok(PairKernel::from_fn(g.samples(), g.tokens(), KernelRole::LayerNorm, |p, q| {
        g.get(p, q) * inv_root[p] * inv_root[q]
    }))
}

/// MHSA kernel step:
/// G′ = G + C_U·C_V·Σ_{u,v} E[Ω_{t₁u}Ω_{t₂v}]·F_{(α₁,u)(α₂,v)}.
pub fn mhsa_kernel_step<F: Float>(
    g: &PairKernel<F>,
    f: &PairKernel<F>,
    c_u: F,
    c_v: F,
    moments: &AttnMoments<F>,
) -> Result<PairKernel<F>> {
    moments.check_compatible(g.samples(), g.tokens())?;
    let tokens = g.tokens();
    Ok(PairKernel::from_fn(g.samples(), tokens, KernelRole::Preactivation, |p, q| {
        let (a1, t1) = (p / tokens, p % tokens);
        let (a2, t2) = (q / tokens, q % tokens);
        let mut acc = F::zero();
        for u in 0..tokens {
            for v in 0..tokens {
                acc += moments.omega2(a1, t1, u, a2, t2, v) * f.at(a1, u, a2, v);
            }
        }
        g.get(p, q) + c_u * c_v * acc
    }))
}

/// First-order standard error of the MHSA step induced by the Monte-Carlo
/// moment error, combined in quadrature with the incoming error.
pub fn mhsa_step_stderr<F: Float>(
    prev_err: &Array2<f64>,
    f: &PairKernel<F>,
    c_u: F,
    c_v: F,
    moments: &AttnMoments<F>,
) -> Array2<f64> {
    let tokens = f.tokens();
    let dim = f.dim();
    let cc = (c_u * c_v).to_f64_lossy();
    Array2::from_shape_fn((dim, dim), |(p, q)| {
        let (a1, t1) = (p / tokens, p % tokens);
        let (a2, t2) = (q / tokens, q % tokens);
        let mut var = 0.0f64;
        for u in 0..tokens {
            for v in 0..tokens {
                let se = moments.omega2_stderr(a1, t1, u, a2, t2, v).to_f64_lossy()
                    * f.at(a1, u, a2, v).to_f64_lossy();
                var += se * se;
            }
        }
        (prev_err[(p, q)].powi(2) + cc * cc * var).sqrt()
    })
}

/// MLP kernel step: G′ = G + C_X·⟨σ(w₁)σ(w₂)⟩_{C_W·F}, the Gaussian pair
/// integral evaluated entrywise on the 2×2 restriction of C_W·F.
pub fn mlp_kernel_step<F: Float>(
    g: &PairKernel<F>,
    f: &PairKernel<F>,
    c_w: F,
    c_x: F,
    activation: crate::arch::Activation,
    quad_order: usize,
) -> Result<PairKernel<F>> {
    let dim = g.dim();
    let mut add = Array2::from_elem((dim, dim), F::zero());
    let sigma = PairFn::Value(activation);
    for p in 0..dim {
        for q in p..dim {
            let k11 = c_w * f.diag(p);
            let k22 = c_w * f.diag(q);
            let k12 = c_w * f.get(p, q);
            let v = gauss_pair_expect(sigma, sigma, k11, k12, k22, quad_order)?;
            add[(p, q)] = v;
            add[(q, p)] = v;
        }
    }
    Ok(PairKernel::from_fn(g.samples(), g.tokens(), KernelRole::Preactivation, |p, q| {
        g.get(p, q) + c_x * add[(p, q)]
    }))
}

/// Head kernel and, with token-mean pooling, the pooled kernel over samples.
#[derive(Debug, Clone)]
pub struct HeadKernel<F> {
    pub g: PairKernel<F>,
    pub pooled: Option<Array2<F>>,
}

/// G⁽ᴸ⁾ = C·F⁽ᴸ⁻¹⁾ with C = C_head (vision) or C_WE (language); token-mean
/// pooling additionally averages both token indices.
pub fn head_kernel<F: Float>(f: &PairKernel<F>, c: F, pooling: Pooling) -> HeadKernel<F> {
    let g = PairKernel::from_fn(f.samples(), f.tokens(), KernelRole::Preactivation, |p, q| c * f.get(p, q));
    let pooled = match pooling {
        Pooling::None => None,
        Pooling::TokenMean => {
            let t = f.tokens();
            let inv = F::cast(1.0 / (t * t) as f64);
            Some(Array2::from_shape_fn((f.samples(), f.samples()), |(a1, a2)| {
                let mut acc = F::zero();
                for t1 in 0..t {
                    for t2 in 0..t {
                        acc += g.at(a1, t1, a2, t2);
                    }
                }
                acc * inv
            }))
        }
    };
    HeadKernel { g, pooled }
}

/// Monte-Carlo and quadrature controls for a propagation run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PropagationSettings {
    pub moment_samples: usize,
    pub quad_order: usize,
    pub seed: u64,
}

impl Default for PropagationSettings {
    fn default() -> Self {
        PropagationSettings { moment_samples: 4096, quad_order: DEFAULT_QUAD_ORDER, seed: 0 }
    }
}

/// One block's record in a trace.
#[derive(Debug, Clone)]
pub struct KernelBlock<F> {
    /// Block index ℓ = 0 (input) … L (head).
    pub index: usize,
    pub label: String,
    pub g: PairKernel<F>,
    /// F⁽ℓ⁾ = layer-norm kernel of this block's G, where defined.
    pub f: Option<PairKernel<F>>,
    /// Attention moments consumed to produce this block's G (MHSA only).
    pub moments: Option<AttnMoments<F>>,
    /// Accumulated first-order Monte-Carlo error of G.
    pub g_stderr: Array2<f64>,
}

/// Ordered kernels G⁽⁰⁾…G⁽ᴸ⁾ with their layer-norm kernels.
#[derive(Debug, Clone)]
pub struct KernelTrace<F> {
    pub blocks: Vec<KernelBlock<F>>,
    pub pooled: Option<Array2<F>>,
}

impl<F: Float> KernelTrace<F> {
    pub fn last_g(&self) -> &PairKernel<F> {
        &self.blocks.last().expect("trace has at least input and stem").g
    }
}

/// Embedding covariance of the stem layer in the theory: C_patch or C_WE.
pub fn stem_embedding_constant<F: Float>(arch: &ArchSpec, plan: &ScalingPlan<F>) -> F {
    match arch.modality {
        Modality::Vision => plan.c(ParamGroup::Patch),
        Modality::Language => plan.c(ParamGroup::WordEmb),
    }
}

/// Head covariance constant in the theory: C_head or C_WE.
pub fn head_constant<F: Float>(arch: &ArchSpec, plan: &ScalingPlan<F>) -> F {
    match arch.modality {
        Modality::Vision => plan.c(ParamGroup::HeadW),
        Modality::Language => plan.c(ParamGroup::WordEmb),
    }
}

/// Runs the full forward recursion: input and stem kernels, one (G, F) pair
/// per residual block, and the head kernel.
pub fn propagate_kernels<F: Float>(
    arch: &ArchSpec,
    plan: &ScalingPlan<F>,
    batch: &Batch<F>,
    settings: &PropagationSettings,
) -> Result<KernelTrace<F>> {
    arch.validate()?;
    batch.validate(arch)?;
    let eps = F::cast(arch.eps_ln);
    let dim = batch.positions();
    let zero_err = Array2::zeros((dim, dim));

    let g0 = input_kernel(batch)?;
    let mut blocks = vec![KernelBlock {
        index: 0,
        label: "input".to_string(),
        f: layer_norm_kernel(&g0, eps).ok(),
        g: g0.clone(),
        moments: None,
        g_stderr: zero_err.clone(),
    }];

    let g1 = stem_kernel(&g0, stem_embedding_constant(arch, plan), plan.c(ParamGroup::PosEmb));
    let f1 = layer_norm_kernel(&g1, eps)?;
    blocks.push(KernelBlock {
        index: 1,
        label: "stem".to_string(),
        g: g1,
        f: Some(f1),
        moments: None,
        g_stderr: zero_err.clone(),
    });

    for (i, kind) in arch.blocks.iter().enumerate() {
        let index = i + 2;
        let prev = blocks.last().expect("nonempty");
        let g = prev.g.clone();
        let g_err = prev.g_stderr.clone();
        let f = prev.f.clone().expect("bulk blocks always have an LN kernel");
        let (label, g_next, err_next, moments) = match kind {
            BlockKind::Mhsa => {
                let a = qk_covariance(&f, plan.c(ParamGroup::Q), plan.c(ParamGroup::K));
                let moments = attention_moments(
                    &a,
                    arch.masking,
                    settings.moment_samples,
                    settings.seed,
                    index as u64,
                )?;
                let c_u = plan.c(ParamGroup::U);
                let c_v = plan.c(ParamGroup::V);
                let g_next = mhsa_kernel_step(&g, &f, c_u, c_v, &moments)?;
                let err = mhsa_step_stderr(&g_err, &f, c_u, c_v, &moments);
                (format!("mhsa@{index}"), g_next, err, Some(moments))
            }
            BlockKind::Mlp => {
                let g_next = mlp_kernel_step(
                    &g,
                    &f,
                    plan.c(ParamGroup::W),
                    plan.c(ParamGroup::X),
                    arch.activation,
                    settings.quad_order,
                )?;
                (format!("mlp@{index}"), g_next, g_err, None)
            }
        };
        let f_next = layer_norm_kernel(&g_next, eps)?;
        blocks.push(KernelBlock {
            index,
            label,
            g: g_next,
            f: Some(f_next),
            moments,
            g_stderr: err_next,
        });
    }

    let last = blocks.last().expect("nonempty");
    let f_last = last.f.clone().expect("bulk blocks always have an LN kernel");
    let prev_err = last.g_stderr.clone();
    let head = head_kernel(&f_last, head_constant(arch, plan), arch.pooling);
    let index = arch.total_blocks();
    blocks.push(KernelBlock {
        index,
        label: "head".to_string(),
        g: head.g,
        f: None,
        moments: None,
        g_stderr: prev_err,
    });

    Ok(KernelTrace { blocks, pooled: head.pooled })
}
