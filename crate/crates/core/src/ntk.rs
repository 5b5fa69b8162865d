//! Forward recursion for the mean neural tangent kernel Θ.
//!
//! Each block contributes an additive term from its own parameters, a
//! cumulative term from the residual path acting on the layer-norm-suppressed
//! incoming Θ, and a copied term from the skip path; skip–residual cross
//! terms vanish in expectation. The recursion is linear in Θ, so the
//! decomposition of Θ by originating parameter group propagates exactly and
//! is recorded per block for comparison against empirical per-group sums.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::arch::{ArchSpec, BlockKind, Modality, ParamGroup};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::gaussian::{gauss_pair_expect, AttnMoments, PairFn};
use crate::inputs::Batch;
use crate::kernel::{propagate_kernels, KernelRole, KernelTrace, PairKernel, PropagationSettings};
use crate::plan::ScalingPlan;

/// Entrywise factor multiplying a previous-block Θ when it flows through a
/// normalization layer: 1/(√(G_pp+ε)·√(G_qq+ε)).
pub fn ln_backward_factor<F: Float>(g: &PairKernel<F>, eps: F) -> Result<PairKernel<F>> {
    let dim = g.dim();
    let mut inv_root = Vec::with_capacity(dim);
    for p in 0..dim {
        let d = g.diag(p) + eps;
        if d <= F::zero() {
            return Err(Error::NonpositiveDiagonal { index: p, value: d.to_f64_lossy() });
        }
        inv_root.push(F::one() / d.sqrt());
    }
    Ok(PairKernel::from_fn(g.samples(), g.tokens(), KernelRole::LayerNorm, |p, q| inv_root[p] * inv_root[q]))
}

/// First-block NTK: Λ_emb·G⁽⁰⁾ + Λ_PE·δ_{t₁t₂}, with Λ_emb = Λ_patch
/// (vision) or Λ_WE (language). The width factors inside λ_G cancel against
/// the gradient norms, leaving only the order-one constants.
pub fn stem_ntk<F: Float>(g0: &PairKernel<F>, plan: &ScalingPlan<F>, modality: Modality) -> PairKernel<F> {
    let lambda_emb = match modality {
        Modality::Vision => plan.lambda_const(ParamGroup::Patch),
        Modality::Language => plan.lambda_const(ParamGroup::WordEmb),
    };
    let lambda_pe = plan.lambda_const(ParamGroup::PosEmb);
    let tokens = g0.tokens();
    PairKernel::from_fn(g0.samples(), tokens, KernelRole::Ntk, |p, q| {
        let pe = if p % tokens == q % tokens { lambda_pe } else { F::zero() };
        lambda_emb * g0.get(p, q) + pe
    })
}

/// Per-group additive contributions produced by one block.
pub type Additive<F> = Vec<(ParamGroup, PairKernel<F>)>;

/// Θ decomposed by the parameter group that sourced each piece.
#[derive(Debug, Clone)]
pub struct NtkState<F> {
    samples: usize,
    tokens: usize,
    pub parts: BTreeMap<ParamGroup, PairKernel<F>>,
}

impl<F: Float> NtkState<F> {
    pub fn new(samples: usize, tokens: usize) -> Self {
        NtkState { samples, tokens, parts: BTreeMap::new() }
    }

    /// Stem state: the embedding and positional pieces of Θ⁽¹⁾.
    pub fn stem(g0: &PairKernel<F>, plan: &ScalingPlan<F>, modality: Modality) -> (Self, Additive<F>) {
        let samples = g0.samples();
        let tokens = g0.tokens();
        let stem_group = match modality {
            Modality::Vision => ParamGroup::Patch,
            Modality::Language => ParamGroup::WordEmb,
        };
        let emb = scale(g0, plan.lambda_const(stem_group)).with_role(KernelRole::Ntk);
        let lambda_pe = plan.lambda_const(ParamGroup::PosEmb);
        let pe = PairKernel::from_fn(samples, tokens, KernelRole::Ntk, |p, q| {
            if p % tokens == q % tokens {
                lambda_pe
            } else {
                F::zero()
            }
        });
        let mut state = NtkState::new(samples, tokens);
        state.add_part(stem_group, emb.clone());
        state.add_part(ParamGroup::PosEmb, pe.clone());
        (state, vec![(stem_group, emb), (ParamGroup::PosEmb, pe)])
    }

    pub fn total(&self) -> PairKernel<F> {
        let mut sum = PairKernel::zeros(self.samples, self.tokens, KernelRole::Ntk);
        for part in self.parts.values() {
            sum = sum.zip_with(part, KernelRole::Ntk, |a, b| a + b);
        }
        sum
    }

    fn add_part(&mut self, group: ParamGroup, add: PairKernel<F>) {
        match self.parts.remove(&group) {
            Some(existing) => {
                let merged = existing.zip_with(&add, KernelRole::Ntk, |a, b| a + b);
                self.parts.insert(group, merged);
            }
            None => {
                self.parts.insert(group, add);
            }
        }
    }

    /// Applies the block's linear map to every group's piece, then adds the
    /// fresh additive contributions; `keep_skip` controls the copied
    /// skip-path term (absent at the head).
    fn step(&self, keep_skip: bool, cumulative: impl Fn(&PairKernel<F>) -> PairKernel<F>, additive: &Additive<F>) -> NtkState<F> {
        let mut next = NtkState::new(self.samples, self.tokens);
        for (group, part) in &self.parts {
            let mut moved = cumulative(part);
            if keep_skip {
                moved = moved.zip_with(part, KernelRole::Ntk, |a, b| a + b);
            }
            next.parts.insert(*group, moved);
        }
        for (group, add) in additive {
            next.add_part(*group, add.clone());
        }
        next
    }
}

/// Token-mixing contractions of the attention moments against the layer-norm
/// kernel, shared by the additive and cumulative MHSA terms.
struct MhsaMixers<'m, F> {
    moments: &'m AttnMoments<F>,
    f: &'m PairKernel<F>,
    /// Sd[(p,c₁),(q,c₂)] = Σ_{u₁u₂} E[∂Ω_{t_p u₁}/∂W̃_{t_p c₁}·∂Ω_{t_q u₂}/∂W̃_{t_q c₂}]·F_{(α_p,u₁)(α_q,u₂)}.
    sd: Array2<F>,
    /// Saa[p,q] = Σ_{c₁c₂} Sd[(p,c₁),(q,c₂)]·F_{(α_p,c₁)(α_q,c₂)}.
    saa: PairKernel<F>,
}

impl<'m, F: Float> MhsaMixers<'m, F> {
    fn new(moments: &'m AttnMoments<F>, f: &'m PairKernel<F>) -> Self {
        let tokens = f.tokens();
        let dim = f.dim();
        let mut sd = Array2::from_elem((dim * tokens, dim * tokens), F::zero());
        for p in 0..dim {
            let (a1, t1) = (p / tokens, p % tokens);
            for q in 0..dim {
                let (a2, t2) = (q / tokens, q % tokens);
                for c1 in 0..tokens {
                    for c2 in 0..tokens {
                        let mut acc = F::zero();
                        for u1 in 0..tokens {
                            for u2 in 0..tokens {
                                acc += moments.domega2(a1, t1, u1, c1, a2, t2, u2, c2) * f.at(a1, u1, a2, u2);
                            }
                        }
                        sd[(p * tokens + c1, q * tokens + c2)] = acc;
                    }
                }
            }
        }
        let saa = PairKernel::from_fn(f.samples(), tokens, KernelRole::Ntk, |p, q| {
            let a1 = p / tokens;
            let a2 = q / tokens;
            let mut acc = F::zero();
            for c1 in 0..tokens {
                for c2 in 0..tokens {
                    acc += sd[(p * tokens + c1, q * tokens + c2)] * f.at(a1, c1, a2, c2);
                }
            }
            acc
        });
        MhsaMixers { moments, f, sd, saa }
    }

    /// Σ_{u,v} E[Ω_{t_p u}Ω_{t_q v}]·M_{(α_p,u)(α_q,v)}.
    fn omega_mix(&self, m: &PairKernel<F>) -> PairKernel<F> {
        let tokens = self.f.tokens();
        PairKernel::from_fn(m.samples(), tokens, KernelRole::Ntk, |p, q| {
            let (a1, t1) = (p / tokens, p % tokens);
            let (a2, t2) = (q / tokens, q % tokens);
            let mut acc = F::zero();
            for u in 0..tokens {
                for v in 0..tokens {
                    acc += self.moments.omega2(a1, t1, u, a2, t2, v) * m.at(a1, u, a2, v);
                }
            }
            acc
        })
    }

    /// Σ_{c₁,c₂} Sd[(p,c₁),(q,c₂)]·M_{(α_p,c₁)(α_q,c₂)}.
    fn deriv_mix(&self, m: &PairKernel<F>) -> PairKernel<F> {
        let tokens = self.f.tokens();
        PairKernel::from_fn(m.samples(), tokens, KernelRole::Ntk, |p, q| {
            let a1 = p / tokens;
            let a2 = q / tokens;
            let mut acc = F::zero();
            for c1 in 0..tokens {
                for c2 in 0..tokens {
                    acc += self.sd[(p * tokens + c1, q * tokens + c2)] * m.at(a1, c1, a2, c2);
                }
            }
            acc
        })
    }
}

fn hadamard<F: Float>(a: &PairKernel<F>, b: &PairKernel<F>) -> PairKernel<F> {
    a.zip_with(b, KernelRole::Ntk, |x, y| x * y)
}

fn scale<F: Float>(a: &PairKernel<F>, c: F) -> PairKernel<F> {
    PairKernel::from_fn(a.samples(), a.tokens(), KernelRole::Ntk, |p, q| c * a.get(p, q))
}

/// MHSA NTK step. Additive terms come from the U/V value path and the Q/K
/// attention path; cumulative terms mix the layer-norm-suppressed Θ through
/// the attention second moments and the softmax-Jacobian moments.
pub fn mhsa_ntk_step<F: Float>(
    state: &NtkState<F>,
    g: &PairKernel<F>,
    f: &PairKernel<F>,
    moments: &AttnMoments<F>,
    plan: &ScalingPlan<F>,
    eps: F,
) -> Result<(NtkState<F>, Additive<F>)> {
    moments.check_compatible(g.samples(), g.tokens())?;
    let lnfac = ln_backward_factor(g, eps)?;
    let mixers = MhsaMixers::new(moments, f);

    let c_u = plan.c(ParamGroup::U);
    let c_v = plan.c(ParamGroup::V);
    let c_q = plan.c(ParamGroup::Q);
    let c_k = plan.c(ParamGroup::K);

    let value_mix = mixers.omega_mix(f);
    let attn_add = hadamard(f, &mixers.saa);
    let additive: Additive<F> = vec![
        (ParamGroup::U, scale(&value_mix, plan.lambda_const(ParamGroup::U) * c_v)),
        (ParamGroup::V, scale(&value_mix, plan.lambda_const(ParamGroup::V) * c_u)),
        (ParamGroup::K, scale(&attn_add, plan.lambda_const(ParamGroup::K) * c_q * c_u * c_v)),
        (ParamGroup::Q, scale(&attn_add, plan.lambda_const(ParamGroup::Q) * c_k * c_u * c_v)),
    ];

    let cumulative = |part: &PairKernel<F>| {
        let suppressed = hadamard(&lnfac, part);
        let value_term = scale(&mixers.omega_mix(&suppressed), c_u * c_v);
        let attn_a = hadamard(&mixers.saa, &suppressed);
        let attn_b = hadamard(f, &mixers.deriv_mix(&suppressed));
        let attn_term = scale(&attn_a.zip_with(&attn_b, KernelRole::Ntk, |x, y| x + y), c_u * c_v * c_q * c_k);
        value_term.zip_with(&attn_term, KernelRole::Ntk, |x, y| x + y)
    };

    let next = state.step(true, cumulative, &additive);
    Ok((next, additive))
}

/// MLP NTK step:
/// Θ′ = Λ_X·⟨σσ⟩ + Λ_W·C_X·⟨σ′σ′⟩⊙F + Θ + C_X·C_W·⟨σ′σ′⟩⊙(lnfac⊙Θ),
/// with both pair integrals taken under the covariance C_W·F.
pub fn mlp_ntk_step<F: Float>(
    state: &NtkState<F>,
    g: &PairKernel<F>,
    f: &PairKernel<F>,
    activation: crate::arch::Activation,
    plan: &ScalingPlan<F>,
    eps: F,
    quad_order: usize,
) -> Result<(NtkState<F>, Additive<F>)> {
    let lnfac = ln_backward_factor(g, eps)?;
    let c_w = plan.c(ParamGroup::W);
    let c_x = plan.c(ParamGroup::X);

    let dim = f.dim();
    let mut ss = Array2::from_elem((dim, dim), F::zero());
    let mut dd = Array2::from_elem((dim, dim), F::zero());
    let sigma = PairFn::Value(activation);
    let dsigma = PairFn::Deriv(activation);
    for p in 0..dim {
        for q in p..dim {
            let k11 = c_w * f.diag(p);
            let k22 = c_w * f.diag(q);
            let k12 = c_w * f.get(p, q);
            let s = gauss_pair_expect(sigma, sigma, k11, k12, k22, quad_order)?;
            let d = gauss_pair_expect(dsigma, dsigma, k11, k12, k22, quad_order)?;
            ss[(p, q)] = s;
            ss[(q, p)] = s;
            dd[(p, q)] = d;
            dd[(q, p)] = d;
        }
    }
    let ss = PairKernel::from_fn(f.samples(), f.tokens(), KernelRole::Ntk, |p, q| ss[(p, q)]);
    let dd = PairKernel::from_fn(f.samples(), f.tokens(), KernelRole::Ntk, |p, q| dd[(p, q)]);

    let additive: Additive<F> = vec![
        (ParamGroup::X, scale(&ss, plan.lambda_const(ParamGroup::X))),
        (ParamGroup::W, scale(&hadamard(&dd, f), plan.lambda_const(ParamGroup::W) * c_x)),
    ];
    let cumulative = |part: &PairKernel<F>| {
        let suppressed = hadamard(&lnfac, part);
        scale(&hadamard(&dd, &suppressed), c_x * c_w)
    };
    let next = state.step(true, cumulative, &additive);
    Ok((next, additive))
}

/// Head NTK: additive head terms plus the cumulative term; no skip path.
pub fn head_ntk<F: Float>(
    state: &NtkState<F>,
    g: &PairKernel<F>,
    f: &PairKernel<F>,
    plan: &ScalingPlan<F>,
    modality: Modality,
    eps: F,
) -> Result<(NtkState<F>, Additive<F>)> {
    let lnfac = ln_backward_factor(g, eps)?;
    let (additive, c_head): (Additive<F>, F) = match modality {
        Modality::Vision => {
            let l_b = plan.lambda_const(ParamGroup::HeadB);
            let ones = PairKernel::from_fn(f.samples(), f.tokens(), KernelRole::Ntk, |_, _| l_b);
            (
                vec![
                    (ParamGroup::HeadB, ones),
                    (ParamGroup::HeadW, scale(f, plan.lambda_const(ParamGroup::HeadW))),
                ],
                plan.c(ParamGroup::HeadW),
            )
        }
        Modality::Language => (
            vec![(ParamGroup::WordEmb, scale(f, plan.lambda_const(ParamGroup::WordEmb)))],
            plan.c(ParamGroup::WordEmb),
        ),
    };
    let cumulative = |part: &PairKernel<F>| scale(&hadamard(&lnfac, part), c_head);
    let next = state.step(false, cumulative, &additive);
    Ok((next, additive))
}

/// One block's record: total Θ, what each group added here, and the running
/// decomposition of Θ by group.
#[derive(Debug, Clone)]
pub struct NtkBlock<F> {
    pub index: usize,
    pub label: String,
    pub theta: PairKernel<F>,
    pub additive: Additive<F>,
    pub by_group: Additive<F>,
}

impl<F: Float> NtkBlock<F> {
    pub fn group_total(&self, g: ParamGroup) -> Option<&PairKernel<F>> {
        self.by_group.iter().find(|(gg, _)| *gg == g).map(|(_, k)| k)
    }
}

/// Θ⁽¹⁾…Θ⁽ᴸ⁾ with per-group breakdowns.
#[derive(Debug, Clone)]
pub struct NtkTrace<F> {
    pub blocks: Vec<NtkBlock<F>>,
}

impl<F: Float> NtkTrace<F> {
    pub fn last(&self) -> &NtkBlock<F> {
        self.blocks.last().expect("trace has at least the stem block")
    }
}

fn snapshot<F: Float>(index: usize, label: String, state: &NtkState<F>, additive: Additive<F>) -> NtkBlock<F> {
    NtkBlock {
        index,
        label,
        theta: state.total(),
        additive,
        by_group: state.parts.iter().map(|(g, k)| (*g, k.clone())).collect(),
    }
}

/// Propagates Θ through the whole architecture, sampling fresh moments.
pub fn propagate_ntk<F: Float>(
    arch: &ArchSpec,
    plan: &ScalingPlan<F>,
    batch: &Batch<F>,
    settings: &PropagationSettings,
) -> Result<NtkTrace<F>> {
    let kernels = propagate_kernels(arch, plan, batch, settings)?;
    propagate_ntk_with_kernels(arch, plan, &kernels)
}

/// Propagates Θ against an existing kernel trace, reusing its Gaussian
/// moments so theory kernels and NTKs are mutually consistent.
pub fn propagate_ntk_with_kernels<F: Float>(
    arch: &ArchSpec,
    plan: &ScalingPlan<F>,
    kernels: &KernelTrace<F>,
) -> Result<NtkTrace<F>> {
    let eps = F::cast(arch.eps_ln);
    let g0 = &kernels.blocks[0].g;

    let (mut state, stem_additive) = NtkState::stem(g0, plan, arch.modality);
    let mut blocks = vec![snapshot(1, "stem".to_string(), &state, stem_additive)];

    for (i, kind) in arch.blocks.iter().enumerate() {
        let index = i + 2;
        let kb_prev = &kernels.blocks[index - 1];
        let kb = &kernels.blocks[index];
        let g = &kb_prev.g;
        let f = kb_prev.f.as_ref().expect("bulk inputs carry an LN kernel");
        let (next, additive) = match kind {
            BlockKind::Mhsa => {
                let moments = kb
                    .moments
                    .as_ref()
                    .ok_or_else(|| Error::MissingMoments(format!("no moments recorded at block {index}")))?;
                mhsa_ntk_step(&state, g, f, moments, plan, eps)?
            }
            BlockKind::Mlp => mlp_ntk_step(&state, g, f, arch.activation, plan, eps, 64)?,
        };
        state = next;
        blocks.push(snapshot(index, kb.label.clone(), &state, additive));
    }

    let last_index = arch.total_blocks();
    let kb_last = &kernels.blocks[last_index - 1];
    let g = &kb_last.g;
    let f = kb_last.f.as_ref().expect("bulk inputs carry an LN kernel");
    let (next, additive) = head_ntk(&state, g, f, plan, arch.modality, eps)?;
    state = next;
    blocks.push(snapshot(last_index, "head".to_string(), &state, additive));

    Ok(NtkTrace { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Activation, Masking};
    use crate::gaussian::{attention_moments, qk_covariance};
    use crate::kernel::{input_kernel, layer_norm_kernel};
    use crate::plan::{make_plan, ScalingConstants, ScalingStrategy};
    use crate::ParamGroup as G;

    fn unit_constants() -> ScalingConstants {
        let mut k = ScalingConstants::default();
        for g in G::ALL {
            if g != G::HeadB {
                k.c.insert(g, 1.0);
            }
            k.lambda.insert(g, 1.0);
        }
        k
    }

    fn toy_arch(modality: Modality, blocks: Vec<BlockKind>, tokens: usize) -> ArchSpec {
        ArchSpec {
            modality,
            n: 8,
            heads: 2,
            mlp_multiplier: 2,
            tokens,
            n_in: if modality == Modality::Vision { 4 } else { 11 },
            n_out: if modality == Modality::Vision { 3 } else { 11 },
            blocks,
            masking: Masking::Bidirectional,
            eps_ln: 0.0,
            activation: Activation::Identity,
            pooling: crate::arch::Pooling::None,
            weight_tying: modality == Modality::Language,
        }
    }

    fn unit_plan(arch: &ArchSpec) -> ScalingPlan<f64> {
        make_plan(arch, &ScalingStrategy::neural_tangent(), &unit_constants()).unwrap()
    }

    #[test]
    fn stem_ntk_vision_hand_values() {
        let x = ndarray::Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g0 = input_kernel(&Batch::Vision(x)).unwrap();
        let arch = toy_arch(Modality::Vision, vec![BlockKind::Mlp], 2);
        let plan = unit_plan(&arch);
        let theta1 = stem_ntk(&g0, &plan, Modality::Vision);
        // Θ1 = G0 + δ_{t1t2}.
        for p in 0..2 {
            for q in 0..2 {
                let expected = g0.get(p, q) + if p == q { 1.0 } else { 0.0 };
                assert_eq!(theta1.get(p, q), expected);
            }
        }
    }

    #[test]
    fn stem_ntk_zero_lambdas_vanishes() {
        let ids = ndarray::arr2(&[[1usize, 2]]);
        let g0 = input_kernel::<f64>(&Batch::Language(ids)).unwrap();
        let arch = toy_arch(Modality::Language, vec![BlockKind::Mlp], 2);
        let mut k = unit_constants();
        for g in G::ALL {
            k.lambda.insert(g, 0.0);
        }
        let plan: ScalingPlan<f64> = make_plan(&arch, &ScalingStrategy::neural_tangent(), &k).unwrap();
        let theta1 = stem_ntk(&g0, &plan, Modality::Language);
        assert_eq!(theta1.max_abs(), 0.0);
    }

    #[test]
    fn stem_ntk_language_same_token_cross_position() {
        // Same token at different positions: Λ_WE·1 with no positional term.
        let ids = ndarray::arr2(&[[3usize, 3]]);
        let g0 = input_kernel::<f64>(&Batch::Language(ids)).unwrap();
        let arch = toy_arch(Modality::Language, vec![BlockKind::Mlp], 2);
        let plan = unit_plan(&arch);
        let theta1 = stem_ntk(&g0, &plan, Modality::Language);
        assert_eq!(theta1.get(0, 1), 1.0);
    }

    #[test]
    fn ln_backward_factor_values() {
        let g = PairKernel::<f64>::from_fn(1, 2, KernelRole::Preactivation, |p, q| match (p, q) {
            (0, 0) => 4.0,
            (1, 1) => 9.0,
            _ => 1.0,
        });
        let fac = ln_backward_factor(&g, 0.0).unwrap();
        assert!((fac.get(0, 1) - 1.0 / 6.0).abs() < 1e-15);
        let unit = PairKernel::<f64>::from_fn(1, 2, KernelRole::Preactivation, |p, q| if p == q { 1.0 } else { 0.5 });
        let fac = ln_backward_factor(&unit, 0.0).unwrap();
        assert_eq!(fac.get(0, 0), 1.0);
        assert_eq!(fac.get(0, 1), 1.0);
    }

    #[test]
    fn mhsa_step_single_token_closed_form() {
        // T = 1: derivative moments vanish; additive = (Λ_U·C_V + Λ_V·C_U)·F
        // and cumulative = C_U·C_V·lnfac·Θ.
        let arch = toy_arch(Modality::Vision, vec![BlockKind::Mhsa], 1);
        let mut k = unit_constants();
        k.c.insert(G::U, 0.3);
        k.c.insert(G::V, 0.7);
        k.lambda.insert(G::U, 2.0);
        k.lambda.insert(G::V, 5.0);
        let plan: ScalingPlan<f64> = make_plan(&arch, &ScalingStrategy::neural_tangent(), &k).unwrap();

        let g = PairKernel::<f64>::from_fn(2, 1, KernelRole::Preactivation, |p, q| if p == q { 2.0 } else { 0.8 });
        let f = layer_norm_kernel(&g, 0.0).unwrap();
        let a = qk_covariance(&f, plan.c(G::Q), plan.c(G::K));
        let m = attention_moments(&a, Masking::Bidirectional, 32, 0, 0).unwrap();

        let (mut state, _) = (NtkState::new(2, 1), ());
        let theta0 = PairKernel::from_fn(2, 1, KernelRole::Ntk, |p, q| if p == q { 3.0 } else { 1.0 });
        state.parts.insert(G::PosEmb, theta0.clone());

        let (next, additive) = mhsa_ntk_step(&state, &g, &f, &m, &plan, 0.0).unwrap();
        let lnfac = ln_backward_factor(&g, 0.0).unwrap();
        for p in 0..2 {
            for q in 0..2 {
                let add = (2.0 * 0.7 + 5.0 * 0.3) * f.get(p, q);
                let cum = 0.3 * 0.7 * lnfac.get(p, q) * theta0.get(p, q);
                let expected = add + theta0.get(p, q) + cum;
                assert!((next.total().get(p, q) - expected).abs() < 1e-12, "({p},{q})");
            }
        }
        // K/Q additive contributions are zero at T = 1.
        for (grp, kern) in &additive {
            if matches!(grp, G::K | G::Q) {
                assert_eq!(kern.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn mhsa_step_skip_only_when_everything_off() {
        let arch = toy_arch(Modality::Vision, vec![BlockKind::Mhsa], 3);
        let mut k = unit_constants();
        k.c.insert(G::U, 0.0);
        k.c.insert(G::V, 0.0);
        for g in G::ALL {
            k.lambda.insert(g, 0.0);
        }
        let plan: ScalingPlan<f64> = make_plan(&arch, &ScalingStrategy::neural_tangent(), &k).unwrap();
        let g = PairKernel::<f64>::from_fn(1, 3, KernelRole::Preactivation, |p, q| if p == q { 1.0 } else { 0.2 });
        let f = layer_norm_kernel(&g, 0.0).unwrap();
        let a = qk_covariance(&f, plan.c(G::Q), plan.c(G::K));
        let m = attention_moments(&a, Masking::Bidirectional, 32, 0, 0).unwrap();
        let mut state = NtkState::new(1, 3);
        let theta0 = PairKernel::from_fn(1, 3, KernelRole::Ntk, |p, q| 1.0 + (p + q) as f64);
        state.parts.insert(G::PosEmb, theta0.clone());
        let (next, _) = mhsa_ntk_step(&state, &g, &f, &m, &plan, 0.0).unwrap();
        for p in 0..3 {
            for q in 0..3 {
                assert_eq!(next.total().get(p, q), theta0.get(p, q));
            }
        }
    }

    #[test]
    fn mlp_step_identity_all_ones_closed_form() {
        let arch = toy_arch(Modality::Vision, vec![BlockKind::Mlp], 1);
        let plan = unit_plan(&arch);
        // F = Θ = all-ones: Θ' = 1 + 1 + 1 + lnfac·1 entrywise.
        let g = PairKernel::<f64>::from_fn(2, 1, KernelRole::Preactivation, |_, _| 1.0);
        let f = layer_norm_kernel(&g, 0.0).unwrap();
        let mut state = NtkState::new(2, 1);
        let theta0 = PairKernel::from_fn(2, 1, KernelRole::Ntk, |_, _| 1.0);
        state.parts.insert(G::PosEmb, theta0);
        let (next, _) = mlp_ntk_step(&state, &g, &f, Activation::Identity, &plan, 0.0, 32).unwrap();
        let lnfac = ln_backward_factor(&g, 0.0).unwrap();
        for p in 0..2 {
            for q in 0..2 {
                let expected = 1.0 + 1.0 + 1.0 + lnfac.get(p, q);
                assert!((next.total().get(p, q) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mlp_step_off_is_pure_skip() {
        let arch = toy_arch(Modality::Vision, vec![BlockKind::Mlp], 2);
        let mut k = unit_constants();
        k.c.insert(G::X, 0.0);
        k.lambda.insert(G::X, 0.0);
        k.lambda.insert(G::W, 0.0);
        let plan: ScalingPlan<f64> = make_plan(&arch, &ScalingStrategy::neural_tangent(), &k).unwrap();
        let g = PairKernel::<f64>::from_fn(1, 2, KernelRole::Preactivation, |p, q| if p == q { 1.3 } else { 0.4 });
        let f = layer_norm_kernel(&g, 0.0).unwrap();
        let mut state = NtkState::new(1, 2);
        let theta0 = PairKernel::from_fn(1, 2, KernelRole::Ntk, |p, q| (1 + p * q) as f64);
        state.parts.insert(G::PosEmb, theta0.clone());
        let (next, _) = mlp_ntk_step(&state, &g, &f, Activation::Gelu, &plan, 0.0, 32).unwrap();
        for p in 0..2 {
            for q in 0..2 {
                assert_eq!(next.total().get(p, q), theta0.get(p, q));
            }
        }
    }

    #[test]
    fn head_ntk_vision_diagonal() {
        let arch = toy_arch(Modality::Vision, vec![BlockKind::Mlp], 1);
        let plan = unit_plan(&arch);
        let g = PairKernel::<f64>::from_fn(1, 1, KernelRole::Preactivation, |_, _| 4.0);
        let f = layer_norm_kernel(&g, 0.0).unwrap();
        let mut state = NtkState::new(1, 1);
        let theta = PairKernel::from_fn(1, 1, KernelRole::Ntk, |_, _| 6.0);
        state.parts.insert(G::PosEmb, theta);
        let (next, _) = head_ntk(&state, &g, &f, &plan, Modality::Vision, 0.0).unwrap();
        // Θ_L = Λ_headB + Λ_headW·F_d + C_head·Θ/G_d = 1 + 1 + 6/4.
        assert!((next.total().get(0, 0) - (2.0 + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn head_ntk_all_zero_constants() {
        let arch = toy_arch(Modality::Vision, vec![BlockKind::Mlp], 1);
        let mut k = unit_constants();
        k.c.insert(G::HeadW, 0.0);
        for g in G::ALL {
            k.lambda.insert(g, 0.0);
        }
        let plan: ScalingPlan<f64> = make_plan(&arch, &ScalingStrategy::neural_tangent(), &k).unwrap();
        let g = PairKernel::<f64>::from_fn(1, 1, KernelRole::Preactivation, |_, _| 2.0);
        let f = layer_norm_kernel(&g, 0.0).unwrap();
        let mut state = NtkState::new(1, 1);
        state.parts.insert(G::PosEmb, PairKernel::from_fn(1, 1, KernelRole::Ntk, |_, _| 5.0));
        let (next, _) = head_ntk(&state, &g, &f, &plan, Modality::Vision, 0.0).unwrap();
        assert_eq!(next.total().get(0, 0), 0.0);
    }

    #[test]
    fn propagate_ntk_two_mlp_blocks_closed_chain() {
        // Identity activation, T = 1, ε = 0, all constants 1, input kernel 1:
        // G grows by 1 per block; Θ follows Θ_{ℓ+1} = 2 + Θ_ℓ·(1 + 1/G_ℓ).
        let mut arch = toy_arch(Modality::Vision, vec![BlockKind::Mlp, BlockKind::Mlp], 1);
        arch.n_in = 4;
        let plan = unit_plan(&arch);
        let x = ndarray::Array3::from_elem((1, 1, 4), 1.0);
        let batch = Batch::Vision(x);
        let trace = propagate_ntk(&arch, &plan, &batch, &PropagationSettings::default()).unwrap();

        // G1 = 1 + 1 = 2, Θ1 = 2; Θ2 = 2 + Θ1 + Θ1/G1 = 5; G2 = 3;
        // Θ3 = 2 + Θ2 + Θ2/G2 = 8.6667; G3 = 4; Θ_L = 2 + Θ3/G3.
        let theta1 = trace.blocks[0].theta.get(0, 0);
        assert!((theta1 - 2.0).abs() < 1e-12);
        let theta2 = trace.blocks[1].theta.get(0, 0);
        assert!((theta2 - 5.0).abs() < 1e-10);
        let theta3 = trace.blocks[2].theta.get(0, 0);
        assert!((theta3 - (2.0 + 5.0 + 5.0 / 3.0)).abs() < 1e-10);
        let theta_l = trace.blocks[3].theta.get(0, 0);
        assert!((theta_l - (2.0 + theta3 / 4.0)).abs() < 1e-10);
    }

    #[test]
    fn propagate_ntk_depth_one_is_stem_then_head_composition() {
        let mut arch = toy_arch(Modality::Vision, vec![BlockKind::Mlp], 2);
        arch.n_in = 4;
        let mut k = unit_constants();
        // Make the bulk block transparent so the trace is head ∘ stem.
        k.c.insert(G::X, 0.0);
        k.lambda.insert(G::X, 0.0);
        k.lambda.insert(G::W, 0.0);
        let plan: ScalingPlan<f64> = make_plan(&arch, &ScalingStrategy::neural_tangent(), &k).unwrap();
        let batch = Batch::random_vision(1, 2, 4, 3);
        let trace = propagate_ntk(&arch, &plan, &batch, &PropagationSettings::default()).unwrap();

        let g0 = input_kernel(&batch).unwrap();
        let theta1 = stem_ntk(&g0, &plan, Modality::Vision);
        let g1 = crate::kernel::stem_kernel(&g0, 1.0, 1.0);
        let f1 = layer_norm_kernel(&g1, 0.0).unwrap();
        let lnfac = ln_backward_factor(&g1, 0.0).unwrap();
        for p in 0..2 {
            for q in 0..2 {
                let expected = 1.0 + f1.get(p, q) + 0.0 * 0.0
                    + plan.c(G::HeadW) * lnfac.get(p, q) * theta1.get(p, q);
                assert!((trace.last().theta.get(p, q) - expected).abs() < 1e-10, "({p},{q})");
            }
        }
    }

    #[test]
    fn by_group_totals_sum_to_theta() {
        let arch = toy_arch(Modality::Language, vec![BlockKind::Mhsa, BlockKind::Mlp], 3);
        let plan = unit_plan(&arch);
        let batch = Batch::random_language(2, 3, 11, 5);
        let trace = propagate_ntk(&arch, &plan, &batch, &PropagationSettings { moment_samples: 512, ..Default::default() }).unwrap();
        for block in &trace.blocks {
            let mut sum = PairKernel::zeros(2, 3, KernelRole::Ntk);
            for (_, part) in &block.by_group {
                sum = sum.zip_with(part, KernelRole::Ntk, |a, b| a + b);
            }
            for p in 0..sum.dim() {
                for q in 0..sum.dim() {
                    assert!((sum.get(p, q) - block.theta.get(p, q)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn width_independence_of_theory() {
        let arch_a = toy_arch(Modality::Vision, vec![BlockKind::Mhsa, BlockKind::Mlp], 2);
        let mut arch_b = arch_a.clone();
        arch_b.n = 64;
        arch_b.heads = 16;
        let plan_a = unit_plan(&arch_a);
        let plan_b = unit_plan(&arch_b);
        let batch = Batch::random_vision(1, 2, 4, 9);
        let settings = PropagationSettings { moment_samples: 256, ..Default::default() };
        let ta = propagate_ntk(&arch_a, &plan_a, &batch, &settings).unwrap();
        let tb = propagate_ntk(&arch_b, &plan_b, &batch, &settings).unwrap();
        for (ba, bb) in ta.blocks.iter().zip(&tb.blocks) {
            assert_eq!(ba.theta.matrix(), bb.theta.matrix());
        }
    }
}
