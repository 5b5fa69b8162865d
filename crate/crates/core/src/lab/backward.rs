//! Reverse-mode differentiation through the full network, exact up to
//! floating error.
//!
//! A backward pass keeps token-level upstream gradients per parameter site
//! rather than materializing dense per-parameter tensors: every weight matrix
//! enters as a linear map over token rows, so NTK dot products between two
//! passes reduce to small Gram contractions. Dense gradients are assembled on
//! demand for finite-difference checks, gradient-magnitude statistics, and
//! optimizer updates.

use ndarray::{Array1, Array2, Array3, Axis};

use crate::arch::{Masking, Modality, ParamGroup};
use crate::error::{Error, Result};
use crate::inputs::Batch;

use super::forward::{forward_pass, BlockTrace, ForwardTrace};
use super::params::{BlockParams, HeadParams, ModelParams};

/// A linear functional of the network outputs to differentiate: token-level
/// seed coefficients f̄ of shape (R, n_out).
#[derive(Debug, Clone)]
pub struct OutputSeed {
    pub fbar: Array2<f64>,
}

impl OutputSeed {
    /// Single output component z⁽ᴸ⁾_{α,t,i}.
    pub fn component(samples: usize, tokens: usize, n_out: usize, sample: usize, token: usize, channel: usize) -> Self {
        let mut fbar = Array2::zeros((samples * tokens, n_out));
        fbar[(sample * tokens + token, channel)] = 1.0;
        OutputSeed { fbar }
    }

    /// Single pooled component z̃⁽ᴸ⁾_{α,i} = (1/T)·Σ_t z⁽ᴸ⁾_{α,t,i}.
    pub fn pooled_component(samples: usize, tokens: usize, n_out: usize, sample: usize, channel: usize) -> Self {
        let mut fbar = Array2::zeros((samples * tokens, n_out));
        for t in 0..tokens {
            fbar[(sample * tokens + t, channel)] = 1.0 / tokens as f64;
        }
        OutputSeed { fbar }
    }

    /// Uniform surrogate loss L = scale·Σ_{α,t,i} z⁽ᴸ⁾: ∂L/∂f is a constant,
    /// isolating the width scaling of ∂f/∂θ.
    pub fn uniform(samples: usize, tokens: usize, n_out: usize, scale: f64) -> Self {
        OutputSeed { fbar: Array2::from_elem((samples * tokens, n_out), scale) }
    }
}

/// A selected output component for [`output_jacobian`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputComponent {
    Token { sample: usize, token: usize, channel: usize },
    Pooled { sample: usize, channel: usize },
}

/// Per-block upstream factors retained by a backward pass.
#[derive(Debug, Clone)]
pub enum BlockBackParts {
    Mhsa {
        /// (H, R, C) gradients of the query/key/value vectors.
        qbar: Array3<f64>,
        kbar: Array3<f64>,
        vbar: Array3<f64>,
        /// (R, n) gradient of the block output (upstream of the U site).
        gbar: Array2<f64>,
    },
    Mlp {
        /// (R, Mn) gradient of the middle-layer preactivations.
        wbar: Array2<f64>,
        /// (R, n) gradient of the block output (upstream of the X site).
        gbar: Array2<f64>,
    },
}

/// Token-level factors of one backward pass.
#[derive(Debug, Clone)]
pub struct BackParts {
    /// z̄⁽¹⁾, upstream of the stem embedding, (R, n).
    pub stem_u: Array2<f64>,
    /// Materialized positional-embedding gradient, (T, n).
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockBackParts>,
    /// Upstream of the head matrix, (R, n_out); the language rescale is
    /// folded in.
    pub head_u: Array2<f64>,
    /// Materialized head-bias gradient (vision only).
    pub head_b: Option<Array1<f64>>,
}

/// Layer-norm backward for all rows: z̄ = inv·(s̄ − mean(s̄) − s·(s̄·s)/n).
fn ln_backward(sbar: &Array2<f64>, s: &Array2<f64>, inv_std: &[f64]) -> Array2<f64> {
    let (rows, n) = (s.shape()[0], s.shape()[1]);
    let mut zbar = Array2::zeros((rows, n));
    for r in 0..rows {
        let sb = sbar.row(r);
        let sr = s.row(r);
        let mean = sb.sum() / n as f64;
        let proj = sb.dot(&sr) / n as f64;
        let inv = inv_std[r];
        for k in 0..n {
            zbar[(r, k)] = inv * (sb[k] - mean - sr[k] * proj);
        }
    }
    zbar
}

fn mhsa_backward(
    params: &super::params::MhsaParams,
    trace: &super::forward::MhsaTrace,
    gbar: &Array2<f64>,
    masking: Masking,
    samples: usize,
    tokens: usize,
) -> (Array2<f64>, BlockBackParts) {
    let h_count = params.q.shape()[0];
    let c = params.q.shape()[1];
    let n = params.q.shape()[2];
    let rows = samples * tokens;
    let scale = 1.0 / (c as f64).sqrt();

    let mut qbar = Array3::zeros((h_count, rows, c));
    let mut kbar = Array3::zeros((h_count, rows, c));
    let mut vbar = Array3::zeros((h_count, rows, c));
    let mut sbar = Array2::zeros((rows, n));

    for h in 0..h_count {
        let u_h = params.u.index_axis(Axis(0), h); // (n, C)
        // ō = ḡ·U_h, (R, C)
        let obar = gbar.dot(&u_h);
        let qh = trace.q.index_axis(Axis(0), h);
        let kh = trace.k.index_axis(Axis(0), h);
        let vh = trace.v.index_axis(Axis(0), h);

        for a in 0..samples {
            let base = a * tokens;
            for t in 0..tokens {
                let limit = match masking {
                    Masking::Bidirectional => tokens,
                    Masking::Masked => t + 1,
                };
                // Ω̄_{t,t′} = ō_t · v_{t′}
                let mut obar_row = vec![0.0; limit];
                for (tp, ob) in obar_row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for cc in 0..c {
                        acc += obar[(base + t, cc)] * vh[(base + tp, cc)];
                    }
                    *ob = acc;
                }
                // v̄_{t′} += Ω_{t,t′}·ō_t
                for tp in 0..limit {
                    let om = trace.omega[(h, base + t, tp)];
                    for cc in 0..c {
                        vbar[(h, base + tp, cc)] += om * obar[(base + t, cc)];
                    }
                }
                // softmax Jacobian row: W̃bar = Ω ⊙ (Ω̄ − ⟨Ω̄, Ω⟩)
                let mut dot = 0.0;
                for tp in 0..limit {
                    dot += obar_row[tp] * trace.omega[(h, base + t, tp)];
                }
                for tp in 0..limit {
                    let om = trace.omega[(h, base + t, tp)];
                    let wb = om * (obar_row[tp] - dot);
                    // q̄_t += W̃bar_{t,t′}·k_{t′}/√C ; k̄_{t′} += W̃bar_{t,t′}·q_t/√C
                    for cc in 0..c {
                        qbar[(h, base + t, cc)] += scale * wb * kh[(base + tp, cc)];
                        kbar[(h, base + tp, cc)] += scale * wb * qh[(base + t, cc)];
                    }
                }
            }
        }

        // s̄ += q̄·Q_h + k̄·K_h + v̄·V_h
        sbar += &qbar.index_axis(Axis(0), h).dot(&params.q.index_axis(Axis(0), h));
        sbar += &kbar.index_axis(Axis(0), h).dot(&params.k.index_axis(Axis(0), h));
        sbar += &vbar.index_axis(Axis(0), h).dot(&params.v.index_axis(Axis(0), h));
    }

    (sbar, BlockBackParts::Mhsa { qbar, kbar, vbar, gbar: gbar.clone() })
}

/// Runs one backward pass from the given output seed.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, seed: &OutputSeed) -> BackParts {
    let arch = &params.arch;
    let depth = params.blocks.len();
    let s_last = &trace.s[depth];

    // Head.
    let (head_u, sbar_last, head_b) = match (&params.head, arch.modality) {
        (HeadParams::Vision { w, .. }, Modality::Vision) => {
            let sbar = seed.fbar.dot(w);
            let head_b = seed.fbar.sum_axis(Axis(0));
            (seed.fbar.clone(), sbar, Some(head_b))
        }
        (_, Modality::Language) => {
            let head_u = &seed.fbar * params.n_rescale;
            let emb = params.head_emb();
            let sbar = head_u.dot(&emb.t());
            (head_u, sbar, None)
        }
        _ => unreachable!("validated at forward time"),
    };

    let mut zbar = ln_backward(&sbar_last, s_last, &trace.ln_inv_std[depth]);

    let mut blocks_rev = Vec::with_capacity(depth);
    for b in (0..depth).rev() {
        let s_b = &trace.s[b];
        let (sbar_b, parts) = match (&params.blocks[b], &trace.blocks[b]) {
            (BlockParams::Mhsa(m), BlockTrace::Mhsa(t)) => {
                mhsa_backward(m, t, &zbar, arch.masking, trace.samples, trace.tokens)
            }
            (BlockParams::Mlp(m), BlockTrace::Mlp { w_pre }) => {
                let abar = zbar.dot(&m.x); // (R, Mn)
                let wbar = &abar * &w_pre.mapv(|x| arch.activation.deriv(x));
                let sbar = wbar.dot(&m.w); // (R, n)
                (sbar, BlockBackParts::Mlp { wbar, gbar: zbar.clone() })
            }
            _ => unreachable!("trace matches params"),
        };
        zbar = zbar + ln_backward(&sbar_b, s_b, &trace.ln_inv_std[b]);
        blocks_rev.push(parts);
    }
    blocks_rev.reverse();

    // Positional-embedding gradient: sum over samples.
    let mut pos = Array2::zeros((arch.tokens, arch.n));
    for a in 0..trace.samples {
        for t in 0..arch.tokens {
            for i in 0..arch.n {
                pos[(t, i)] += zbar[(a * arch.tokens + t, i)];
            }
        }
    }

    BackParts { stem_u: zbar, pos, blocks: blocks_rev, head_u, head_b }
}

/// Dense per-tensor gradients, in the same canonical order the model visits
/// its tensors.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub tensors: Vec<(ParamGroup, String, Vec<f64>)>,
}

impl GradSet {
    pub fn by_site(&self, site: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|(_, s, _)| s == site).map(|(_, _, v)| v.as_slice())
    }

    /// Mean absolute entry per group.
    pub fn mean_abs_by_group(&self) -> std::collections::BTreeMap<ParamGroup, (f64, usize)> {
        let mut acc: std::collections::BTreeMap<ParamGroup, (f64, usize)> = std::collections::BTreeMap::new();
        for (group, _, vals) in &self.tensors {
            let e = acc.entry(*group).or_insert((0.0, 0));
            e.0 += vals.iter().map(|v| v.abs()).sum::<f64>();
            e.1 += vals.len();
        }
        acc
    }
}

/// Recomputes a head's per-head attention outputs o^h = Ω·v, (H, R, C).
fn attention_outputs(trace: &super::forward::MhsaTrace, samples: usize, tokens: usize) -> Array3<f64> {
    let h_count = trace.q.shape()[0];
    let c = trace.q.shape()[2];
    let rows = samples * tokens;
    let mut o = Array3::zeros((h_count, rows, c));
    for h in 0..h_count {
        for a in 0..samples {
            let base = a * tokens;
            for t in 0..tokens {
                for tp in 0..tokens {
                    let om = trace.omega[(h, base + t, tp)];
                    if om != 0.0 {
                        for cc in 0..c {
                            o[(h, base + t, cc)] += om * trace.v[(h, base + tp, cc)];
                        }
                    }
                }
            }
        }
    }
    o
}

/// Assembles dense gradients from a backward pass.
pub fn materialize(params: &ModelParams, trace: &ForwardTrace, batch: &Batch<f64>, parts: &BackParts) -> GradSet {
    let arch = &params.arch;
    let mut tensors: Vec<(ParamGroup, String, Vec<f64>)> = Vec::new();

    // Stem embedding.
    let emb_group = match arch.modality {
        Modality::Vision => ParamGroup::Patch,
        Modality::Language => ParamGroup::WordEmb,
    };
    let mut emb_grad: Array2<f64> = match batch {
        Batch::Vision(x) => {
            let rows = batch.positions();
            let xs = x.to_shape((rows, arch.n_in)).expect("contiguous batch");
            parts.stem_u.t().dot(&xs) // (n, n_in)
        }
        Batch::Language(ids) => {
            let mut g = Array2::zeros((arch.n, arch.n_in));
            for a in 0..ids.shape()[0] {
                for t in 0..arch.tokens {
                    let id = ids[(a, t)];
                    let r = a * arch.tokens + t;
                    for i in 0..arch.n {
                        g[(i, id)] += parts.stem_u[(r, i)];
                    }
                }
            }
            g
        }
    };
    // Tied language head folds into the same tensor: grad += N·s_lastᵀ·f̄
    // arranged as (n, n_vocab).
    if params.tied() {
        let s_last = &trace.s[params.blocks.len()];
        let head_part = s_last.t().dot(&parts.head_u); // (n, n_out = n_vocab)
        emb_grad += &head_part;
    }
    tensors.push((emb_group, "emb".to_string(), emb_grad.into_raw_vec_and_offset().0));
    tensors.push((ParamGroup::PosEmb, "pos".to_string(), parts.pos.clone().into_raw_vec_and_offset().0));

    for (b, (block, bp)) in params.blocks.iter().zip(&parts.blocks).enumerate() {
        let s_b = &trace.s[b];
        match (block, bp, &trace.blocks[b]) {
            (BlockParams::Mhsa(_), BlockBackParts::Mhsa { qbar, kbar, vbar, gbar }, BlockTrace::Mhsa(t)) => {
                let h_count = qbar.shape()[0];
                // Per-head gradient of a (C, n)-shaped site: b̄_hᵀ·s.
                let per_head = |bar: &Array3<f64>| {
                    let mut flat = Vec::new();
                    for h in 0..h_count {
                        let g = bar.index_axis(Axis(0), h).t().dot(s_b);
                        flat.extend(g.iter().copied());
                    }
                    flat
                };
                tensors.push((ParamGroup::Q, format!("q@{b}"), per_head(qbar)));
                tensors.push((ParamGroup::K, format!("k@{b}"), per_head(kbar)));
                tensors.push((ParamGroup::V, format!("v@{b}"), per_head(vbar)));
                // U: grad_{h,i,c} = Σ_r ḡ_{r,i}·o_{h,r,c}
                let o = attention_outputs(t, trace.samples, trace.tokens);
                let mut flat = Vec::new();
                for h in 0..h_count {
                    let g = gbar.t().dot(&o.index_axis(Axis(0), h)); // (n, C)
                    flat.extend(g.iter().copied());
                }
                tensors.push((ParamGroup::U, format!("u@{b}"), flat));
            }
            (BlockParams::Mlp(_), BlockBackParts::Mlp { wbar, gbar }, BlockTrace::Mlp { w_pre }) => {
                let w_grad = wbar.t().dot(s_b); // (Mn, n)
                let act = w_pre.mapv(|x| arch.activation.eval(x));
                let x_grad = gbar.t().dot(&act); // (n, Mn)
                tensors.push((ParamGroup::W, format!("w@{b}"), w_grad.into_raw_vec_and_offset().0));
                tensors.push((ParamGroup::X, format!("x@{b}"), x_grad.into_raw_vec_and_offset().0));
            }
            _ => unreachable!("trace matches params"),
        }
    }

    match &params.head {
        HeadParams::Vision { .. } => {
            let s_last = &trace.s[params.blocks.len()];
            let w_grad = parts.head_u.t().dot(s_last); // (n_out, n)
            tensors.push((ParamGroup::HeadW, "head_w".to_string(), w_grad.into_raw_vec_and_offset().0));
            tensors.push((
                ParamGroup::HeadB,
                "head_b".to_string(),
                parts.head_b.as_ref().expect("vision head").to_vec(),
            ));
        }
        HeadParams::LanguageTied => {}
        HeadParams::LanguageUntied { .. } => {
            let s_last = &trace.s[params.blocks.len()];
            let g = s_last.t().dot(&parts.head_u); // (n, n_vocab)
            tensors.push((ParamGroup::WordEmb, "head_emb".to_string(), g.into_raw_vec_and_offset().0));
        }
    }

    GradSet { tensors }
}

/// Per-group gradients ∂f/∂θ for each selected output component.
pub fn output_jacobian(
    params: &ModelParams,
    batch: &Batch<f64>,
    selector: &[OutputComponent],
) -> Result<Vec<GradSet>> {
    let arch = &params.arch;
    if selector.len() > 64 {
        return Err(Error::Invalid("output selector limited to 64 components".into()));
    }
    let trace = forward_pass(params, batch)?;
    let mut out = Vec::with_capacity(selector.len());
    for comp in selector {
        let seed = match *comp {
            OutputComponent::Token { sample, token, channel } => {
                OutputSeed::component(trace.samples, trace.tokens, arch.n_out, sample, token, channel)
            }
            OutputComponent::Pooled { sample, channel } => {
                OutputSeed::pooled_component(trace.samples, trace.tokens, arch.n_out, sample, channel)
            }
        };
        let parts = backward(params, &trace, &seed);
        let grads = materialize(params, &trace, batch, &parts);
        for (_, site, vals) in &grads.tensors {
            if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite { block: site.clone(), detail: format!("gradient {bad}") });
            }
        }
        out.push(grads);
    }
    Ok(out)
}

/// Precomputed Gram matrices of the forward activations, shared by every
/// pairwise NTK dot on one initialization.
pub struct SiteGrams {
    /// Input kernel Gram: x·xᵀ for vision, token-equality for language.
    pub stem: Array2<f64>,
    /// s⁽ᵇ⁾·s⁽ᵇ⁾ᵀ per level b = 0..=depth.
    pub s: Vec<Array2<f64>>,
    /// Per block: Σ_h o_h·o_hᵀ (MHSA) or σ(w)·σ(w)ᵀ (MLP).
    pub block_aux: Vec<Array2<f64>>,
}

pub fn site_grams(params: &ModelParams, trace: &ForwardTrace, batch: &Batch<f64>) -> SiteGrams {
    let rows = batch.positions();
    let stem = match batch {
        Batch::Vision(x) => {
            let xs = x.to_shape((rows, params.arch.n_in)).expect("contiguous batch");
            xs.dot(&xs.t())
        }
        Batch::Language(ids) => {
            let tokens = params.arch.tokens;
            Array2::from_shape_fn((rows, rows), |(r1, r2)| {
                let id1 = ids[(r1 / tokens, r1 % tokens)];
                let id2 = ids[(r2 / tokens, r2 % tokens)];
                if id1 == id2 {
                    1.0
                } else {
                    0.0
                }
            })
        }
    };
    let s: Vec<Array2<f64>> = trace.s.iter().map(|s| s.dot(&s.t())).collect();
    let block_aux = trace
        .blocks
        .iter()
        .map(|b| match b {
            BlockTrace::Mhsa(t) => {
                let o = attention_outputs(t, trace.samples, trace.tokens);
                let mut gram = Array2::zeros((rows, rows));
                for h in 0..o.shape()[0] {
                    let oh = o.index_axis(Axis(0), h);
                    gram += &oh.dot(&oh.t());
                }
                gram
            }
            BlockTrace::Mlp { w_pre } => {
                let act = w_pre.mapv(|x| params.arch.activation.eval(x));
                act.dot(&act.t())
            }
        })
        .collect();
    SiteGrams { stem, s, block_aux }
}

/// Raw per-group sums Σ_{μ∈G} ∂f₁/∂θ_μ · ∂f₂/∂θ_μ between two backward
/// passes, plus the tied stem–head cross (contact) term kept separate.
#[derive(Debug, Clone, Default)]
pub struct NtkDot {
    pub by_group: std::collections::BTreeMap<ParamGroup, f64>,
    pub contact: f64,
}

impl NtkDot {
    /// λ-weighted total over groups (contact excluded).
    pub fn weighted_total(&self, lambda: impl Fn(ParamGroup) -> f64) -> f64 {
        self.by_group.iter().map(|(g, v)| lambda(*g) * v).sum()
    }
}

fn hadamard_total(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Pairwise NTK contraction via Gram factorization.
pub fn ntk_dot(
    params: &ModelParams,
    trace: &ForwardTrace,
    batch: &Batch<f64>,
    grams: &SiteGrams,
    p1: &BackParts,
    p2: &BackParts,
) -> NtkDot {
    let arch = &params.arch;
    let depth = params.blocks.len();
    let mut dot = NtkDot::default();
    let mut add = |group: ParamGroup, v: f64| {
        *dot.by_group.entry(group).or_insert(0.0) += v;
    };

    // Stem embedding.
    let stem_gu = p1.stem_u.dot(&p2.stem_u.t());
    let emb_group = match arch.modality {
        Modality::Vision => ParamGroup::Patch,
        Modality::Language => ParamGroup::WordEmb,
    };
    add(emb_group, hadamard_total(&stem_gu, &grams.stem));

    // Positional embedding (materialized, small).
    add(ParamGroup::PosEmb, p1.pos.iter().zip(p2.pos.iter()).map(|(a, b)| a * b).sum());

    for b in 0..depth {
        match (&p1.blocks[b], &p2.blocks[b]) {
            (
                BlockBackParts::Mhsa { qbar: q1, kbar: k1, vbar: v1, gbar: g1 },
                BlockBackParts::Mhsa { qbar: q2, kbar: k2, vbar: v2, gbar: g2 },
            ) => {
                let gram_s = &grams.s[b];
                let heads = q1.shape()[0];
                let acc_site = |b1: &Array3<f64>, b2: &Array3<f64>| {
                    let mut gu = Array2::zeros(gram_s.raw_dim());
                    for h in 0..heads {
                        gu += &b1.index_axis(Axis(0), h).dot(&b2.index_axis(Axis(0), h).t());
                    }
                    hadamard_total(&gu, gram_s)
                };
                add(ParamGroup::Q, acc_site(q1, q2));
                add(ParamGroup::K, acc_site(k1, k2));
                add(ParamGroup::V, acc_site(v1, v2));
                let gu = g1.dot(&g2.t());
                add(ParamGroup::U, hadamard_total(&gu, &grams.block_aux[b]));
            }
            (BlockBackParts::Mlp { wbar: w1, gbar: g1 }, BlockBackParts::Mlp { wbar: w2, gbar: g2 }) => {
                let gram_s = &grams.s[b];
                let gu = w1.dot(&w2.t());
                add(ParamGroup::W, hadamard_total(&gu, gram_s));
                let gx = g1.dot(&g2.t());
                add(ParamGroup::X, hadamard_total(&gx, &grams.block_aux[b]));
            }
            _ => unreachable!("block kinds match"),
        }
    }

    // Head.
    match &params.head {
        HeadParams::Vision { .. } => {
            let gu = p1.head_u.dot(&p2.head_u.t());
            add(ParamGroup::HeadW, hadamard_total(&gu, &grams.s[depth]));
            let b1 = p1.head_b.as_ref().expect("vision");
            let b2 = p2.head_b.as_ref().expect("vision");
            add(ParamGroup::HeadB, b1.dot(b2));
        }
        HeadParams::LanguageTied | HeadParams::LanguageUntied { .. } => {
            let gu = p1.head_u.dot(&p2.head_u.t());
            add(ParamGroup::WordEmb, hadamard_total(&gu, &grams.s[depth]));
            if params.tied() {
                // Contact term: stem gradient of one pass against the head
                // gradient of the other, nonzero only where an input token id
                // coincides with a probed output channel. The recursion drops
                // it, so it is reported separately rather than folded in.
                if let Batch::Language(ids) = batch {
                    let s_last = &trace.s[depth];
                    dot.contact = contact_term(ids, trace.tokens, s_last, &p1.stem_u, &p2.head_u)
                        + contact_term(ids, trace.tokens, s_last, &p2.stem_u, &p1.head_u);
                }
            }
        }
    }

    dot
}

/// Σ_{jk} (stem gradient)₁_{jk}·(head gradient)₂_{jk} for a tied embedding.
fn contact_term(
    ids: &ndarray::Array2<usize>,
    tokens: usize,
    s_last: &Array2<f64>,
    stem_u: &Array2<f64>,
    head_u: &Array2<f64>,
) -> f64 {
    let rows = s_last.shape()[0];
    let mut acc = 0.0;
    for r1 in 0..rows {
        let id = ids[(r1 / tokens, r1 % tokens)];
        for r2 in 0..rows {
            let hu = head_u[(r2, id)];
            if hu != 0.0 {
                acc += hu * stem_u.row(r1).dot(&s_last.row(r2));
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Activation, ArchSpec, BlockKind, Masking, Pooling};
    use crate::lab::forward::forward_pass;
    use crate::lab::params::{init_model, InitDist};
    use crate::plan::{make_plan, ScalingConstants, ScalingStrategy};

    fn arch(modality: Modality, masking: Masking, activation: Activation, pooling: Pooling, tied: bool) -> ArchSpec {
        ArchSpec {
            modality,
            n: 16,
            heads: 4,
            mlp_multiplier: 2,
            tokens: 4,
            n_in: if modality == Modality::Vision { 6 } else { 9 },
            n_out: if modality == Modality::Vision { 3 } else { 9 },
            blocks: vec![BlockKind::Mhsa, BlockKind::Mlp],
            masking,
            eps_ln: 1e-6,
            activation,
            pooling,
            weight_tying: tied,
        }
    }

    fn model(a: &ArchSpec, seed: u64) -> ModelParams {
        let s = ScalingStrategy::neural_tangent();
        let plan = make_plan(a, &s, &ScalingConstants::for_strategy(&s)).unwrap();
        init_model(a, &plan, seed, InitDist::Normal).unwrap()
    }

    fn batch_for(a: &ArchSpec, seed: u64) -> Batch<f64> {
        match a.modality {
            Modality::Vision => Batch::random_vision(2, a.tokens, a.n_in, seed),
            Modality::Language => Batch::random_language(2, a.tokens, a.n_in, seed),
        }
    }

    fn component_value(params: &ModelParams, batch: &Batch<f64>, comp: OutputComponent) -> f64 {
        let trace = forward_pass(params, batch).unwrap();
        match comp {
            OutputComponent::Token { sample, token, channel } => trace.output[(sample * trace.tokens + token, channel)],
            OutputComponent::Pooled { sample, channel } => trace.pooled.as_ref().unwrap()[(sample, channel)],
        }
    }

    /// Central finite differences against the reverse-mode gradient for every
    /// parameter component; returns the worst relative error.
    fn fd_max_rel_err(a: &ArchSpec, comp: OutputComponent, seed: u64) -> f64 {
        let params = model(a, seed);
        let batch = batch_for(a, seed + 100);
        let grads = output_jacobian(&params, &batch, &[comp]).unwrap().remove(0);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let n_tensors = grads.tensors.len();
        for site_idx in 0..n_tensors {
            let len = grads.tensors[site_idx].2.len();
            for elem in 0..len {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let mut bump = |p: &mut ModelParams, delta: f64| {
                    let mut idx = 0usize;
                    p.for_each_tensor_mut(|_, values| {
                        if idx == site_idx {
                            values[elem] += delta;
                        }
                        idx += 1;
                    });
                };
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let fd = (component_value(&plus, &batch, comp) - component_value(&minus, &batch, comp)) / (2.0 * h);
                let an = grads.tensors[site_idx].2[elem];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                worst = worst.max((an - fd).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn jacobian_matches_finite_differences_vision() {
        let a = arch(Modality::Vision, Masking::Bidirectional, Activation::Gelu, Pooling::None, false);
        let err = fd_max_rel_err(&a, OutputComponent::Token { sample: 1, token: 2, channel: 1 }, 7);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn jacobian_matches_finite_differences_language_masked_tied() {
        let a = arch(Modality::Language, Masking::Masked, Activation::Gelu, Pooling::None, true);
        let err = fd_max_rel_err(&a, OutputComponent::Token { sample: 0, token: 3, channel: 4 }, 11);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn jacobian_matches_finite_differences_language_untied() {
        let a = arch(Modality::Language, Masking::Masked, Activation::Tanh, Pooling::None, false);
        let err = fd_max_rel_err(&a, OutputComponent::Token { sample: 1, token: 1, channel: 0 }, 13);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn jacobian_matches_finite_differences_pooled_relu() {
        let a = arch(Modality::Vision, Masking::Bidirectional, Activation::Relu, Pooling::TokenMean, false);
        let err = fd_max_rel_err(&a, OutputComponent::Pooled { sample: 0, channel: 2 }, 17);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn depth_zero_linear_head_bias_gradient_is_identity() {
        // ∂f_{t,i}/∂b_j = δ_ij for a vision head regardless of the bulk.
        let a = arch(Modality::Vision, Masking::Bidirectional, Activation::Gelu, Pooling::None, false);
        let params = model(&a, 23);
        let batch = batch_for(&a, 5);
        let comp = OutputComponent::Token { sample: 0, token: 1, channel: 2 };
        let grads = output_jacobian(&params, &batch, &[comp]).unwrap().remove(0);
        let head_b = grads.by_site("head_b").unwrap();
        for (j, &g) in head_b.iter().enumerate() {
            let expected = if j == 2 { 1.0 } else { 0.0 };
            assert_eq!(g, expected);
        }
    }

    #[test]
    fn zero_vision_input_kills_patch_gradient_not_pos() {
        let a = arch(Modality::Vision, Masking::Bidirectional, Activation::Gelu, Pooling::None, false);
        let params = model(&a, 29);
        let x = ndarray::Array3::zeros((2, a.tokens, a.n_in));
        let batch = Batch::Vision(x);
        let comp = OutputComponent::Token { sample: 0, token: 0, channel: 0 };
        let grads = output_jacobian(&params, &batch, &[comp]).unwrap().remove(0);
        assert!(grads.by_site("emb").unwrap().iter().all(|&g| g == 0.0));
        assert!(grads.by_site("pos").unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn factored_ntk_dot_matches_dense_dot() {
        for (modality, tied) in [(Modality::Vision, false), (Modality::Language, true), (Modality::Language, false)] {
            let a = arch(
                modality,
                if modality == Modality::Vision { Masking::Bidirectional } else { Masking::Masked },
                Activation::Gelu,
                Pooling::None,
                tied,
            );
            let params = model(&a, 31);
            let batch = batch_for(&a, 37);
            let trace = forward_pass(&params, &batch).unwrap();
            let grams = site_grams(&params, &trace, &batch);

            let c1 = OutputSeed::component(trace.samples, trace.tokens, a.n_out, 0, 1, 0);
            let c2 = OutputSeed::component(trace.samples, trace.tokens, a.n_out, 1, 2, 0);
            let p1 = backward(&params, &trace, &c1);
            let p2 = backward(&params, &trace, &c2);
            let dot = ntk_dot(&params, &trace, &batch, &grams, &p1, &p2);

            let g1 = materialize(&params, &trace, &batch, &p1);
            let g2 = materialize(&params, &trace, &batch, &p2);
            let mut dense: std::collections::BTreeMap<ParamGroup, f64> = std::collections::BTreeMap::new();
            for ((grp1, site1, v1), (grp2, site2, v2)) in g1.tensors.iter().zip(&g2.tensors) {
                assert_eq!(grp1, grp2);
                assert_eq!(site1, site2);
                *dense.entry(*grp1).or_insert(0.0) += v1.iter().zip(v2).map(|(a, b)| a * b).sum::<f64>();
            }
            for (grp, &v) in &dense {
                // For the tied embedding the dense tensor includes the
                // stem–head cross term that the factored dot flags separately.
                let factored = dot.by_group.get(grp).copied().unwrap_or(0.0)
                    + if *grp == ParamGroup::WordEmb && tied { dot.contact } else { 0.0 };
                let scale = v.abs().max(1e-12);
                assert!(
                    (factored - v).abs() / scale < 1e-10,
                    "{modality:?} tied={tied} group {grp:?}: factored {factored} vs dense {v}"
                );
            }
        }
    }

    #[test]
    fn jacobian_is_deterministic() {
        let a = arch(Modality::Vision, Masking::Bidirectional, Activation::Gelu, Pooling::None, false);
        let params = model(&a, 41);
        let batch = batch_for(&a, 43);
        let comp = OutputComponent::Token { sample: 0, token: 0, channel: 0 };
        let g1 = output_jacobian(&params, &batch, &[comp]).unwrap();
        let g2 = output_jacobian(&params, &batch, &[comp]).unwrap();
        for (a_, b_) in g1[0].tensors.iter().zip(&g2[0].tensors) {
            assert_eq!(a_.2, b_.2);
        }
    }
}
