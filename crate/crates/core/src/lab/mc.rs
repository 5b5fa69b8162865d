//! Monte-Carlo estimators over random initializations: empirical kernels and
//! NTKs, gradient magnitudes, one-step update sizes, and the layer-norm
//! fluctuation statistics.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::arch::{ArchSpec, BlockKind, Modality, ParamGroup};
use crate::error::{Error, Result};
use crate::inputs::Batch;
use crate::plan::{Optimizer, ScalingPlan};
use crate::rng::derive;

use super::backward::{backward, materialize, ntk_dot, site_grams, BackParts, OutputSeed};
use super::forward::{forward_pass, BlockTrace, ForwardTrace};
use super::params::{init_model, InitDist};

/// A Monte-Carlo estimate with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct McSummary {
    pub estimate: Array2<f64>,
    pub stderr: Array2<f64>,
    pub n_inits: usize,
}

/// Streaming mean/stderr accumulator over equally-shaped matrices.
struct MatAcc {
    sum: Array2<f64>,
    sumsq: Array2<f64>,
    n: usize,
}

impl MatAcc {
    fn new(rows: usize, cols: usize) -> Self {
        MatAcc { sum: Array2::zeros((rows, cols)), sumsq: Array2::zeros((rows, cols)), n: 0 }
    }

    fn push(&mut self, m: &Array2<f64>) {
        self.sum += m;
        self.sumsq += &m.mapv(|v| v * v);
        self.n += 1;
    }

    fn finalize(&self) -> McSummary {
        let nf = self.n as f64;
        let estimate = &self.sum / nf;
        let stderr = ndarray::Zip::from(&self.sumsq)
            .and(&estimate)
            .map_collect(|&sq, &m| (((sq / nf - m * m).max(0.0)) / (nf - 1.0).max(1.0)).sqrt());
        McSummary { estimate, stderr, n_inits: self.n }
    }
}

struct ScalarAcc {
    sum: f64,
    sumsq: f64,
    n: usize,
}

impl ScalarAcc {
    fn new() -> Self {
        ScalarAcc { sum: 0.0, sumsq: 0.0, n: 0 }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sumsq += v * v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    fn stderr(&self) -> f64 {
        let nf = self.n as f64;
        let m = self.mean();
        (((self.sumsq / nf - m * m).max(0.0)) / (nf - 1.0).max(1.0)).sqrt()
    }
}

/// Block values at level ℓ = 1…L: preactivations for 1…L−1, head outputs at L.
fn level_values<'t>(trace: &'t ForwardTrace, level: usize) -> &'t Array2<f64> {
    if level <= trace.z.len() {
        &trace.z[level - 1]
    } else {
        &trace.output
    }
}

/// Empirical per-block kernels Ĝ⁽ℓ⁾ (channel- and init-averaged) together
/// with the cross-channel covariance that the theory predicts to vanish.
#[derive(Debug)]
pub struct KernelEstimate {
    /// One entry per level ℓ = 1…L.
    pub per_block: Vec<McSummary>,
    /// Same levels, statistic (1/(w−1))·Σ_i z_{p,i}·z_{q,i+1}.
    pub cross_channel: Vec<McSummary>,
}

pub fn empirical_kernel(
    arch: &ArchSpec,
    plan: &ScalingPlan<f64>,
    batch: &Batch<f64>,
    n_inits: usize,
    seed: u64,
) -> Result<KernelEstimate> {
    if n_inits < 2 {
        return Err(Error::Invalid("need at least two initializations".into()));
    }
    let rows = batch.positions();
    let levels = arch.total_blocks();
    let mut accs: Vec<MatAcc> = (0..levels).map(|_| MatAcc::new(rows, rows)).collect();
    let mut cross: Vec<MatAcc> = (0..levels).map(|_| MatAcc::new(rows, rows)).collect();

    for i in 0..n_inits {
        let params = init_model(arch, plan, derive(seed, "mc/kernel-init", i as u64), InitDist::Normal)?;
        let trace = forward_pass(&params, batch)?;
        for level in 1..=levels {
            let z = level_values(&trace, level);
            let width = z.shape()[1];
            let g = z.dot(&z.t()) / width as f64;
            accs[level - 1].push(&g);
            let zl = z.slice(ndarray::s![.., ..width - 1]);
            let zr = z.slice(ndarray::s![.., 1..]);
            let c = zl.dot(&zr.t()) / (width - 1) as f64;
            cross[level - 1].push(&c);
        }
    }

    Ok(KernelEstimate {
        per_block: accs.iter().map(MatAcc::finalize).collect(),
        cross_channel: cross.iter().map(MatAcc::finalize).collect(),
    })
}

/// Empirical NTK at the outputs, channel-averaged, with per-group partial
/// sums, the cross-channel NTK (predicted zero), and the tied-embedding
/// contact term (excluded from the totals and flagged separately).
#[derive(Debug)]
pub struct NtkEstimate {
    pub total: McSummary,
    pub by_group: BTreeMap<ParamGroup, McSummary>,
    pub cross_channel: Option<McSummary>,
    pub contact: Option<McSummary>,
    pub channels: Vec<usize>,
}

pub fn empirical_ntk(
    arch: &ArchSpec,
    plan: &ScalingPlan<f64>,
    batch: &Batch<f64>,
    n_inits: usize,
    seed: u64,
    channels: &[usize],
) -> Result<NtkEstimate> {
    if n_inits < 2 || channels.is_empty() {
        return Err(Error::Invalid("need at least two initializations and one channel".into()));
    }
    if let Some(&bad) = channels.iter().find(|&&c| c >= arch.n_out) {
        return Err(Error::Invalid(format!("channel {bad} outside n_out={}", arch.n_out)));
    }
    let rows = batch.positions();
    let groups = ParamGroup::for_modality(arch.modality);
    let mut total_acc = MatAcc::new(rows, rows);
    let mut group_accs: BTreeMap<ParamGroup, MatAcc> =
        groups.iter().map(|&g| (g, MatAcc::new(rows, rows))).collect();
    let mut cross_acc = if channels.len() >= 2 { Some(MatAcc::new(rows, rows)) } else { None };
    let mut contact_acc = if arch.modality == Modality::Language { Some(MatAcc::new(rows, rows)) } else { None };

    for i in 0..n_inits {
        let params = init_model(arch, plan, derive(seed, "mc/ntk-init", i as u64), InitDist::Normal)?;
        let trace = forward_pass(&params, batch)?;
        let grams = site_grams(&params, &trace, batch);

        // One backward pass per (channel, position).
        let mut parts: Vec<Vec<BackParts>> = Vec::with_capacity(channels.len());
        for &ch in channels {
            let mut per_pos = Vec::with_capacity(rows);
            for r in 0..rows {
                let seed_vec = OutputSeed::component(trace.samples, trace.tokens, arch.n_out, r / arch.tokens, r % arch.tokens, ch);
                per_pos.push(backward(&params, &trace, &seed_vec));
            }
            parts.push(per_pos);
        }

        let mut total = Array2::zeros((rows, rows));
        let mut by_group: BTreeMap<ParamGroup, Array2<f64>> =
            groups.iter().map(|&g| (g, Array2::zeros((rows, rows)))).collect();
        let mut contact = Array2::zeros((rows, rows));
        for (ci, _) in channels.iter().enumerate() {
            for r1 in 0..rows {
                for r2 in r1..rows {
                    let dot = ntk_dot(&params, &trace, batch, &grams, &parts[ci][r1], &parts[ci][r2]);
                    let mut tot = 0.0;
                    for (g, raw) in &dot.by_group {
                        let v = plan.sgd_factor(*g) * raw;
                        tot += v;
                        let m = by_group.get_mut(g).expect("group present");
                        m[(r1, r2)] += v;
                        if r1 != r2 {
                            m[(r2, r1)] += v;
                        }
                    }
                    total[(r1, r2)] += tot;
                    if r1 != r2 {
                        total[(r2, r1)] += tot;
                    }
                    let cw = plan.sgd_factor(ParamGroup::WordEmb) * dot.contact;
                    contact[(r1, r2)] += cw;
                    if r1 != r2 {
                        contact[(r2, r1)] += cw;
                    }
                }
            }
        }
        let ch_norm = 1.0 / channels.len() as f64;
        total *= ch_norm;
        total_acc.push(&total);
        for (g, m) in by_group {
            group_accs.get_mut(&g).expect("group present").push(&(m * ch_norm));
        }
        if let Some(acc) = contact_acc.as_mut() {
            contact *= ch_norm;
            acc.push(&contact);
        }

        if let Some(acc) = cross_acc.as_mut() {
            let mut cross = Array2::zeros((rows, rows));
            for r1 in 0..rows {
                for r2 in 0..rows {
                    let dot = ntk_dot(&params, &trace, batch, &grams, &parts[0][r1], &parts[1][r2]);
                    cross[(r1, r2)] = dot.by_group.iter().map(|(g, v)| plan.sgd_factor(*g) * v).sum();
                }
            }
            acc.push(&cross);
        }
    }

    Ok(NtkEstimate {
        total: total_acc.finalize(),
        by_group: group_accs.iter().map(|(g, a)| (*g, a.finalize())).collect(),
        cross_channel: cross_acc.map(|a| a.finalize()),
        contact: contact_acc.map(|a| a.finalize()),
        channels: channels.to_vec(),
    })
}

/// Per-group mean |∂L/∂θ| under the uniform surrogate loss.
#[derive(Debug, Clone)]
pub struct GradMagnitudes {
    pub mean_abs: BTreeMap<ParamGroup, f64>,
    pub stderr: BTreeMap<ParamGroup, f64>,
    pub n_inits: usize,
}

pub fn grad_magnitude_stats(
    arch: &ArchSpec,
    plan: &ScalingPlan<f64>,
    batch: &Batch<f64>,
    n_inits: usize,
    seed: u64,
) -> Result<GradMagnitudes> {
    if n_inits < 2 {
        return Err(Error::Invalid("need at least two initializations".into()));
    }
    let rows = batch.positions();
    let scale = 1.0 / (rows * arch.n_out) as f64;
    let mut accs: BTreeMap<ParamGroup, ScalarAcc> = BTreeMap::new();
    for i in 0..n_inits {
        let params = init_model(arch, plan, derive(seed, "mc/grad-init", i as u64), InitDist::Normal)?;
        let trace = forward_pass(&params, batch)?;
        let seed_vec = OutputSeed::uniform(trace.samples, trace.tokens, arch.n_out, scale);
        let parts = backward(&params, &trace, &seed_vec);
        let grads = materialize(&params, &trace, batch, &parts);
        for (g, (abs_sum, count)) in grads.mean_abs_by_group() {
            accs.entry(g).or_insert_with(ScalarAcc::new).push(abs_sum / count as f64);
        }
    }
    Ok(GradMagnitudes {
        mean_abs: accs.iter().map(|(g, a)| (*g, a.mean())).collect(),
        stderr: accs.iter().map(|(g, a)| (*g, a.stderr())).collect(),
        n_inits,
    })
}

/// Which relative learning-rate factors a probe uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrFactors {
    /// The plan's per-group factors.
    Plan,
    /// Uniform factors of 1 (the standard baseline).
    Uniform,
}

/// AdamW hyperparameters for the one-step probe (t = 1, bias-corrected).
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub wd: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, wd: 0.0 }
    }
}

/// Mean |Δf| after exactly one optimizer step from initialization.
#[derive(Debug, Clone)]
pub struct ProbeStats {
    pub mean_abs_delta: f64,
    pub stderr: f64,
    pub lr: f64,
    pub n_inits: usize,
}

pub fn one_step_probe(
    arch: &ArchSpec,
    plan: &ScalingPlan<f64>,
    optimizer: Optimizer,
    factors: LrFactors,
    lr: f64,
    batch: &Batch<f64>,
    n_inits: usize,
    seed: u64,
    adamw: &AdamWConfig,
) -> Result<ProbeStats> {
    if n_inits < 2 {
        return Err(Error::Invalid("need at least two initializations".into()));
    }
    let rows = batch.positions();
    let scale = 1.0 / (rows * arch.n_out) as f64;
    let mut acc = ScalarAcc::new();
    for i in 0..n_inits {
        let params = init_model(arch, plan, derive(seed, "mc/probe-init", i as u64), InitDist::Normal)?;
        let trace = forward_pass(&params, batch)?;
        let seed_vec = OutputSeed::uniform(trace.samples, trace.tokens, arch.n_out, scale);
        let parts = backward(&params, &trace, &seed_vec);
        let grads = materialize(&params, &trace, batch, &parts);

        let mut updated = params.clone();
        let mut idx = 0usize;
        updated.for_each_tensor_mut(|group, values| {
            let (ggroup, _, gvals) = &grads.tensors[idx];
            assert_eq!(*ggroup, group, "gradient tensors out of order");
            let factor = match factors {
                LrFactors::Plan => match optimizer {
                    Optimizer::Sgd => plan.sgd_factor(group),
                    Optimizer::AdamW => plan.adamw_factor(group),
                },
                LrFactors::Uniform => 1.0,
            };
            match optimizer {
                Optimizer::Sgd => {
                    for (theta, g) in values.iter_mut().zip(gvals) {
                        *theta -= lr * factor * g;
                    }
                }
                Optimizer::AdamW => {
                    // At t = 1 with bias correction, v̂ = g and û = g².
                    for (theta, g) in values.iter_mut().zip(gvals) {
                        *theta = (1.0 - lr * adamw.wd) * *theta - factor * lr * g / (g.abs() + adamw.eps);
                    }
                }
            }
            idx += 1;
        });
        assert_eq!(idx, grads.tensors.len(), "every gradient tensor consumed");

        let trace1 = forward_pass(&updated, batch)?;
        let delta = match (&trace.pooled, &trace1.pooled) {
            (Some(p0), Some(p1)) => (p1 - p0).mapv(f64::abs).mean().expect("nonempty"),
            _ => (&trace1.output - &trace.output).mapv(f64::abs).mean().expect("nonempty"),
        };
        if !delta.is_finite() {
            return Err(Error::NonFinite { block: "one-step probe".to_string(), detail: format!("|Δf| = {delta}") });
        }
        acc.push(delta);
    }
    Ok(ProbeStats { mean_abs_delta: acc.mean(), stderr: acc.stderr(), lr, n_inits })
}

/// Exact per-initialization layer-norm Jacobian contraction
/// (1/n)·Σ_{jk} ∂s_j⁽ᵖ⁾/∂z_k⁽ᵖ⁾ · ∂s_j⁽ᑫ⁾/∂z_k⁽ᑫ⁾ at a given level,
/// averaged over initializations. Its infinite-width limit is
/// 1/(√(G_pp+ε)·√(G_qq+ε)).
pub fn ln_backward_empirical(
    arch: &ArchSpec,
    plan: &ScalingPlan<f64>,
    batch: &Batch<f64>,
    level: usize,
    n_inits: usize,
    seed: u64,
) -> Result<McSummary> {
    if level == 0 || level > arch.depth() + 1 {
        return Err(Error::Invalid(format!("level {level} has no layer norm")));
    }
    let rows = batch.positions();
    let n = arch.n as f64;
    let mut acc = MatAcc::new(rows, rows);
    for i in 0..n_inits {
        let params = init_model(arch, plan, derive(seed, "mc/lnback-init", i as u64), InitDist::Normal)?;
        let trace = forward_pass(&params, batch)?;
        let s = &trace.s[level - 1];
        let inv = &trace.ln_inv_std[level - 1];
        let mut c = Array2::zeros((rows, rows));
        for p in 0..rows {
            for q in p..rows {
                let s2p = s.row(p).dot(&s.row(p));
                let s2q = s.row(q).dot(&s.row(q));
                let spq = s.row(p).dot(&s.row(q));
                let mp: f64 = s.row(p).sum();
                let mq: f64 = s.row(q).sum();
                let bracket = 1.0 - 1.0 / n - (s2p + s2q) / (n * n)
                    + (mp * mp + mq * mq) / (n * n * n)
                    + spq * spq / (n * n * n);
                let v = inv[p] * inv[q] * bracket;
                c[(p, q)] = v;
                c[(q, p)] = v;
            }
        }
        acc.push(&c);
    }
    Ok(acc.finalize())
}

/// Moments of the layer-norm fluctuation variables at a given level:
/// ΔĜ = (1/n)Σ z² − G_theory and ∇Ĝ = ((1/n)Σ z)², per position.
#[derive(Debug, Clone)]
pub struct FluctuationMoments {
    /// Rows: positions. Columns: E[ΔĜ], E[∇Ĝ], E[ΔĜ²], E[ΔĜ·∇Ĝ].
    pub moments: Array2<f64>,
    pub stderr: Array2<f64>,
    pub n_inits: usize,
}

pub fn norm_fluctuation_moments(
    arch: &ArchSpec,
    plan: &ScalingPlan<f64>,
    batch: &Batch<f64>,
    level: usize,
    g_theory_diag: &[f64],
    n_inits: usize,
    seed: u64,
) -> Result<FluctuationMoments> {
    let rows = batch.positions();
    if g_theory_diag.len() != rows {
        return Err(Error::ShapeMismatch("theory diagonal length".into()));
    }
    let n = arch.n as f64;
    let mut acc = MatAcc::new(rows, 4);
    for i in 0..n_inits {
        let params = init_model(arch, plan, derive(seed, "mc/fluct-init", i as u64), InitDist::Normal)?;
        let trace = forward_pass(&params, batch)?;
        let z = level_values(&trace, level);
        let mut m = Array2::zeros((rows, 4));
        for p in 0..rows {
            let row = z.row(p);
            let delta = row.dot(&row) / n - g_theory_diag[p];
            let meansq = {
                let mean = row.sum() / n;
                mean * mean
            };
            m[(p, 0)] = delta;
            m[(p, 1)] = meansq;
            m[(p, 2)] = delta * delta;
            m[(p, 3)] = delta * meansq;
        }
        acc.push(&m);
    }
    let s = acc.finalize();
    Ok(FluctuationMoments { moments: s.estimate, stderr: s.stderr, n_inits })
}

/// Raw query–key logit samples from the first MHSA block, (n_inits, H, |D|·T²),
/// flat index (α·T + t)·T + t′.
pub fn qk_logit_samples(
    arch: &ArchSpec,
    plan: &ScalingPlan<f64>,
    batch: &Batch<f64>,
    n_inits: usize,
    seed: u64,
) -> Result<Array3<f64>> {
    let first_mhsa = arch
        .blocks
        .iter()
        .position(|b| *b == BlockKind::Mhsa)
        .ok_or_else(|| Error::Invalid("architecture has no MHSA block".into()))?;
    let tokens = arch.tokens;
    let dim = batch.samples() * tokens * tokens;
    let mut out = Array3::zeros((n_inits, arch.heads, dim));
    for i in 0..n_inits {
        let params = init_model(arch, plan, derive(seed, "mc/qk-init", i as u64), InitDist::Normal)?;
        let trace = forward_pass(&params, batch)?;
        let BlockTrace::Mhsa(t) = &trace.blocks[first_mhsa] else {
            return Err(Error::Invalid("first MHSA block mismatch".into()));
        };
        for h in 0..arch.heads {
            for a in 0..batch.samples() {
                for tk in 0..tokens {
                    for tp in 0..tokens {
                        out[(i, h, (a * tokens + tk) * tokens + tp)] = t.wtilde[(h, a * tokens + tk, tp)];
                    }
                }
            }
        }
    }
    Ok(out)
}
