//! The verification suite: each check compares finite-width Monte-Carlo
//! estimates against the infinite-width theory at a stated tolerance and
//! returns pass/fail/inconclusive.
//!
//! A check reports `Inconclusive` when its Monte-Carlo standard error is too
//! large to resolve the quantity under test, rather than failing.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use tangents::arch::{Activation, ArchSpec, BlockKind, Masking, Modality, ParamGroup, Pooling};
use tangents::gaussian::{qk_covariance, wick_even_moment};
use tangents::inputs::Batch;
use tangents::kernel::{propagate_kernels, PropagationSettings};
use tangents::lab::{
    empirical_kernel, empirical_ntk, forward_pass, grad_magnitude_stats, init_model, ln_backward_empirical,
    norm_fluctuation_moments, one_step_probe, output_jacobian, qk_logit_samples, AdamWConfig, InitDist, LrFactors,
    OutputComponent,
};
use tangents::ntk::propagate_ntk_with_kernels;
use tangents::plan::{make_plan, Optimizer, ScalingConstants, ScalingPlan, ScalingStrategy, Symbolic};
use tangents::rng::derive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass => write!(f, "pass"),
            Verdict::Fail => write!(f, "fail"),
            Verdict::Inconclusive => write!(f, "inconclusive"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub stderr: Option<f64>,
    pub verdict: Verdict,
    pub details: String,
}

impl CheckResult {
    fn pass_if(name: &str, value: f64, tolerance: f64, stderr: Option<f64>, details: String) -> Self {
        let verdict = if value <= tolerance { Verdict::Pass } else { Verdict::Fail };
        CheckResult { name: name.to_string(), value, tolerance, stderr, verdict, details }
    }

    fn inconclusive(name: &str, value: f64, tolerance: f64, details: String) -> Self {
        CheckResult { name: name.to_string(), value, tolerance, stderr: None, verdict: Verdict::Inconclusive, details }
    }
}

/// Sizes and seeds for one verification run. The architecture of each check
/// is pinned by the check itself; these control only the statistical effort.
#[derive(Debug, Clone)]
pub struct CheckParams {
    pub widths: Vec<usize>,
    pub kernel_inits: usize,
    pub ntk_inits: usize,
    pub diag_inits: usize,
    pub ln_inits: usize,
    pub fluct_inits: usize,
    pub gauss_inits: usize,
    pub grad_inits: usize,
    pub probe_inits: usize,
    pub moment_samples: usize,
    pub seed: u64,
    pub channels: Vec<usize>,
}

impl CheckParams {
    pub fn from_verify(v: &crate::config::VerifyConfig) -> Self {
        CheckParams {
            widths: v.widths.clone(),
            kernel_inits: v.n_inits.max(64),
            ntk_inits: v.n_inits.max(32),
            diag_inits: v.n_inits.max(32),
            ln_inits: v.n_inits.clamp(32, 192),
            fluct_inits: v.fluctuation_inits,
            gauss_inits: v.gaussianity_inits,
            grad_inits: v.n_inits.clamp(16, 64),
            probe_inits: v.n_inits.clamp(8, 32),
            moment_samples: 1 << 16,
            seed: v.seed,
            channels: v.channels.clone(),
        }
    }

    /// The statistical effort pinned by the acceptance criteria.
    pub fn acceptance() -> Self {
        CheckParams {
            widths: vec![128, 256, 512],
            kernel_inits: 512,
            ntk_inits: 160,
            diag_inits: 96,
            ln_inits: 96,
            fluct_inits: 12_288,
            gauss_inits: 1536,
            grad_inits: 32,
            probe_inits: 12,
            moment_samples: 1 << 17,
            seed: 7,
            channels: vec![0, 1],
        }
    }

    fn lo(&self) -> usize {
        *self.widths.first().expect("widths validated nonempty")
    }

    fn hi(&self) -> usize {
        *self.widths.last().expect("widths validated nonempty")
    }
}

/// Rows for the per-group gradient-magnitude table (grads.csv).
#[derive(Debug, Clone, Serialize)]
pub struct GradRow {
    pub group: String,
    pub width: usize,
    pub mean_abs_grad: f64,
    pub stderr: f64,
}

/// Rows for the one-step probe table (probe.csv).
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub optimizer: String,
    pub factors: String,
    pub width: usize,
    pub lr: f64,
    pub mean_abs_delta: f64,
    pub stderr: f64,
}

#[derive(Debug, Default)]
pub struct VerifyOutputs {
    pub checks: Vec<CheckResult>,
    pub grad_rows: Vec<GradRow>,
    pub probe_rows: Vec<ProbeRow>,
}

fn ntk_plan(arch: &ArchSpec) -> ScalingPlan<f64> {
    let strategy = ScalingStrategy::neural_tangent();
    make_plan(arch, &strategy, &ScalingConstants::for_strategy(&strategy)).expect("valid plan")
}

fn gate_arch(modality: Modality) -> ArchSpec {
    ArchSpec {
        modality,
        n: 16,
        heads: 4,
        mlp_multiplier: 2,
        tokens: 4,
        n_in: if modality == Modality::Vision { 6 } else { 11 },
        n_out: if modality == Modality::Vision { 3 } else { 11 },
        blocks: vec![BlockKind::Mhsa, BlockKind::Mlp],
        masking: if modality == Modality::Vision { Masking::Bidirectional } else { Masking::Masked },
        eps_ln: 1e-6,
        activation: Activation::Gelu,
        pooling: Pooling::None,
        weight_tying: modality == Modality::Language,
    }
}

fn gate_batch(arch: &ArchSpec, seed: u64) -> Batch<f64> {
    match arch.modality {
        Modality::Vision => Batch::random_vision(2, arch.tokens, arch.n_in, seed),
        Modality::Language => Batch::random_language(2, arch.tokens, arch.n_in, seed),
    }
}

/// Criterion 1 — reverse-mode Jacobians vs central finite differences on a
/// depth-2, n=16, T=4 model, all parameter groups, both modalities.
pub fn check_gradient_gate(params: &CheckParams) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut seen: Vec<ParamGroup> = Vec::new();
    let mut details = String::new();
    for modality in [Modality::Vision, Modality::Language] {
        let arch = gate_arch(modality);
        let plan = ntk_plan(&arch);
        let model = match init_model(&arch, &plan, derive(params.seed, "gate", 0), InitDist::Normal) {
            Ok(m) => m,
            Err(e) => return CheckResult::pass_if("gradient_gate", f64::INFINITY, 1e-6, None, format!("init failed: {e}")),
        };
        let batch = gate_batch(&arch, derive(params.seed, "gate-batch", 1));
        let comp = OutputComponent::Token { sample: 1, token: 2, channel: 1 };
        let grads = match output_jacobian(&model, &batch, &[comp]) {
            Ok(g) => g.into_iter().next().expect("one component"),
            Err(e) => return CheckResult::pass_if("gradient_gate", f64::INFINITY, 1e-6, None, format!("jacobian failed: {e}")),
        };
        let h = 1e-5;
        let mut modality_worst: f64 = 0.0;
        for site_idx in 0..grads.tensors.len() {
            let (group, _, analytic) = &grads.tensors[site_idx];
            if !seen.contains(group) {
                seen.push(*group);
            }
            for elem in 0..analytic.len() {
                let eval = |delta: f64| {
                    let mut perturbed = model.clone();
                    let mut idx = 0usize;
                    perturbed.for_each_tensor_mut(|_, values| {
                        if idx == site_idx {
                            values[elem] += delta;
                        }
                        idx += 1;
                    });
                    let trace = forward_pass(&perturbed, &batch).expect("finite forward");
                    trace.output[(1 * arch.tokens + 2, 1)]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic[elem];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
                modality_worst = modality_worst.max(rel);
            }
        }
        details.push_str(&format!("{modality:?}: max rel err {modality_worst:.3e}; "));
        worst = worst.max(modality_worst);
    }
    details.push_str(&format!("groups covered: {}", seen.len()));
    let mut result = CheckResult::pass_if("gradient_gate", worst, 1e-6, None, details);
    if seen.len() != ParamGroup::ALL.len() {
        result.verdict = Verdict::Fail;
        result.details.push_str(" (missing groups)");
    }
    result
}

fn convergence_arch(n: usize) -> ArchSpec {
    ArchSpec {
        modality: Modality::Vision,
        n,
        heads: 4,
        mlp_multiplier: 2,
        tokens: 3,
        n_in: 16,
        n_out: 8,
        blocks: vec![BlockKind::Mhsa, BlockKind::Mlp, BlockKind::Mhsa],
        masking: Masking::Bidirectional,
        eps_ln: 1e-6,
        activation: Activation::Gelu,
        pooling: Pooling::None,
        weight_tying: false,
    }
}

/// Criterion 2 — forward-kernel convergence: per-pair deviation from theory
/// at the largest width is at most `2.4·(n_lo/n_hi)` times its value at the
/// smallest width (0.6 for the pinned 128→512 pair, expecting ~0.25 from
/// O(1/n)). Pairs whose deviation at the small width is lost in Monte-Carlo
/// noise are skipped as unresolvable.
pub fn check_forward_kernel_convergence(params: &CheckParams) -> CheckResult {
    let (lo, hi) = (params.lo(), params.hi());
    let tolerance = 2.4 * lo as f64 / hi as f64;
    let batch = Batch::random_vision(2, 3, 16, derive(params.seed, "conv-batch", 0));
    let settings = PropagationSettings { moment_samples: params.moment_samples, quad_order: 64, seed: params.seed };

    let arch_lo = convergence_arch(lo);
    let theory = match propagate_kernels(&arch_lo, &ntk_plan(&arch_lo), &batch, &settings) {
        Ok(t) => t,
        Err(e) => return CheckResult::pass_if("forward_kernel_convergence", f64::INFINITY, tolerance, None, e.to_string()),
    };

    let run = |n: usize| {
        let arch = convergence_arch(n);
        empirical_kernel(&arch, &ntk_plan(&arch), &batch, params.kernel_inits, derive(params.seed, "conv", n as u64))
    };
    let (emp_lo, emp_hi) = match (run(lo), run(hi)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return CheckResult::pass_if("forward_kernel_convergence", f64::INFINITY, tolerance, None, "estimation failed".into()),
    };

    let mut worst_ratio: f64 = 0.0;
    let mut resolved = 0usize;
    let mut skipped = 0usize;
    let mut stderr_ok = true;
    // Bulk blocks only: the stem is exact and carries no 1/n correction.
    for level in 2..arch_lo.total_blocks() {
        let th = &theory.blocks[level];
        let e_lo = &emp_lo.per_block[level - 1];
        let e_hi = &emp_hi.per_block[level - 1];
        for p in 0..th.g.dim() {
            for q in p..th.g.dim() {
                let theory_err = th.g_stderr[(p, q)];
                let dev_lo = (e_lo.estimate[(p, q)] - th.g.get(p, q)).abs();
                let dev_hi = (e_hi.estimate[(p, q)] - th.g.get(p, q)).abs();
                // Resolvable only when the small-width deviation dominates
                // its own noise and the large-width noise is under a third
                // of the allowed bound.
                let noise_lo = 3.0 * (e_lo.stderr[(p, q)] + theory_err);
                if dev_lo < noise_lo {
                    skipped += 1;
                    continue;
                }
                let allowed = tolerance * dev_lo;
                if e_hi.stderr[(p, q)] + theory_err >= allowed / 3.0 {
                    stderr_ok = false;
                }
                resolved += 1;
                worst_ratio = worst_ratio.max(dev_hi / dev_lo);
            }
        }
    }
    let details = format!(
        "n {lo}→{hi}: worst dev ratio {worst_ratio:.3} over {resolved} resolved pairs ({skipped} below noise), stderr bound {}",
        if stderr_ok { "met" } else { "NOT met" }
    );
    if resolved == 0 || !stderr_ok {
        return CheckResult::inconclusive("forward_kernel_convergence", worst_ratio, tolerance, details);
    }
    CheckResult::pass_if("forward_kernel_convergence", worst_ratio, tolerance, None, details)
}

fn diag_arch(n: usize, modality: Modality) -> ArchSpec {
    ArchSpec {
        modality,
        n,
        heads: 4,
        mlp_multiplier: 2,
        tokens: 3,
        n_in: if modality == Modality::Vision { 16 } else { 2048 },
        n_out: if modality == Modality::Vision { 8 } else { 2048 },
        blocks: vec![BlockKind::Mhsa, BlockKind::Mlp],
        masking: Masking::Bidirectional,
        eps_ln: 1e-6,
        activation: Activation::Gelu,
        pooling: Pooling::None,
        weight_tying: modality == Modality::Language,
    }
}

/// Criterion 3 — cross-channel preactivation covariance and cross-channel
/// NTK vanish within 5 standard errors at the middle width.
pub fn check_diagonality(params: &CheckParams) -> CheckResult {
    let n = params.widths[params.widths.len() / 2].min(256);
    let arch = diag_arch(n, Modality::Vision);
    let plan = ntk_plan(&arch);
    let batch = Batch::random_vision(2, 3, 16, derive(params.seed, "diag-batch", 0));

    let kernels = match empirical_kernel(&arch, &plan, &batch, params.diag_inits * 2, derive(params.seed, "diag-k", 1)) {
        Ok(k) => k,
        Err(e) => return CheckResult::pass_if("diagonality", f64::INFINITY, 5.0, None, e.to_string()),
    };
    let mut worst: f64 = 0.0;
    for level in &kernels.cross_channel {
        for (est, se) in level.estimate.iter().zip(level.stderr.iter()) {
            if *se > 0.0 {
                worst = worst.max(est.abs() / se);
            }
        }
    }

    let ntk = match empirical_ntk(&arch, &plan, &batch, params.diag_inits, derive(params.seed, "diag-n", 2), &params.channels) {
        Ok(n) => n,
        Err(e) => return CheckResult::pass_if("diagonality", f64::INFINITY, 5.0, None, e.to_string()),
    };
    let mut worst_ntk: f64 = 0.0;
    if let Some(cross) = &ntk.cross_channel {
        for (est, se) in cross.estimate.iter().zip(cross.stderr.iter()) {
            if *se > 0.0 {
                worst_ntk = worst_ntk.max(est.abs() / se);
            }
        }
    }
    let value = worst.max(worst_ntk);
    CheckResult::pass_if(
        "diagonality",
        value,
        5.0,
        None,
        format!("n={n}: max |cross-channel|/SE — kernel {worst:.2}, ntk {worst_ntk:.2}"),
    )
}

/// Criterion 4 — LN exactness: ε=0 normalization to 1e−12 and the empirical
/// LN backward factor against 1/(√(G+ε)√(G+ε)) within 3 standard errors.
pub fn check_ln_exactness(params: &CheckParams) -> CheckResult {
    let n = params.widths[params.widths.len() / 2].min(256);
    let mut arch = diag_arch(n, Modality::Vision);
    arch.eps_ln = 0.0;
    arch.tokens = 2;
    let plan = ntk_plan(&arch);
    let batch = Batch::random_vision(2, 2, 16, derive(params.seed, "ln-batch", 0));

    // Forward exactness.
    let model = match init_model(&arch, &plan, derive(params.seed, "ln-model", 1), InitDist::Normal) {
        Ok(m) => m,
        Err(e) => return CheckResult::pass_if("ln_exactness", f64::INFINITY, 3.0, None, e.to_string()),
    };
    let trace = match forward_pass(&model, &batch) {
        Ok(t) => t,
        Err(e) => return CheckResult::pass_if("ln_exactness", f64::INFINITY, 3.0, None, e.to_string()),
    };
    let mut worst_norm: f64 = 0.0;
    for s in &trace.s {
        for r in 0..s.shape()[0] {
            let norm = s.row(r).dot(&s.row(r)) / arch.n as f64;
            worst_norm = worst_norm.max((norm - 1.0).abs());
        }
    }
    if worst_norm > 1e-12 {
        return CheckResult::pass_if(
            "ln_exactness",
            f64::INFINITY,
            3.0,
            None,
            format!("forward normalization off by {worst_norm:.2e} (tolerance 1e-12)"),
        );
    }

    // Backward factor at the levels entering blocks 2 and 3.
    let settings = PropagationSettings { moment_samples: params.moment_samples, quad_order: 64, seed: params.seed };
    let theory = match propagate_kernels(&arch, &plan, &batch, &settings) {
        Ok(t) => t,
        Err(e) => return CheckResult::pass_if("ln_exactness", f64::INFINITY, 3.0, None, e.to_string()),
    };
    let mut worst_std: f64 = 0.0;
    for level in [1usize, 2] {
        let emp = match ln_backward_empirical(&arch, &plan, &batch, level, params.ln_inits, derive(params.seed, "ln-emp", level as u64)) {
            Ok(e) => e,
            Err(e) => return CheckResult::pass_if("ln_exactness", f64::INFINITY, 3.0, None, e.to_string()),
        };
        let g = &theory.blocks[level].g;
        let lnfac = tangents::ntk::ln_backward_factor(g, 0.0).expect("positive diagonals");
        for p in 0..g.dim() {
            for q in 0..g.dim() {
                let se = emp.stderr[(p, q)];
                if se > 0.0 {
                    worst_std = worst_std.max((emp.estimate[(p, q)] - lnfac.get(p, q)).abs() / se);
                }
            }
        }
    }
    CheckResult::pass_if(
        "ln_exactness",
        worst_std,
        3.0,
        None,
        format!("forward norm exact to {worst_norm:.1e}; worst backward-factor deviation {worst_std:.2} SE (n={n})"),
    )
}

fn fluct_arch(n: usize) -> ArchSpec {
    ArchSpec {
        modality: Modality::Vision,
        n,
        heads: 4,
        mlp_multiplier: 1,
        tokens: 1,
        n_in: 8,
        n_out: 4,
        blocks: vec![BlockKind::Mlp],
        masking: Masking::Bidirectional,
        eps_ln: 0.0,
        activation: Activation::Gelu,
        pooling: Pooling::None,
        weight_tying: false,
    }
}

/// Criterion 5 — eightfold suppression: |E[ΔĜ]|, E[∇Ĝ], and E[ΔĜ²] measured
/// after an MLP block shrink ∝ 1/n between the smallest and largest widths,
/// within a factor-2 band around the predicted ratio; E[ΔĜ²] additionally
/// sits within a factor 2 of 2G²/n at both widths.
pub fn check_eightfold(params: &CheckParams) -> CheckResult {
    let (lo, hi) = (params.lo(), params.hi());
    let predicted = hi as f64 / lo as f64;
    let band = (predicted / 2.0, predicted * 2.0);
    let batch = Batch::random_vision(1, 1, 8, derive(params.seed, "fluct-batch", 0));
    let settings = PropagationSettings { moment_samples: 1024, quad_order: 64, seed: params.seed };

    let run = |n: usize, inits: usize| -> anyhow::Result<(Vec<f64>, Vec<f64>, f64)> {
        let arch = fluct_arch(n);
        let plan = ntk_plan(&arch);
        let theory = propagate_kernels(&arch, &plan, &batch, &settings).map_err(|e| anyhow::anyhow!("{e}"))?;
        let g2 = theory.blocks[2].g.diag(0);
        let moments = norm_fluctuation_moments(
            &arch,
            &plan,
            &batch,
            2,
            &[g2],
            inits,
            derive(params.seed, "fluct", n as u64),
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        let vals = (0..4).map(|j| moments.moments[(0, j)]).collect();
        let ses = (0..4).map(|j| moments.stderr[(0, j)]).collect();
        Ok((vals, ses, g2))
    };

    let (m_lo, se_lo, g_lo) = match run(lo, params.fluct_inits) {
        Ok(v) => v,
        Err(e) => return CheckResult::pass_if("eightfold_suppression", f64::INFINITY, band.1, None, e.to_string()),
    };
    let (m_hi, se_hi, g_hi) = match run(hi, params.fluct_inits * 2) {
        Ok(v) => v,
        Err(e) => return CheckResult::pass_if("eightfold_suppression", f64::INFINITY, band.1, None, e.to_string()),
    };

    let names = ["E[ΔG]", "E[∇G]", "E[ΔG²]"];
    let mut details = String::new();
    let mut any_inconclusive = false;
    let mut fail = false;
    for j in 0..3 {
        let (a, ea) = (m_lo[j].abs(), se_lo[j]);
        let (b, eb) = (m_hi[j].abs(), se_hi[j]);
        if a < 3.0 * ea || b < 3.0 * eb {
            details.push_str(&format!("{} unresolved ({a:.2e}±{ea:.1e} → {b:.2e}±{eb:.1e}); ", names[j]));
            any_inconclusive = true;
            continue;
        }
        let ratio = a / b;
        // Propagate relative errors into the ratio band.
        let rel = 3.0 * (ea / a + eb / b);
        let ok = ratio * (1.0 + rel) >= band.0 && ratio * (1.0 - rel) <= band.1;
        details.push_str(&format!("{} ratio {ratio:.2} (band {:.1}–{:.1}); ", names[j], band.0, band.1));
        if !ok {
            fail = true;
        }
    }
    // Anchor: E[ΔĜ²] ≈ 2G²/n within a factor 2 at both widths.
    for (n, m, g) in [(lo, &m_lo, g_lo), (hi, &m_hi, g_hi)] {
        let pred = 2.0 * g * g / n as f64;
        let ratio = m[2] / pred;
        details.push_str(&format!("E[ΔG²]/(2G²/n) = {ratio:.2} at n={n}; "));
        if !(0.5..=2.0).contains(&ratio) {
            fail = true;
        }
    }
    let value = if fail { band.1 * 10.0 } else { predicted };
    if any_inconclusive && !fail {
        return CheckResult::inconclusive("eightfold_suppression", value, band.1, details);
    }
    CheckResult {
        name: "eightfold_suppression".into(),
        value,
        tolerance: band.1,
        stderr: None,
        verdict: if fail { Verdict::Fail } else { Verdict::Pass },
        details,
    }
}

fn gauss_arch(n: usize, heads: usize) -> ArchSpec {
    ArchSpec {
        modality: Modality::Vision,
        n,
        heads,
        mlp_multiplier: 1,
        tokens: 3,
        n_in: 12,
        n_out: 4,
        blocks: vec![BlockKind::Mhsa],
        masking: Masking::Bidirectional,
        eps_ln: 1e-6,
        activation: Activation::Gelu,
        pooling: Pooling::None,
        weight_tying: false,
    }
}

/// Criterion 6 — the query–key dot product is Gaussian: second moments match
/// C_Q·C_K·F⊗F, fourth moments match the three-pairing Wick sum, and distinct
/// heads are uncorrelated, all within 4 standard errors at the largest width
/// for H ∈ {4, 8}.
pub fn check_attention_gaussianity(params: &CheckParams) -> CheckResult {
    let n = params.hi();
    let batch = Batch::random_vision(2, 3, 12, derive(params.seed, "gauss-batch", 0));
    let mut worst: f64 = 0.0;
    let mut details = String::new();
    for heads in [4usize, 8] {
        let arch = gauss_arch(n, heads);
        let plan = ntk_plan(&arch);
        // Theory covariance A from the exact stem kernel (no Monte Carlo).
        let g0 = tangents::kernel::input_kernel(&batch).expect("nonempty batch");
        let g1 = tangents::kernel::stem_kernel(&g0, plan.c(ParamGroup::Patch), plan.c(ParamGroup::PosEmb));
        let f1 = tangents::kernel::layer_norm_kernel(&g1, arch.eps_ln).expect("positive diagonals");
        let a = qk_covariance(&f1, plan.c(ParamGroup::Q), plan.c(ParamGroup::K));

        let samples = match qk_logit_samples(&arch, &plan, &batch, params.gauss_inits, derive(params.seed, "gauss", heads as u64)) {
            Ok(s) => s,
            Err(e) => return CheckResult::pass_if("attention_gaussianity", f64::INFINITY, 4.0, None, e.to_string()),
        };
        let n_inits = samples.shape()[0];
        let dim = samples.shape()[2];

        // Second moments, averaged over heads (heads are iid).
        let mut max2: f64 = 0.0;
        for p in 0..dim {
            for q in p..dim {
                let mut acc = ScalarStats::new();
                for i in 0..n_inits {
                    for h in 0..heads {
                        acc.push(samples[(i, h, p)] * samples[(i, h, q)]);
                    }
                }
                let (mean, se) = acc.mean_se();
                if se > 0.0 {
                    max2 = max2.max((mean - a.get(p, q)).abs() / se);
                }
            }
        }

        // Fourth moments on a few index quadruples vs the Wick sum.
        let quads: Vec<[usize; 4]> = vec![
            [0, 0, 0, 0],
            [0, 1, 0, 1],
            [0, 1, 2, 3.min(dim - 1)],
            [1, 1, 2, 2],
            [0, 2, 1, 2],
        ];
        let mut max4: f64 = 0.0;
        for quad in &quads {
            let wick = wick_even_moment(&|x, y| a.get(quad[x], quad[y]), &[0, 1, 2, 3]);
            let mut acc = ScalarStats::new();
            for i in 0..n_inits {
                for h in 0..heads {
                    acc.push(
                        samples[(i, h, quad[0])] * samples[(i, h, quad[1])] * samples[(i, h, quad[2])] * samples[(i, h, quad[3])],
                    );
                }
            }
            let (mean, se) = acc.mean_se();
            if se > 0.0 {
                max4 = max4.max((mean - wick).abs() / se);
            }
        }

        // Cross-head covariance ≈ 0.
        let mut maxhh: f64 = 0.0;
        for p in [0usize, dim / 2] {
            let mut acc = ScalarStats::new();
            for i in 0..n_inits {
                for h1 in 0..heads {
                    for h2 in (h1 + 1)..heads {
                        acc.push(samples[(i, h1, p)] * samples[(i, h2, p)]);
                    }
                }
            }
            let (mean, se) = acc.mean_se();
            if se > 0.0 {
                maxhh = maxhh.max(mean.abs() / se);
            }
        }

        details.push_str(&format!("H={heads}: 2nd {max2:.2}, 4th {max4:.2}, cross-head {maxhh:.2} SE; "));
        worst = worst.max(max2).max(max4).max(maxhh);
    }
    CheckResult::pass_if("attention_gaussianity", worst, 4.0, None, details)
}

struct ScalarStats {
    sum: f64,
    sumsq: f64,
    n: usize,
}

impl ScalarStats {
    fn new() -> Self {
        ScalarStats { sum: 0.0, sumsq: 0.0, n: 0 }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sumsq += v * v;
        self.n += 1;
    }

    fn mean_se(&self) -> (f64, f64) {
        let nf = self.n as f64;
        let mean = self.sum / nf;
        let var = (self.sumsq / nf - mean * mean).max(0.0);
        (mean, (var / (nf - 1.0).max(1.0)).sqrt())
    }
}

/// Criterion 7 — NTK theory–simulation agreement at the largest width for a
/// depth-2 model, both modalities: per-group contributions and the total Θ̂
/// within combined standard errors plus 10/n absolute slack.
pub fn check_ntk_agreement(params: &CheckParams) -> CheckResult {
    let n = params.hi();
    let slack = 10.0 / n as f64;
    let mut worst: f64 = 0.0;
    let mut details = String::new();
    for modality in [Modality::Vision, Modality::Language] {
        let arch = diag_arch(n, modality);
        let plan = ntk_plan(&arch);
        let batch = match modality {
            Modality::Vision => Batch::random_vision(2, 3, 16, derive(params.seed, "ntk-batch", 0)),
            Modality::Language => Batch::Language(ndarray::arr2(&[[7usize, 4, 4], [9, 4, 1]])),
        };
        let settings = PropagationSettings { moment_samples: params.moment_samples, quad_order: 64, seed: params.seed };
        let kernels = match propagate_kernels(&arch, &plan, &batch, &settings) {
            Ok(k) => k,
            Err(e) => return CheckResult::pass_if("ntk_agreement", f64::INFINITY, 1.0, None, e.to_string()),
        };
        let theory = match propagate_ntk_with_kernels(&arch, &plan, &kernels) {
            Ok(t) => t,
            Err(e) => return CheckResult::pass_if("ntk_agreement", f64::INFINITY, 1.0, None, e.to_string()),
        };
        let emp = match empirical_ntk(&arch, &plan, &batch, params.ntk_inits, derive(params.seed, "ntk", n as u64), &params.channels) {
            Ok(e) => e,
            Err(e) => return CheckResult::pass_if("ntk_agreement", f64::INFINITY, 1.0, None, e.to_string()),
        };
        let th = theory.last();
        let mut m_worst: f64 = 0.0;
        for p in 0..th.theta.dim() {
            for q in 0..th.theta.dim() {
                let allowed = 3.0 * emp.total.stderr[(p, q)] + slack;
                let dev = (th.theta.get(p, q) - emp.total.estimate[(p, q)]).abs();
                m_worst = m_worst.max(dev / allowed);
            }
        }
        for (group, part) in &th.by_group {
            let e = emp.by_group.get(group).expect("group estimated");
            for p in 0..part.dim() {
                for q in 0..part.dim() {
                    let allowed = 3.0 * e.stderr[(p, q)] + slack;
                    let dev = (part.get(p, q) - e.estimate[(p, q)]).abs();
                    m_worst = m_worst.max(dev / allowed);
                }
            }
        }
        details.push_str(&format!("{modality:?}: worst dev / allowance {m_worst:.2}; "));
        worst = worst.max(m_worst);
    }
    CheckResult::pass_if("ntk_agreement", worst, 1.0, None, details)
}

/// Predicted mean-|g| width exponents (|g| ∝ n^{−exponent}); the head groups
/// are width-independent because their gradients see fixed fan dimensions.
fn predicted_grad_exponent(group: ParamGroup) -> Option<f64> {
    match group {
        ParamGroup::Patch
        | ParamGroup::PosEmb
        | ParamGroup::Q
        | ParamGroup::K
        | ParamGroup::V
        | ParamGroup::U
        | ParamGroup::W
        | ParamGroup::X => Some(0.5),
        ParamGroup::HeadW | ParamGroup::HeadB => Some(0.0),
        ParamGroup::WordEmb => None,
    }
}

/// Criterion 8 — per-group mean |g| ratios between the smallest and largest
/// widths match the predicted powers within 20%.
pub fn check_grad_magnitude_scaling(params: &CheckParams) -> (CheckResult, Vec<GradRow>) {
    let (lo, hi) = (params.lo(), params.hi());
    let batch = Batch::random_vision(2, 3, 16, derive(params.seed, "grad-batch", 0));
    let mut rows = Vec::new();
    let mut stats: BTreeMap<usize, tangents::lab::GradMagnitudes> = BTreeMap::new();
    for &n in &[lo, hi] {
        let arch = diag_arch(n, Modality::Vision);
        let plan = ntk_plan(&arch);
        match grad_magnitude_stats(&arch, &plan, &batch, params.grad_inits, derive(params.seed, "grad", n as u64)) {
            Ok(g) => {
                for (group, &mean) in &g.mean_abs {
                    rows.push(GradRow {
                        group: group.name().to_string(),
                        width: n,
                        mean_abs_grad: mean,
                        stderr: g.stderr[group],
                    });
                }
                stats.insert(n, g);
            }
            Err(e) => {
                return (
                    CheckResult::pass_if("grad_magnitude_scaling", f64::INFINITY, 0.2, None, e.to_string()),
                    rows,
                )
            }
        }
    }
    let ratio_n = (hi as f64 / lo as f64).sqrt();
    let mut worst: f64 = 0.0;
    let mut details = String::new();
    for (group, &m_lo) in &stats[&lo].mean_abs {
        let Some(exp) = predicted_grad_exponent(*group) else { continue };
        let m_hi = stats[&hi].mean_abs[group];
        let predicted = if exp == 0.5 { 1.0 / ratio_n } else { 1.0 };
        let measured = m_hi / m_lo;
        let rel = (measured / predicted - 1.0).abs();
        details.push_str(&format!("{}: {measured:.3} (pred {predicted:.3}); ", group.name()));
        worst = worst.max(rel);
    }
    (
        CheckResult::pass_if(
            "grad_magnitude_scaling",
            worst,
            0.2,
            None,
            format!("|g| ratios {lo}→{hi}: {details}"),
        ),
        rows,
    )
}

/// Criterion 9 — order-one updates: |Δf|/lr after one step is width-flat
/// within a factor 1.5 for the SGD λ plan and the AdamW λ̃ plan, while the
/// uniform AdamW baseline strictly grows with width. Also verifies the probe
/// stays in the linear Taylor regime by halving the learning rate.
pub fn check_update_flatness(params: &CheckParams) -> (CheckResult, Vec<ProbeRow>) {
    let batch = Batch::random_vision(2, 3, 16, derive(params.seed, "probe-batch", 0));
    let adamw_cfg = AdamWConfig::default();
    let mut rows = Vec::new();
    let mut run = |optimizer: Optimizer, factors: LrFactors, n: usize, lr: f64| -> anyhow::Result<f64> {
        let arch = diag_arch(n, Modality::Vision);
        let plan = ntk_plan(&arch);
        let stats = one_step_probe(
            &arch,
            &plan,
            optimizer,
            factors,
            lr,
            &batch,
            params.probe_inits,
            derive(params.seed, "probe", n as u64),
            &adamw_cfg,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        rows.push(ProbeRow {
            optimizer: format!("{optimizer:?}").to_lowercase(),
            factors: match factors {
                LrFactors::Plan => "plan".into(),
                LrFactors::Uniform => "uniform".into(),
            },
            width: n,
            lr,
            mean_abs_delta: stats.mean_abs_delta,
            stderr: stats.stderr,
        });
        Ok(stats.mean_abs_delta / lr)
    };

    let lr = 1e-3;
    let mut details = String::new();
    let mut value: f64 = 0.0;
    let mut fail = false;

    for (optimizer, label) in [(Optimizer::Sgd, "sgd+plan"), (Optimizer::AdamW, "adamw+plan")] {
        let mut sizes = Vec::new();
        for &n in &params.widths {
            match run(optimizer, LrFactors::Plan, n, lr) {
                Ok(v) => sizes.push(v),
                Err(e) => {
                    return (
                        CheckResult::pass_if("update_flatness", f64::INFINITY, 1.5, None, e.to_string()),
                        rows,
                    )
                }
            }
        }
        let flat = sizes.iter().cloned().fold(f64::MIN, f64::max) / sizes.iter().cloned().fold(f64::MAX, f64::min);
        details.push_str(&format!("{label} max/min {flat:.3}; "));
        value = value.max(flat);
        if flat > 1.5 {
            fail = true;
        }
    }

    let mut uniform = Vec::new();
    for &n in &params.widths {
        match run(Optimizer::AdamW, LrFactors::Uniform, n, lr) {
            Ok(v) => uniform.push(v),
            Err(e) => {
                return (CheckResult::pass_if("update_flatness", f64::INFINITY, 1.5, None, e.to_string()), rows)
            }
        }
    }
    let increasing = uniform.windows(2).all(|w| w[1] > w[0]);
    details.push_str(&format!(
        "adamw+uniform |Δf|/lr {:?} {}; ",
        uniform.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
        if increasing { "strictly increasing" } else { "NOT increasing" }
    ));
    if !increasing {
        fail = true;
    }

    // Linear-regime guard: halving lr changes |Δf|/lr by well under 1%.
    let n0 = params.lo();
    let a = run(Optimizer::Sgd, LrFactors::Plan, n0, lr).unwrap_or(f64::NAN);
    let b = run(Optimizer::Sgd, LrFactors::Plan, n0, lr / 2.0).unwrap_or(f64::NAN);
    let taylor = (a / b - 1.0).abs();
    details.push_str(&format!("Taylor drift at lr/2: {taylor:.2e}"));
    if !(taylor < 0.01) {
        fail = true;
    }

    (
        CheckResult {
            name: "update_flatness".into(),
            value,
            tolerance: 1.5,
            stderr: None,
            verdict: if fail { Verdict::Fail } else { Verdict::Pass },
            details,
        },
        rows,
    )
}

fn assert_symbolic(details: &mut String, mismatches: &mut usize, label: &str, sym: &Symbolic, coeff: f64, n: f64, n_in: f64, n_out: f64) {
    let ok = (sym.coeff - coeff).abs() < 1e-12
        && sym.n_exp == n
        && sym.n_in_exp == n_in
        && sym.n_out_exp == n_out;
    if !ok {
        *mismatches += 1;
        details.push_str(&format!(
            "{label}: got coeff {} n^{} n_in^{} n_out^{}, want coeff {coeff} n^{n} n_in^{n_in} n_out^{n_out}; ",
            sym.coeff, sym.n_exp, sym.n_in_exp, sym.n_out_exp
        ));
    }
}

/// Criterion 10 — the emitted plans reproduce the reference scaling tables
/// symbolically: the four strategy columns of the vision table (n_patch=768,
/// n_out=1000) and the neural-tangent column of the language table.
pub fn check_plan_tables(_params: &CheckParams) -> CheckResult {
    let mut mismatches = 0usize;
    let mut details = String::new();

    let vit = ArchSpec {
        modality: Modality::Vision,
        n: 768,
        heads: 12,
        mlp_multiplier: 4,
        tokens: 196,
        n_in: 768,
        n_out: 1000,
        blocks: vec![BlockKind::Mhsa, BlockKind::Mlp],
        masking: Masking::Bidirectional,
        eps_ln: 1e-6,
        activation: Activation::Gelu,
        pooling: Pooling::TokenMean,
        weight_tying: false,
    };

    // The experiments the tables describe fold the MLP multiplier into the
    // generic bulk column.
    let strategies: [(&str, ScalingStrategy, f64); 4] = [
        ("standard", with_ignore(ScalingStrategy::standard()), 0.0),
        ("neural-tangent", with_ignore(ScalingStrategy::neural_tangent()), 0.0),
        ("hybrid", with_ignore(ScalingStrategy::hybrid()), 0.5),
        ("maximal-update", with_ignore(ScalingStrategy::maximal_update()), 1.0),
    ];
    for (name, strategy, s) in &strategies {
        let plan: ScalingPlan<f64> =
            make_plan(&vit, strategy, &ScalingConstants::for_strategy(strategy)).expect("valid plan");
        let d = &mut details;
        let m = &mut mismatches;
        // Initialization stds are strategy-independent except the head.
        let patch = plan.group(ParamGroup::Patch).unwrap();
        assert_symbolic(d, m, &format!("{name}/patch std"), &patch.init_std_symbolic, 1.0, 0.0, -0.5, 0.0);
        let pe = plan.group(ParamGroup::PosEmb).unwrap();
        assert_symbolic(d, m, &format!("{name}/pe std"), &pe.init_std_symbolic, 0.02, 0.0, 0.0, 0.0);
        for g in [ParamGroup::Q, ParamGroup::K, ParamGroup::V, ParamGroup::U, ParamGroup::W, ParamGroup::X] {
            let row = plan.group(g).unwrap();
            if row.init_std_symbolic.n_exp != -0.5 {
                *m += 1;
                d.push_str(&format!("{name}/{} std exponent {}; ", g.name(), row.init_std_symbolic.n_exp));
            }
        }
        let head = plan.group(ParamGroup::HeadW).unwrap();
        assert_symbolic(d, m, &format!("{name}/head std"), &head.init_std_symbolic, 1.0, -(1.0 + s) / 2.0, 0.0, 0.0);
        let head_b = plan.group(ParamGroup::HeadB).unwrap();
        if head_b.init_var != 0.0 {
            *m += 1;
            d.push_str(&format!("{name}/head_b init not zero; "));
        }

        if strategy.is_standard() {
            for (g, row) in &plan.groups {
                if row.adamw_factor != 1.0 {
                    *m += 1;
                    d.push_str(&format!("standard/{} lr factor {}; ", g.name(), row.adamw_factor));
                }
            }
        } else {
            assert_symbolic(d, m, &format!("{name}/patch lr"), &patch.adamw_symbolic, 1.0, -0.5 + s / 2.0, -1.0, 0.0);
            assert_symbolic(d, m, &format!("{name}/pe lr"), &pe.adamw_symbolic, 1.0, -0.5 + s / 2.0, 0.0, 0.0);
            for g in [ParamGroup::Q, ParamGroup::K, ParamGroup::V, ParamGroup::U, ParamGroup::W, ParamGroup::X] {
                let row = plan.group(g).unwrap();
                assert_symbolic(d, m, &format!("{name}/{} lr", g.name()), &row.adamw_symbolic, 1.0, -1.5 + s / 2.0, 0.0, 0.0);
            }
            assert_symbolic(d, m, &format!("{name}/head lr"), &head.adamw_symbolic, 1.0, -1.0, 0.0, -0.5);
            assert_symbolic(d, m, &format!("{name}/head_b lr"), &head_b.adamw_symbolic, 1.0, 0.0, 0.0, -0.5);
        }
    }

    // Language: the neural-tangent column keeps the conventional fixed 0.02
    // std for the bulk weights, cranks the word embedding to std 1, rescales
    // the output by n^{-1/2}, and scales the learning rates by n^{-1/2}
    // (embeddings) and n^{-3/2} (bulk).
    let sludge = ArchSpec {
        modality: Modality::Language,
        n: 1024,
        heads: 16,
        mlp_multiplier: 4,
        tokens: 514,
        n_in: 50_265,
        n_out: 50_265,
        blocks: vec![BlockKind::Mhsa, BlockKind::Mlp],
        masking: Masking::Masked,
        eps_ln: 1e-5,
        activation: Activation::Gelu,
        pooling: Pooling::None,
        weight_tying: true,
    };
    let strategy = with_ignore(ScalingStrategy::neural_tangent());
    let mut constants = ScalingConstants::for_strategy(&strategy);
    for g in [ParamGroup::Q, ParamGroup::K, ParamGroup::V, ParamGroup::U, ParamGroup::W, ParamGroup::X] {
        constants.init_std_override.insert(g, 0.02);
    }
    let plan: ScalingPlan<f64> = make_plan(&sludge, &strategy, &constants).expect("valid plan");
    {
        let d = &mut details;
        let m = &mut mismatches;
        let we = plan.group(ParamGroup::WordEmb).unwrap();
        assert_symbolic(d, m, "sludge/we std", &we.init_std_symbolic, 1.0, 0.0, 0.0, 0.0);
        assert_symbolic(d, m, "sludge/we lr", &we.adamw_symbolic, 1.0, -0.5, 0.0, 0.0);
        let pe = plan.group(ParamGroup::PosEmb).unwrap();
        assert_symbolic(d, m, "sludge/pe std", &pe.init_std_symbolic, 0.02, 0.0, 0.0, 0.0);
        assert_symbolic(d, m, "sludge/pe lr", &pe.adamw_symbolic, 1.0, -0.5, 0.0, 0.0);
        for g in [ParamGroup::Q, ParamGroup::K, ParamGroup::V, ParamGroup::U, ParamGroup::W, ParamGroup::X] {
            let row = plan.group(g).unwrap();
            assert_symbolic(d, m, &format!("sludge/{} std", g.name()), &row.init_std_symbolic, 0.02, 0.0, 0.0, 0.0);
            assert_symbolic(d, m, &format!("sludge/{} lr", g.name()), &row.adamw_symbolic, 1.0, -1.5, 0.0, 0.0);
        }
        assert_symbolic(d, m, "sludge/rescale", &plan.n_rescale_symbolic, 1.0, -0.5, 0.0, 0.0);
    }

    if mismatches == 0 {
        details = "all table entries reproduced symbolically".into();
    }
    CheckResult::pass_if("plan_tables", mismatches as f64, 0.0, None, details)
}

fn with_ignore(mut s: ScalingStrategy) -> ScalingStrategy {
    s.ignore_mlp_multiplier = true;
    s
}

/// Runs the full suite in criterion order.
pub fn run_all(params: &CheckParams) -> VerifyOutputs {
    let mut out = VerifyOutputs::default();
    out.checks.push(check_gradient_gate(params));
    out.checks.push(check_forward_kernel_convergence(params));
    out.checks.push(check_diagonality(params));
    out.checks.push(check_ln_exactness(params));
    out.checks.push(check_eightfold(params));
    out.checks.push(check_attention_gaussianity(params));
    out.checks.push(check_ntk_agreement(params));
    let (grad_check, grad_rows) = check_grad_magnitude_scaling(params);
    out.checks.push(grad_check);
    out.grad_rows = grad_rows;
    let (probe_check, probe_rows) = check_update_flatness(params);
    out.checks.push(probe_check);
    out.probe_rows = probe_rows;
    out.checks.push(check_plan_tables(params));
    out
}
