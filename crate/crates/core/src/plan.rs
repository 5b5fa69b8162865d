//! Per-group initialization variances and relative learning-rate factors.
//!
//! A [`ScalingPlan`] records, for every parameter group, the entry variance at
//! initialization, the SGD factor λ_G, and the AdamW factor λ̃_G, together
//! with the order-one constants they were built from and the symbolic width
//! powers behind each number. Plans interpolate the neural-tangent (s=0) and
//! maximal-update (s=1) strategies through a single exponent s.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Modality, ParamGroup};
use crate::error::{Error, Result};
use crate::float::Float;

/// Optimizer whose per-group factors a plan provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    AdamW,
}

/// Point on the neural-tangent ↔ maximal-update axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Uniform learning rate, no output rescale; init follows the s=0 rules.
    Standard,
    /// s = 0.
    NeuralTangent,
    /// s = 1/2.
    Hybrid,
    /// s = 1.
    MaximalUpdate,
    /// Explicit s in [0, 1].
    Explicit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingStrategy {
    pub kind: StrategyKind,
    /// Drop the MLP multiplier from the λ_W and λ_X formulas, as large-model
    /// recipes often do.
    pub ignore_mlp_multiplier: bool,
}

impl ScalingStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        ScalingStrategy { kind, ignore_mlp_multiplier: false }
    }

    pub fn standard() -> Self {
        Self::new(StrategyKind::Standard)
    }

    pub fn neural_tangent() -> Self {
        Self::new(StrategyKind::NeuralTangent)
    }

    pub fn hybrid() -> Self {
        Self::new(StrategyKind::Hybrid)
    }

    pub fn maximal_update() -> Self {
        Self::new(StrategyKind::MaximalUpdate)
    }

    /// Interpolation exponent. The standard preset inits like s = 0.
    pub fn s(&self) -> f64 {
        match self.kind {
            StrategyKind::Standard | StrategyKind::NeuralTangent => 0.0,
            StrategyKind::Hybrid => 0.5,
            StrategyKind::MaximalUpdate => 1.0,
            StrategyKind::Explicit(s) => s,
        }
    }

    pub fn is_standard(&self) -> bool {
        matches!(self.kind, StrategyKind::Standard)
    }

    pub fn validate(&self) -> Result<()> {
        if let StrategyKind::Explicit(s) = self.kind {
            if !(0.0..=1.0).contains(&s) || !s.is_finite() {
                return Err(Error::Invalid(format!("strategy exponent s={s} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Order-one constants: initialization covariances C_G and the SGD/AdamW
/// front factors Λ_G, Λ̃_G.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConstants {
    pub c: BTreeMap<ParamGroup, f64>,
    pub lambda: BTreeMap<ParamGroup, f64>,
    pub lambda_tilde: BTreeMap<ParamGroup, f64>,
    /// Pin a group's initialization std to a fixed number regardless of
    /// width, overriding the C_G/fan rule (matches common language recipes
    /// that keep std 0.02 for bulk weights).
    #[serde(default)]
    pub init_std_override: BTreeMap<ParamGroup, f64>,
}

impl Default for ScalingConstants {
    fn default() -> Self {
        let mut c = BTreeMap::new();
        c.insert(ParamGroup::Patch, 1.0);
        c.insert(ParamGroup::WordEmb, 1.0);
        c.insert(ParamGroup::PosEmb, 0.02 * 0.02);
        c.insert(ParamGroup::Q, 0.5);
        c.insert(ParamGroup::K, 0.5);
        c.insert(ParamGroup::V, 0.5);
        c.insert(ParamGroup::U, 1.0 / 3.0);
        c.insert(ParamGroup::W, 0.4);
        c.insert(ParamGroup::X, 1.6);
        c.insert(ParamGroup::HeadW, 1.0);
        c.insert(ParamGroup::HeadB, 0.0);
        let ones: BTreeMap<ParamGroup, f64> = ParamGroup::ALL.iter().map(|&g| (g, 1.0)).collect();
        ScalingConstants {
            c,
            lambda: ones.clone(),
            lambda_tilde: ones,
            init_std_override: BTreeMap::new(),
        }
    }
}

impl ScalingConstants {
    /// Defaults adjusted for a strategy: the standard preset keeps the
    /// conventional small word-embedding init, the principled presets crank
    /// it up to an order-one covariance.
    pub fn for_strategy(strategy: &ScalingStrategy) -> Self {
        let mut k = Self::default();
        if strategy.is_standard() {
            k.c.insert(ParamGroup::WordEmb, 0.02 * 0.02);
        }
        k
    }

    pub fn c(&self, group: ParamGroup) -> f64 {
        self.c.get(&group).copied().unwrap_or(1.0)
    }

    pub fn lambda(&self, group: ParamGroup) -> f64 {
        self.lambda.get(&group).copied().unwrap_or(1.0)
    }

    pub fn lambda_tilde(&self, group: ParamGroup) -> f64 {
        self.lambda_tilde.get(&group).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (&g, &v) in self.c.iter().chain(self.lambda.iter()).chain(self.lambda_tilde.iter()) {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConstant(format!("{} = {v}", g.name())));
            }
        }
        if self.c(ParamGroup::HeadB) != 0.0 {
            return Err(Error::InvalidConstant("head biases are zero-initialized".into()));
        }
        for (&g, &v) in &self.init_std_override {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConstant(format!("std override {} = {v}", g.name())));
            }
        }
        Ok(())
    }
}

/// A factor written as coeff · n^a · n_in^b · n_out^c · M^d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Symbolic {
    pub coeff: f64,
    pub n_exp: f64,
    pub n_in_exp: f64,
    pub n_out_exp: f64,
    pub m_exp: f64,
}

impl Symbolic {
    pub fn constant(coeff: f64) -> Self {
        Symbolic { coeff, n_exp: 0.0, n_in_exp: 0.0, n_out_exp: 0.0, m_exp: 0.0 }
    }

    pub fn eval<F: Float>(&self, arch: &ArchSpec) -> F {
        let v = self.coeff
            * (arch.n as f64).powf(self.n_exp)
            * (arch.n_in as f64).powf(self.n_in_exp)
            * (arch.n_out as f64).powf(self.n_out_exp)
            * (arch.mlp_multiplier as f64).powf(self.m_exp);
        F::cast(v)
    }

    /// Renders like the usual scaling tables: numeric bases for fan dims,
    /// symbolic `n` for the width, e.g. `768^-1·n^-1/2`.
    pub fn render(&self, arch: &ArchSpec) -> String {
        let mut parts = Vec::new();
        if self.coeff == 0.0 {
            return "0".to_string();
        }
        if (self.coeff - 1.0).abs() > 1e-12 {
            parts.push(trim_float(self.coeff));
        }
        for (base, exp) in [
            (arch.n_in.to_string(), self.n_in_exp),
            ("n".to_string(), self.n_exp),
            (arch.n_out.to_string(), self.n_out_exp),
            ("M".to_string(), self.m_exp),
        ] {
            if exp != 0.0 {
                parts.push(format!("{base}^{}", render_exp(exp)));
            }
        }
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("·")
        }
    }
}

fn render_exp(e: f64) -> String {
    for den in [1i64, 2, 4] {
        let num = e * den as f64;
        if (num - num.round()).abs() < 1e-12 {
            let num = num.round() as i64;
            return if den == 1 { format!("{num}") } else { format!("{num}/{den}") };
        }
    }
    format!("{e:.4}")
}

fn trim_float(v: f64) -> String {
    let s = format!("{v}");
    s
}

/// One group's row of the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: serde::de::DeserializeOwned"))]
pub struct GroupScaling<F> {
    /// Entry variance at initialization (fan divisor included).
    pub init_var: F,
    /// Relative SGD learning-rate factor λ_G.
    pub sgd_factor: F,
    /// Relative AdamW learning-rate factor λ̃_G.
    pub adamw_factor: F,
    pub init_std_symbolic: Symbolic,
    pub sgd_symbolic: Symbolic,
    pub adamw_symbolic: Symbolic,
}

/// Full plan: one row per group present in the architecture, plus the output
/// rescale and the constants the rows were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: serde::de::DeserializeOwned"))]
pub struct ScalingPlan<F> {
    pub strategy: ScalingStrategy,
    /// Interpolation exponent actually used.
    pub s: f64,
    /// Groups in stem-to-head order.
    pub groups: Vec<(ParamGroup, GroupScaling<F>)>,
    /// Output rescale applied at a tied language head.
    pub n_rescale: F,
    pub n_rescale_symbolic: Symbolic,
    pub constants: ScalingConstants,
}

impl<F: Float> ScalingPlan<F> {
    pub fn group(&self, g: ParamGroup) -> Option<&GroupScaling<F>> {
        self.groups.iter().find(|(gg, _)| *gg == g).map(|(_, s)| s)
    }

    pub fn init_var(&self, g: ParamGroup) -> F {
        self.group(g).map(|r| r.init_var).unwrap_or_else(F::zero)
    }

    pub fn sgd_factor(&self, g: ParamGroup) -> F {
        self.group(g).map(|r| r.sgd_factor).unwrap_or_else(F::zero)
    }

    pub fn adamw_factor(&self, g: ParamGroup) -> F {
        self.group(g).map(|r| r.adamw_factor).unwrap_or_else(F::zero)
    }

    /// Order-one constant C_G.
    pub fn c(&self, g: ParamGroup) -> F {
        F::cast(self.constants.c(g))
    }

    /// Order-one constant Λ_G.
    pub fn lambda_const(&self, g: ParamGroup) -> F {
        F::cast(self.constants.lambda(g))
    }
}

/// Builds the complete plan (init variances plus both optimizers' factors).
pub fn make_plan<F: Float>(
    arch: &ArchSpec,
    strategy: &ScalingStrategy,
    constants: &ScalingConstants,
) -> Result<ScalingPlan<F>> {
    arch.validate()?;
    strategy.validate()?;
    constants.validate()?;
    let s = strategy.s();
    let mut groups = Vec::new();
    for g in ParamGroup::for_modality(arch.modality) {
        let init_std_symbolic = init_std_symbolic(g, s, constants);
        let sgd_symbolic = sgd_symbolic(g, s, strategy, constants);
        let adamw_symbolic = adamw_symbolic(g, s, strategy, constants);
        let std: F = init_std_symbolic.eval(arch);
        groups.push((
            g,
            GroupScaling {
                init_var: std * std,
                sgd_factor: sgd_symbolic.eval(arch),
                adamw_factor: adamw_symbolic.eval(arch),
                init_std_symbolic,
                sgd_symbolic,
                adamw_symbolic,
            },
        ));
    }
    let n_rescale_symbolic = rescale_symbolic(arch.modality, strategy);
    Ok(ScalingPlan {
        strategy: *strategy,
        s,
        n_rescale: n_rescale_symbolic.eval(arch),
        n_rescale_symbolic,
        groups,
        constants: constants.clone(),
    })
}

/// Initialization part of the plan.
pub fn make_init_plan<F: Float>(
    arch: &ArchSpec,
    strategy: &ScalingStrategy,
    constants: &ScalingConstants,
) -> Result<ScalingPlan<F>> {
    make_plan(arch, strategy, constants)
}

/// Learning-rate part of the plan for one optimizer, as (group, factor) rows.
pub fn make_lr_plan<F: Float>(
    arch: &ArchSpec,
    optimizer: Optimizer,
    strategy: &ScalingStrategy,
    constants: &ScalingConstants,
) -> Result<Vec<(ParamGroup, F)>> {
    let plan = make_plan::<F>(arch, strategy, constants)?;
    Ok(plan
        .groups
        .iter()
        .map(|(g, row)| {
            let f = match optimizer {
                Optimizer::Sgd => row.sgd_factor,
                Optimizer::AdamW => row.adamw_factor,
            };
            (*g, f)
        })
        .collect())
}

/// Output rescale: n^{-(1+s)/2} for language under the principled
/// strategies, 1 otherwise.
pub fn output_rescale<F: Float>(arch: &ArchSpec, strategy: &ScalingStrategy) -> F {
    rescale_symbolic(arch.modality, strategy).eval(arch)
}

fn rescale_symbolic(modality: Modality, strategy: &ScalingStrategy) -> Symbolic {
    if modality == Modality::Language && !strategy.is_standard() {
        Symbolic { n_exp: -(1.0 + strategy.s()) / 2.0, ..Symbolic::constant(1.0) }
    } else {
        Symbolic::constant(1.0)
    }
}

fn init_std_symbolic(g: ParamGroup, s: f64, k: &ScalingConstants) -> Symbolic {
    if let Some(&std) = k.init_std_override.get(&g) {
        return Symbolic::constant(std);
    }
    let coeff = k.c(g).sqrt();
    let mut sym = Symbolic::constant(coeff);
    match g {
        ParamGroup::Patch => sym.n_in_exp = -0.5,
        ParamGroup::WordEmb | ParamGroup::PosEmb => {}
        ParamGroup::Q | ParamGroup::K | ParamGroup::V | ParamGroup::U | ParamGroup::W => {
            sym.n_exp = -0.5;
        }
        ParamGroup::X => {
            sym.n_exp = -0.5;
            sym.m_exp = -0.5;
        }
        ParamGroup::HeadW => sym.n_exp = -(1.0 + s) / 2.0,
        ParamGroup::HeadB => sym.coeff = 0.0,
    }
    sym
}

fn sgd_symbolic(g: ParamGroup, s: f64, strategy: &ScalingStrategy, k: &ScalingConstants) -> Symbolic {
    if strategy.is_standard() {
        return Symbolic::constant(1.0);
    }
    let m_exp = if strategy.ignore_mlp_multiplier { 0.0 } else { -1.0 };
    let mut sym = Symbolic::constant(k.lambda(g));
    match g {
        ParamGroup::Patch => sym.n_in_exp = -1.0,
        ParamGroup::WordEmb | ParamGroup::PosEmb => {}
        ParamGroup::Q | ParamGroup::K | ParamGroup::V | ParamGroup::U | ParamGroup::W => {
            sym.n_exp = -1.0;
        }
        ParamGroup::X => {
            sym.n_exp = -1.0;
            sym.m_exp = m_exp;
        }
        ParamGroup::HeadW => {
            sym.n_exp = -1.0;
            return sym; // head factors carry no meta shift
        }
        ParamGroup::HeadB => return sym,
    }
    sym.n_exp += s;
    sym
}

fn adamw_symbolic(g: ParamGroup, s: f64, strategy: &ScalingStrategy, k: &ScalingConstants) -> Symbolic {
    if strategy.is_standard() {
        return Symbolic::constant(1.0);
    }
    let m_exp = if strategy.ignore_mlp_multiplier { 0.0 } else { -0.5 };
    let m_exp_x = if strategy.ignore_mlp_multiplier { 0.0 } else { -1.0 };
    let mut sym = Symbolic::constant(k.lambda_tilde(g));
    match g {
        ParamGroup::Patch => {
            sym.n_in_exp = -1.0;
            sym.n_exp = -0.5;
        }
        ParamGroup::WordEmb | ParamGroup::PosEmb => sym.n_exp = -0.5,
        ParamGroup::Q | ParamGroup::K | ParamGroup::V | ParamGroup::U => sym.n_exp = -1.5,
        ParamGroup::W => {
            sym.n_exp = -1.5;
            sym.m_exp = m_exp;
        }
        ParamGroup::X => {
            sym.n_exp = -1.5;
            sym.m_exp = m_exp_x;
        }
        ParamGroup::HeadW => {
            sym.n_exp = -1.0;
            sym.n_out_exp = -0.5;
            return sym;
        }
        ParamGroup::HeadB => {
            sym.n_out_exp = -0.5;
            return sym;
        }
    }
    sym.n_exp += s / 2.0;
    sym
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Activation, BlockKind, Masking, Pooling};

    fn vit(n: usize) -> ArchSpec {
        ArchSpec {
            modality: Modality::Vision,
            n,
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
        }
    }

    fn lang(n: usize) -> ArchSpec {
        ArchSpec {
            modality: Modality::Language,
            n,
            heads: 16,
            mlp_multiplier: 4,
            tokens: 8,
            n_in: 64,
            n_out: 64,
            blocks: vec![BlockKind::Mhsa, BlockKind::Mlp],
            masking: Masking::Masked,
            eps_ln: 1e-5,
            activation: Activation::Gelu,
            pooling: Pooling::None,
            weight_tying: true,
        }
    }

    #[test]
    fn vit_neural_tangent_stds() {
        let arch = vit(768);
        let strategy = ScalingStrategy::neural_tangent();
        let plan: ScalingPlan<f64> =
            make_plan(&arch, &strategy, &ScalingConstants::for_strategy(&strategy)).unwrap();
        let patch_std = plan.init_var(ParamGroup::Patch).sqrt();
        assert!((patch_std - (768f64).powf(-0.5)).abs() < 1e-15);
        let head_std = plan.init_var(ParamGroup::HeadW).sqrt();
        assert!((head_std - (768f64).powf(-0.5)).abs() < 1e-15);
        assert_eq!(plan.init_var(ParamGroup::HeadB), 0.0);
        let pe_std = plan.init_var(ParamGroup::PosEmb).sqrt();
        assert!((pe_std - 0.02).abs() < 1e-15);
    }

    #[test]
    fn vit_maximal_update_head_std() {
        let arch = vit(768);
        let strategy = ScalingStrategy::maximal_update();
        let plan: ScalingPlan<f64> =
            make_plan(&arch, &strategy, &ScalingConstants::for_strategy(&strategy)).unwrap();
        let head_std = plan.init_var(ParamGroup::HeadW).sqrt();
        assert!((head_std - 1.0 / 768.0).abs() < 1e-15);
    }

    #[test]
    fn language_word_emb_std_by_preset() {
        let arch = lang(1024);
        let ntk = ScalingStrategy::neural_tangent();
        let plan: ScalingPlan<f64> = make_plan(&arch, &ntk, &ScalingConstants::for_strategy(&ntk)).unwrap();
        assert_eq!(plan.init_var(ParamGroup::WordEmb), 1.0);

        let std = ScalingStrategy::standard();
        let plan: ScalingPlan<f64> = make_plan(&arch, &std, &ScalingConstants::for_strategy(&std)).unwrap();
        assert!((plan.init_var(ParamGroup::WordEmb) - 0.0004).abs() < 1e-18);
    }

    #[test]
    fn unit_fan_gives_unit_variances() {
        // n = 1, H = 1, M = 1, s = 0, all C_G = 1: every variance is 1 apart
        // from the n_patch divisor.
        let mut arch = vit(1);
        arch.heads = 1;
        arch.mlp_multiplier = 1;
        arch.n_in = 4;
        let mut k = ScalingConstants::default();
        for g in ParamGroup::ALL {
            if g != ParamGroup::HeadB {
                k.c.insert(g, 1.0);
            }
        }
        let plan: ScalingPlan<f64> = make_plan(&arch, &ScalingStrategy::neural_tangent(), &k).unwrap();
        for g in [ParamGroup::PosEmb, ParamGroup::Q, ParamGroup::K, ParamGroup::V, ParamGroup::U, ParamGroup::W, ParamGroup::X, ParamGroup::HeadW] {
            assert!((plan.init_var(g) - 1.0).abs() < 1e-15, "{}", g.name());
        }
        assert!((plan.init_var(ParamGroup::Patch) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn adamw_factors_match_table() {
        let arch = vit(768);
        let strategy = ScalingStrategy::neural_tangent();
        let rows: Vec<(ParamGroup, f64)> =
            make_lr_plan(&arch, Optimizer::AdamW, &strategy, &ScalingConstants::for_strategy(&strategy))
                .unwrap();
        let get = |g: ParamGroup| rows.iter().find(|(gg, _)| *gg == g).unwrap().1;
        assert!((get(ParamGroup::HeadW) - 768f64.powi(-1) * 1000f64.powf(-0.5)).abs() < 1e-18);
        assert!((get(ParamGroup::PosEmb) - 768f64.powf(-0.5)).abs() < 1e-18);
        assert!((get(ParamGroup::Q) - 768f64.powf(-1.5)).abs() < 1e-18);
    }

    #[test]
    fn hybrid_bulk_exponent() {
        let arch = vit(768);
        let strategy = ScalingStrategy::hybrid();
        let plan: ScalingPlan<f64> =
            make_plan(&arch, &strategy, &ScalingConstants::for_strategy(&strategy)).unwrap();
        let sym = plan.group(ParamGroup::Q).unwrap().adamw_symbolic;
        assert_eq!(sym.n_exp, -1.25);
    }

    #[test]
    fn sgd_factors() {
        let arch = vit(768);
        let strategy = ScalingStrategy::neural_tangent();
        let rows: Vec<(ParamGroup, f64)> =
            make_lr_plan(&arch, Optimizer::Sgd, &strategy, &ScalingConstants::for_strategy(&strategy)).unwrap();
        let get = |g: ParamGroup| rows.iter().find(|(gg, _)| *gg == g).unwrap().1;
        assert!((get(ParamGroup::Q) - 1.0 / 768.0).abs() < 1e-18);
        assert!((get(ParamGroup::X) - 1.0 / (4.0 * 768.0)).abs() < 1e-18);
        assert_eq!(get(ParamGroup::HeadB), 1.0);
    }

    #[test]
    fn standard_preset_uniform_factors() {
        let arch = vit(768);
        let strategy = ScalingStrategy::standard();
        let plan: ScalingPlan<f64> =
            make_plan(&arch, &strategy, &ScalingConstants::for_strategy(&strategy)).unwrap();
        for (_, row) in &plan.groups {
            assert_eq!(row.sgd_factor, 1.0);
            assert_eq!(row.adamw_factor, 1.0);
        }
        assert_eq!(plan.n_rescale, 1.0);
    }

    #[test]
    fn output_rescale_values() {
        let arch = lang(1024);
        let s0: f64 = output_rescale(&arch, &ScalingStrategy::neural_tangent());
        assert!((s0 - 1024f64.powf(-0.5)).abs() < 1e-18);
        let s1: f64 = output_rescale(&arch, &ScalingStrategy::maximal_update());
        assert!((s1 - 1.0 / 1024.0).abs() < 1e-18);
        assert_eq!(output_rescale::<f64>(&arch, &ScalingStrategy::standard()), 1.0);
        assert_eq!(output_rescale::<f64>(&vit(768), &ScalingStrategy::neural_tangent()), 1.0);
    }

    #[test]
    fn meta_shift_is_exact_on_exponents() {
        // λ̃ at s is n^{s/2} times the s=0 value; head rows are s-independent.
        let arch = vit(768);
        let k = ScalingConstants::default();
        for s in [0.25, 0.5, 1.0] {
            let base: ScalingPlan<f64> = make_plan(&arch, &ScalingStrategy::neural_tangent(), &k).unwrap();
            let meta: ScalingPlan<f64> =
                make_plan(&arch, &ScalingStrategy::new(StrategyKind::Explicit(s)), &k).unwrap();
            for g in [ParamGroup::Patch, ParamGroup::PosEmb, ParamGroup::Q, ParamGroup::W, ParamGroup::X] {
                let a = base.group(g).unwrap().adamw_symbolic;
                let b = meta.group(g).unwrap().adamw_symbolic;
                assert_eq!(b.n_exp - a.n_exp, s / 2.0, "{}", g.name());
                let sg_a = base.group(g).unwrap().sgd_symbolic;
                let sg_b = meta.group(g).unwrap().sgd_symbolic;
                assert_eq!(sg_b.n_exp - sg_a.n_exp, s, "{}", g.name());
            }
            for g in [ParamGroup::HeadW, ParamGroup::HeadB] {
                assert_eq!(
                    base.group(g).unwrap().adamw_symbolic,
                    meta.group(g).unwrap().adamw_symbolic
                );
            }
        }
    }

    #[test]
    fn plan_json_roundtrip_is_bit_exact() {
        let arch = vit(768);
        let strategy = ScalingStrategy::hybrid();
        let plan: ScalingPlan<f64> =
            make_plan(&arch, &strategy, &ScalingConstants::for_strategy(&strategy)).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        let back: ScalingPlan<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(plan, back);
        let json2 = serde_json::to_string(&back).unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let arch = vit(768);
        let mut k = ScalingConstants::default();
        k.c.insert(ParamGroup::Q, -1.0);
        assert!(make_plan::<f64>(&arch, &ScalingStrategy::neural_tangent(), &k).is_err());
        let mut arch2 = arch.clone();
        arch2.heads = 7;
        assert!(make_plan::<f64>(&arch2, &ScalingStrategy::neural_tangent(), &ScalingConstants::default()).is_err());
        assert!(ScalingStrategy::new(StrategyKind::Explicit(1.5)).validate().is_err());
    }
}
