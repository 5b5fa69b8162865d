//! TOML run configuration shared by all subcommands.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tangents::arch::{Activation, ArchSpec, BlockKind, Masking, Modality, ParamGroup, Pooling};
use tangents::inputs::Batch;
use tangents::plan::{Optimizer, ScalingConstants, ScalingStrategy, StrategyKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub modality: Modality,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_multiplier")]
    pub mlp_multiplier: usize,
    pub tokens: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub blocks: Vec<BlockKind>,
    #[serde(default = "default_masking")]
    pub masking: Masking,
    #[serde(default = "default_eps_ln")]
    pub eps_ln: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    #[serde(default)]
    pub weight_tying: bool,
}

fn default_mlp_multiplier() -> usize {
    4
}

fn default_masking() -> Masking {
    Masking::Bidirectional
}

fn default_eps_ln() -> f64 {
    1e-6
}

fn default_activation() -> Activation {
    Activation::Gelu
}

fn default_pooling() -> Pooling {
    Pooling::None
}

impl ArchConfig {
    pub fn to_arch(&self) -> ArchSpec {
        ArchSpec {
            modality: self.modality,
            n: self.width,
            heads: self.heads,
            mlp_multiplier: self.mlp_multiplier,
            tokens: self.tokens,
            n_in: self.input_dim,
            n_out: self.output_dim,
            blocks: self.blocks.clone(),
            masking: self.masking,
            eps_ln: self.eps_ln,
            activation: self.activation,
            pooling: self.pooling,
            weight_tying: self.weight_tying,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(default)]
    pub preset: Option<String>,
    /// Explicit interpolation exponent; overrides `preset`.
    #[serde(default)]
    pub s: Option<f64>,
    #[serde(default)]
    pub ignore_mlp_multiplier: bool,
}

impl StrategyConfig {
    pub fn to_strategy(&self) -> anyhow::Result<ScalingStrategy> {
        let kind = match (&self.preset, self.s) {
            (_, Some(s)) => StrategyKind::Explicit(s),
            (Some(name), None) => match name.as_str() {
                "standard" => StrategyKind::Standard,
                "neural-tangent" => StrategyKind::NeuralTangent,
                "hybrid" => StrategyKind::Hybrid,
                "maximal-update" => StrategyKind::MaximalUpdate,
                other => bail!("unknown strategy preset `{other}`"),
            },
            (None, None) => StrategyKind::NeuralTangent,
        };
        let strategy = ScalingStrategy { kind, ignore_mlp_multiplier: self.ignore_mlp_multiplier };
        strategy.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(strategy)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    /// Initialization covariances C_G, keyed by group name.
    #[serde(default)]
    pub c: BTreeMap<String, f64>,
    /// SGD order-one factors Λ_G.
    #[serde(default)]
    pub lambda: BTreeMap<String, f64>,
    /// AdamW order-one factors.
    #[serde(default)]
    pub lambda_tilde: BTreeMap<String, f64>,
    /// Pin a group's initialization std to a fixed value.
    #[serde(default)]
    pub init_std_override: BTreeMap<String, f64>,
}

fn group_by_name(name: &str) -> anyhow::Result<ParamGroup> {
    ParamGroup::ALL
        .iter()
        .copied()
        .find(|g| g.name() == name)
        .with_context(|| format!("unknown parameter group `{name}`"))
}

impl ConstantsConfig {
    pub fn to_constants(&self, strategy: &ScalingStrategy) -> anyhow::Result<ScalingConstants> {
        let mut k = ScalingConstants::for_strategy(strategy);
        for (name, &v) in &self.c {
            k.c.insert(group_by_name(name)?, v);
        }
        for (name, &v) in &self.lambda {
            k.lambda.insert(group_by_name(name)?, v);
        }
        for (name, &v) in &self.lambda_tilde {
            k.lambda_tilde.insert(group_by_name(name)?, v);
        }
        for (name, &v) in &self.init_std_override {
            k.init_std_override.insert(group_by_name(name)?, v);
        }
        k.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(k)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_optimizer")]
    pub kind: Optimizer,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

fn default_optimizer() -> Optimizer {
    Optimizer::AdamW
}

fn default_lr() -> f64 {
    1e-3
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: default_optimizer(), lr: default_lr() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    #[serde(default = "default_moment_samples")]
    pub moment_samples: usize,
    #[serde(default = "default_quad_order")]
    pub quad_order: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_moment_samples() -> usize {
    4096
}

fn default_quad_order() -> usize {
    64
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig { moment_samples: default_moment_samples(), quad_order: default_quad_order(), seed: 0 }
    }
}

/// Inputs: either explicit values or a seeded random batch.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InputsConfig {
    /// Explicit vision inputs, batch × tokens × input_dim.
    #[serde(default)]
    pub vision: Option<Vec<Vec<Vec<f64>>>>,
    /// Explicit language token ids, batch × tokens.
    #[serde(default)]
    pub language: Option<Vec<Vec<usize>>>,
    /// Number of random samples to draw when no explicit inputs are given.
    #[serde(default = "default_random_batch")]
    pub random_batch: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_random_batch() -> usize {
    2
}

impl InputsConfig {
    pub fn to_batch(&self, arch: &ArchSpec) -> anyhow::Result<Batch<f64>> {
        let batch = match (arch.modality, &self.vision, &self.language) {
            (Modality::Vision, Some(x), _) => {
                let samples = x.len();
                if samples == 0 {
                    bail!("vision inputs are empty");
                }
                let mut arr = ndarray::Array3::zeros((samples, arch.tokens, arch.n_in));
                for (a, sample) in x.iter().enumerate() {
                    if sample.len() != arch.tokens {
                        bail!("vision sample {a} has {} tokens, expected {}", sample.len(), arch.tokens);
                    }
                    for (t, vec) in sample.iter().enumerate() {
                        if vec.len() != arch.n_in {
                            bail!("vision sample {a} token {t} has dim {}, expected {}", vec.len(), arch.n_in);
                        }
                        for (j, &v) in vec.iter().enumerate() {
                            arr[(a, t, j)] = v;
                        }
                    }
                }
                Batch::Vision(arr)
            }
            (Modality::Language, _, Some(ids)) => {
                let samples = ids.len();
                if samples == 0 {
                    bail!("language inputs are empty");
                }
                let mut arr = ndarray::Array2::zeros((samples, arch.tokens));
                for (a, row) in ids.iter().enumerate() {
                    if row.len() != arch.tokens {
                        bail!("language sample {a} has {} tokens, expected {}", row.len(), arch.tokens);
                    }
                    for (t, &id) in row.iter().enumerate() {
                        arr[(a, t)] = id;
                    }
                }
                Batch::Language(arr)
            }
            (Modality::Vision, None, _) => Batch::random_vision(self.random_batch, arch.tokens, arch.n_in, self.seed),
            (Modality::Language, _, None) => {
                Batch::random_language(self.random_batch, arch.tokens, arch.n_in, self.seed)
            }
        };
        batch.validate(arch).map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(batch)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Strictly increasing widths used by the multi-width checks.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_n_inits")]
    pub n_inits: usize,
    #[serde(default = "default_verify_seed")]
    pub seed: u64,
    /// Output channels probed by the NTK estimator.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Initializations for the fluctuation-moment (eightfold) check.
    #[serde(default = "default_fluct_inits")]
    pub fluctuation_inits: usize,
    /// Initializations for the attention-Gaussianity check.
    #[serde(default = "default_gauss_inits")]
    pub gaussianity_inits: usize,
}

fn default_widths() -> Vec<usize> {
    vec![128, 256, 512]
}

fn default_n_inits() -> usize {
    128
}

fn default_verify_seed() -> u64 {
    7
}

fn default_channels() -> Vec<usize> {
    vec![0, 1]
}

fn default_fluct_inits() -> usize {
    8192
}

fn default_gauss_inits() -> usize {
    1024
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            widths: default_widths(),
            n_inits: default_n_inits(),
            seed: default_verify_seed(),
            channels: default_channels(),
            fluctuation_inits: default_fluct_inits(),
            gaussianity_inits: default_gauss_inits(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub constants: ConstantsConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub propagation: PropagationConfig,
    #[serde(default)]
    pub inputs: InputsConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let arch = self.arch.to_arch();
        arch.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        let strategy = self.strategy.to_strategy()?;
        self.constants.to_constants(&strategy)?;
        if !self.verify.widths.windows(2).all(|w| w[0] < w[1]) {
            bail!("verify.widths must be strictly increasing");
        }
        if self.verify.widths.is_empty() {
            bail!("verify.widths must not be empty");
        }
        if self.optimizer.lr <= 0.0 || !self.optimizer.lr.is_finite() {
            bail!("optimizer.lr must be positive");
        }
        let c = arch.head_channels();
        for &w in &self.verify.widths {
            if w % c != 0 {
                bail!("verify width {w} does not preserve per-head channels {c}");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
[arch]
modality = "vision"
width = 64
heads = 4
tokens = 3
input_dim = 12
output_dim = 7
blocks = ["mhsa", "mlp"]

[strategy]
preset = "neural-tangent"

[verify]
widths = [64, 128]
n_inits = 16
"#;

    #[test]
    fn parses_minimal_config() {
        let config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        config.validate().unwrap();
        assert_eq!(config.arch.to_arch().n, 64);
        assert_eq!(config.optimizer.kind, Optimizer::AdamW);
    }

    #[test]
    fn rejects_unsorted_widths() {
        let mut config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        config.verify.widths = vec![128, 64];
        assert!(config.validate().is_err());
    }

    #[test]
    fn rejects_unknown_group_and_preset() {
        let mut config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        config.strategy.preset = Some("bogus".into());
        assert!(config.validate().is_err());
        let mut config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        config.constants.c.insert("nope".into(), 1.0);
        assert!(config.validate().is_err());
    }
}
