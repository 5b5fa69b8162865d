//! Architecture description: dimensions, block sequence, and parameter groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;

/// Input modality. Vision models patchify real-valued vectors; language
/// models embed one-hot token ids and tie the head to the word embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Vision,
    Language,
}

/// Self-attention masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Masking {
    Bidirectional,
    Masked,
}

/// A residual block in the bulk of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Mhsa,
    Mlp,
}

/// MLP activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    /// σ(x).
    pub fn eval<F: Float>(self, x: F) -> F {
        match self {
            Activation::Relu => {
                if x > F::zero() {
                    x
                } else {
                    F::zero()
                }
            }
            // Exact error-function form, x·Φ(x).
            Activation::Gelu => x * normal_cdf(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// σ′(x) in closed form.
    pub fn deriv<F: Float>(self, x: F) -> F {
        match self {
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Activation::Tanh => {
                let t = x.tanh();
                F::one() - t * t
            }
            Activation::Identity => F::one(),
        }
    }
}

/// Standard normal CDF Φ(x) = (1 + erf(x/√2))/2.
pub fn normal_cdf<F: Float>(x: F) -> F {
    let half = F::cast(0.5);
    half * (F::one() + (x / F::cast(std::f64::consts::SQRT_2)).erf())
}

/// Standard normal density φ(x).
pub fn normal_pdf<F: Float>(x: F) -> F {
    let norm = F::cast(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    norm * (-x * x / F::cast(2.0)).exp()
}

/// Output pooling applied after the head block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    None,
    TokenMean,
}

/// Parameter groups: every trainable tensor belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Patch,
    WordEmb,
    PosEmb,
    Q,
    K,
    V,
    U,
    W,
    X,
    HeadW,
    HeadB,
}

impl ParamGroup {
    /// All groups in canonical order (stem to head).
    pub const ALL: [ParamGroup; 11] = [
        ParamGroup::Patch,
        ParamGroup::WordEmb,
        ParamGroup::PosEmb,
        ParamGroup::Q,
        ParamGroup::K,
        ParamGroup::V,
        ParamGroup::U,
        ParamGroup::W,
        ParamGroup::X,
        ParamGroup::HeadW,
        ParamGroup::HeadB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Patch => "patch",
            ParamGroup::WordEmb => "word_emb",
            ParamGroup::PosEmb => "pos_emb",
            ParamGroup::Q => "q",
            ParamGroup::K => "k",
            ParamGroup::V => "v",
            ParamGroup::U => "u",
            ParamGroup::W => "w",
            ParamGroup::X => "x",
            ParamGroup::HeadW => "head_w",
            ParamGroup::HeadB => "head_b",
        }
    }

    /// Groups present in a model of the given modality.
    pub fn for_modality(modality: Modality) -> Vec<ParamGroup> {
        match modality {
            Modality::Vision => vec![
                ParamGroup::Patch,
                ParamGroup::PosEmb,
                ParamGroup::Q,
                ParamGroup::K,
                ParamGroup::V,
                ParamGroup::U,
                ParamGroup::W,
                ParamGroup::X,
                ParamGroup::HeadW,
                ParamGroup::HeadB,
            ],
            Modality::Language => vec![
                ParamGroup::WordEmb,
                ParamGroup::PosEmb,
                ParamGroup::Q,
                ParamGroup::K,
                ParamGroup::V,
                ParamGroup::U,
                ParamGroup::W,
                ParamGroup::X,
            ],
        }
    }
}

/// Full architecture description.
///
/// Layer-norm affine parameters are fixed (γ=1, β=0) and skip gains ξ=1, so
/// they do not appear here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSpec {
    pub modality: Modality,
    /// Embedding width n.
    pub n: usize,
    /// Head count H; per-head channels C = n/H must be an integer.
    pub heads: usize,
    /// MLP multiplier M.
    pub mlp_multiplier: usize,
    /// Token count T.
    pub tokens: usize,
    /// Input dimension: n_patch for vision, n_vocab for language.
    pub n_in: usize,
    /// Output dimension: class count for vision, vocabulary for language.
    pub n_out: usize,
    /// Ordered residual blocks; `depth()` is its length.
    pub blocks: Vec<BlockKind>,
    pub masking: Masking,
    /// Layer-norm regularizer ε.
    pub eps_ln: f64,
    pub activation: Activation,
    pub pooling: Pooling,
    /// Share the word embedding between stem and head (language only).
    pub weight_tying: bool,
}

impl ArchSpec {
    /// Number of residual blocks between stem and head.
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Per-head channels C = n/H.
    pub fn head_channels(&self) -> usize {
        self.n / self.heads
    }

    /// Total block count L counting stem (1) and head (L).
    pub fn total_blocks(&self) -> usize {
        self.depth() + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.heads == 0 || self.mlp_multiplier == 0 || self.n_in == 0 || self.n_out == 0 {
            return Err(Error::InvalidArch("all dimensions must be positive".into()));
        }
        if self.tokens == 0 {
            return Err(Error::InvalidArch("token count T must be at least 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidArch("depth must be at least 1".into()));
        }
        if self.n % self.heads != 0 {
            return Err(Error::InvalidArch(format!(
                "per-head channels n/H = {}/{} must be an integer",
                self.n, self.heads
            )));
        }
        if self.eps_ln < 0.0 {
            return Err(Error::InvalidArch("eps_ln must be nonnegative".into()));
        }
        if self.weight_tying && self.modality != Modality::Language {
            return Err(Error::InvalidArch("weight tying is only valid for language models".into()));
        }
        Ok(())
    }

    /// Copy of this architecture at a different width, preserving C = n/H.
    pub fn at_width(&self, n: usize) -> Result<ArchSpec> {
        let c = self.head_channels();
        if n % c != 0 {
            return Err(Error::InvalidArch(format!(
                "width {n} does not preserve per-head channels {c}"
            )));
        }
        let mut arch = self.clone();
        arch.n = n;
        arch.heads = n / c;
        arch.validate()?;
        Ok(arch)
    }
}
