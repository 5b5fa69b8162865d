//! Finite-width model parameters drawn from a scaling plan.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, BlockKind, Modality, ParamGroup};
use crate::error::Result;
use crate::plan::ScalingPlan;
use crate::rng::stream;

/// Initialization distribution; both are mean-zero with the plan's variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitDist {
    Normal,
    Uniform,
}

/// One MHSA block's weights: per-head query/key/value (H, C, n) and the
/// unifying matrix (H, n, C).
#[derive(Debug, Clone)]
pub struct MhsaParams {
    pub q: Array3<f64>,
    pub k: Array3<f64>,
    pub v: Array3<f64>,
    pub u: Array3<f64>,
}

/// One MLP block's weights: expansion (Mn, n) and contraction (n, Mn).
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w: Array2<f64>,
    pub x: Array2<f64>,
}

#[derive(Debug, Clone)]
pub enum BlockParams {
    Mhsa(MhsaParams),
    Mlp(MlpParams),
}

/// Head parameters. Language heads reuse the word embedding transposed; an
/// untied language head draws an independent copy with the same statistics.
#[derive(Debug, Clone)]
pub enum HeadParams {
    Vision { w: Array2<f64>, b: Array1<f64> },
    LanguageTied,
    LanguageUntied { emb: Array2<f64> },
}

/// Concrete parameter tensors for one initialization.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: ArchSpec,
    /// Patchify or word-embedding matrix, (n, n_in).
    pub emb: Array2<f64>,
    /// Positional embedding, (T, n).
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
    /// Output rescale applied at a language head.
    pub n_rescale: f64,
    pub dist: InitDist,
    pub seed: u64,
}

fn draw<R: Rng>(rng: &mut R, dist: InitDist, std: f64) -> f64 {
    match dist {
        InitDist::Normal => {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            std * z
        }
        // Uniform on [−√3·σ, √3·σ] has variance σ².
        InitDist::Uniform => {
            let half = 3.0f64.sqrt() * std;
            rng.gen_range(-half..=half)
        }
    }
}

fn fill2(shape: (usize, usize), dist: InitDist, std: f64, seed: u64, site: &str, index: u64) -> Array2<f64> {
    let mut rng = stream(seed, site, index);
    Array2::from_shape_simple_fn(shape, || draw(&mut rng, dist, std))
}

fn fill3(shape: (usize, usize, usize), dist: InitDist, std: f64, seed: u64, site: &str, index: u64) -> Array3<f64> {
    let mut rng = stream(seed, site, index);
    Array3::from_shape_simple_fn(shape, || draw(&mut rng, dist, std))
}

/// Draws one model. Entries are i.i.d. mean-zero with the plan's per-group
/// variance; the same `(seed, dist)` always reproduces the same tensors.
pub fn init_model(arch: &ArchSpec, plan: &ScalingPlan<f64>, seed: u64, dist: InitDist) -> Result<ModelParams> {
    arch.validate()?;
    let n = arch.n;
    let c = arch.head_channels();
    let h = arch.heads;
    let mn = arch.mlp_multiplier * n;

    let emb_group = match arch.modality {
        Modality::Vision => ParamGroup::Patch,
        Modality::Language => ParamGroup::WordEmb,
    };
    let emb = fill2((n, arch.n_in), dist, plan.init_var(emb_group).sqrt(), seed, "init/emb", 0);
    let pos = fill2((arch.tokens, n), dist, plan.init_var(ParamGroup::PosEmb).sqrt(), seed, "init/pos", 0);

    let mut blocks = Vec::with_capacity(arch.depth());
    for (i, kind) in arch.blocks.iter().enumerate() {
        let idx = i as u64;
        let block = match kind {
            BlockKind::Mhsa => BlockParams::Mhsa(MhsaParams {
                q: fill3((h, c, n), dist, plan.init_var(ParamGroup::Q).sqrt(), seed, "init/q", idx),
                k: fill3((h, c, n), dist, plan.init_var(ParamGroup::K).sqrt(), seed, "init/k", idx),
                v: fill3((h, c, n), dist, plan.init_var(ParamGroup::V).sqrt(), seed, "init/v", idx),
                u: fill3((h, n, c), dist, plan.init_var(ParamGroup::U).sqrt(), seed, "init/u", idx),
            }),
            BlockKind::Mlp => BlockParams::Mlp(MlpParams {
                w: fill2((mn, n), dist, plan.init_var(ParamGroup::W).sqrt(), seed, "init/w", idx),
                x: fill2((n, mn), dist, plan.init_var(ParamGroup::X).sqrt(), seed, "init/x", idx),
            }),
        };
        blocks.push(block);
    }

    let head = match arch.modality {
        Modality::Vision => HeadParams::Vision {
            w: fill2((arch.n_out, n), dist, plan.init_var(ParamGroup::HeadW).sqrt(), seed, "init/head_w", 0),
            b: Array1::zeros(arch.n_out),
        },
        Modality::Language => {
            if arch.weight_tying {
                HeadParams::LanguageTied
            } else {
                HeadParams::LanguageUntied {
                    emb: fill2((n, arch.n_in), dist, plan.init_var(ParamGroup::WordEmb).sqrt(), seed, "init/head_emb", 0),
                }
            }
        }
    };

    Ok(ModelParams {
        arch: arch.clone(),
        emb,
        pos,
        blocks,
        head,
        n_rescale: plan.n_rescale,
        dist,
        seed,
    })
}

impl ModelParams {
    /// Width of the head input matrix used at the output layer.
    pub fn head_emb(&self) -> &Array2<f64> {
        match &self.head {
            HeadParams::LanguageTied => &self.emb,
            HeadParams::LanguageUntied { emb } => emb,
            HeadParams::Vision { .. } => unreachable!("vision heads have no embedding matrix"),
        }
    }

    /// Whether the stem and head share the embedding tensor.
    pub fn tied(&self) -> bool {
        matches!(self.head, HeadParams::LanguageTied)
    }

    /// Applies `f` to every (group, mutable tensor view) pair, visiting each
    /// trainable tensor exactly once.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(ParamGroup, &mut [f64])) {
        let emb_group = match self.arch.modality {
            Modality::Vision => ParamGroup::Patch,
            Modality::Language => ParamGroup::WordEmb,
        };
        f(emb_group, self.emb.as_slice_mut().expect("contiguous"));
        f(ParamGroup::PosEmb, self.pos.as_slice_mut().expect("contiguous"));
        for block in &mut self.blocks {
            match block {
                BlockParams::Mhsa(m) => {
                    f(ParamGroup::Q, m.q.as_slice_mut().expect("contiguous"));
                    f(ParamGroup::K, m.k.as_slice_mut().expect("contiguous"));
                    f(ParamGroup::V, m.v.as_slice_mut().expect("contiguous"));
                    f(ParamGroup::U, m.u.as_slice_mut().expect("contiguous"));
                }
                BlockParams::Mlp(m) => {
                    f(ParamGroup::W, m.w.as_slice_mut().expect("contiguous"));
                    f(ParamGroup::X, m.x.as_slice_mut().expect("contiguous"));
                }
            }
        }
        match &mut self.head {
            HeadParams::Vision { w, b } => {
                f(ParamGroup::HeadW, w.as_slice_mut().expect("contiguous"));
                f(ParamGroup::HeadB, b.as_slice_mut().expect("contiguous"));
            }
            HeadParams::LanguageTied => {}
            HeadParams::LanguageUntied { emb } => {
                f(ParamGroup::WordEmb, emb.as_slice_mut().expect("contiguous"));
            }
        }
    }
}
