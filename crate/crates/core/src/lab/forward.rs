//! Exact forward pass of a finite-width Transformer, recording every
//! intermediate needed for reverse-mode differentiation.

use ndarray::{Array2, Array3};

use crate::arch::{ArchSpec, BlockKind, Masking, Modality};
use crate::error::{Error, Result};
use crate::inputs::Batch;

use super::params::{BlockParams, HeadParams, ModelParams};

/// Per-MHSA-block intermediates. Query/key/value are (H, R, C) with the
/// merged row index r = α·T + t; logits and attention are (H, R, T).
#[derive(Debug, Clone)]
pub struct MhsaTrace {
    pub q: Array3<f64>,
    pub k: Array3<f64>,
    pub v: Array3<f64>,
    pub wtilde: Array3<f64>,
    pub omega: Array3<f64>,
}

#[derive(Debug, Clone)]
pub enum BlockTrace {
    Mhsa(MhsaTrace),
    /// MLP middle-layer preactivations (R, Mn).
    Mlp { w_pre: Array2<f64> },
}

/// Everything a backward pass needs: preactivations per block, normalized
/// signals, per-block intermediates, outputs, and the pooled outputs when
/// token-mean pooling is on.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub samples: usize,
    pub tokens: usize,
    /// z⁽¹⁾ … z⁽ᴸ⁻¹⁾ as (R, n); the head output lives in `output`.
    pub z: Vec<Array2<f64>>,
    /// s⁽¹⁾ … s⁽ᴸ⁻¹⁾ as (R, n).
    pub s: Vec<Array2<f64>>,
    /// 1/√(var + ε) per (block, row), for layer-norm backward.
    pub ln_inv_std: Vec<Vec<f64>>,
    pub blocks: Vec<BlockTrace>,
    /// z⁽ᴸ⁾, (R, n_out).
    pub output: Array2<f64>,
    /// Token-mean-pooled outputs, (|D|, n_out).
    pub pooled: Option<Array2<f64>>,
}

impl ForwardTrace {
    pub fn row(&self, sample: usize, token: usize) -> usize {
        sample * self.tokens + token
    }
}

fn ensure_finite(block: &str, values: &Array2<f64>) -> Result<()> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite { block: block.to_string(), detail: format!("value {bad}") });
    }
    Ok(())
}

/// Embeds the batch: z⁽¹⁾_{r,i} = b^PE_{t,i} + Σ_j emb_{ij}·x_{r,j}.
fn stem(params: &ModelParams, batch: &Batch<f64>) -> Array2<f64> {
    let arch = &params.arch;
    let r_count = batch.positions();
    let tokens = batch.tokens();
    let mut z = Array2::zeros((r_count, arch.n));
    match batch {
        Batch::Vision(x) => {
            // (R, n_in) × (n, n_in)ᵀ
            let xs = x.to_shape((r_count, arch.n_in)).expect("contiguous batch");
            let prod = xs.dot(&params.emb.t());
            z.assign(&prod);
        }
        Batch::Language(ids) => {
            for a in 0..ids.shape()[0] {
                for t in 0..tokens {
                    let id = ids[(a, t)];
                    let r = a * tokens + t;
                    for i in 0..arch.n {
                        z[(r, i)] = params.emb[(i, id)];
                    }
                }
            }
        }
    }
    for a in 0..batch.samples() {
        for t in 0..tokens {
            let r = a * tokens + t;
            for i in 0..arch.n {
                z[(r, i)] += params.pos[(t, i)];
            }
        }
    }
    z
}

/// Layer norm with γ=1, β=0; returns (s, 1/√(var+ε)).
fn layer_norm(z: &Array2<f64>, eps: f64) -> (Array2<f64>, Vec<f64>) {
    let (rows, n) = (z.shape()[0], z.shape()[1]);
    let mut s = Array2::zeros((rows, n));
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = z.row(r);
        let mean = row.sum() / n as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for i in 0..n {
            s[(r, i)] = (z[(r, i)] - mean) * inv;
        }
    }
    (s, inv_std)
}

fn mhsa_forward(params: &super::params::MhsaParams, s: &Array2<f64>, arch: &ArchSpec, samples: usize) -> (Array2<f64>, MhsaTrace) {
    let tokens = arch.tokens;
    let rows = samples * tokens;
    let h_count = arch.heads;
    let c = arch.head_channels();
    let scale = 1.0 / (c as f64).sqrt();

    let mut q = Array3::zeros((h_count, rows, c));
    let mut k = Array3::zeros((h_count, rows, c));
    let mut v = Array3::zeros((h_count, rows, c));
    let mut wtilde = Array3::zeros((h_count, rows, tokens));
    let mut omega = Array3::zeros((h_count, rows, tokens));
    let mut r_out = Array2::zeros((rows, arch.n));

    for h in 0..h_count {
        let qh = s.dot(&params.q.index_axis(ndarray::Axis(0), h).t());
        let kh = s.dot(&params.k.index_axis(ndarray::Axis(0), h).t());
        let vh = s.dot(&params.v.index_axis(ndarray::Axis(0), h).t());
        q.index_axis_mut(ndarray::Axis(0), h).assign(&qh);
        k.index_axis_mut(ndarray::Axis(0), h).assign(&kh);
        v.index_axis_mut(ndarray::Axis(0), h).assign(&vh);

        for a in 0..samples {
            let base = a * tokens;
            for t in 0..tokens {
                let limit = match arch.masking {
                    Masking::Bidirectional => tokens,
                    Masking::Masked => t + 1,
                };
                // logits
                let mut max = f64::NEG_INFINITY;
                for tp in 0..limit {
                    let mut dot = 0.0;
                    for cc in 0..c {
                        dot += qh[(base + t, cc)] * kh[(base + tp, cc)];
                    }
                    let w = dot * scale;
                    wtilde[(h, base + t, tp)] = w;
                    if w > max {
                        max = w;
                    }
                }
                for tp in limit..tokens {
                    wtilde[(h, base + t, tp)] = 0.0;
                }
                // softmax over the visible range
                let mut denom = 0.0;
                for tp in 0..limit {
                    let e = (wtilde[(h, base + t, tp)] - max).exp();
                    omega[(h, base + t, tp)] = e;
                    denom += e;
                }
                for tp in 0..limit {
                    omega[(h, base + t, tp)] /= denom;
                }
                for tp in limit..tokens {
                    omega[(h, base + t, tp)] = 0.0;
                }
                // weighted values through the unifying matrix
                for cc in 0..c {
                    let mut ov = 0.0;
                    for tp in 0..limit {
                        ov += omega[(h, base + t, tp)] * vh[(base + tp, cc)];
                    }
                    for i in 0..arch.n {
                        r_out[(base + t, i)] += params.u[(h, i, cc)] * ov;
                    }
                }
            }
        }
    }
    (r_out, MhsaTrace { q, k, v, wtilde, omega })
}

fn mlp_forward(params: &super::params::MlpParams, s: &Array2<f64>, arch: &ArchSpec) -> (Array2<f64>, Array2<f64>) {
    let w_pre = s.dot(&params.w.t());
    let act = w_pre.mapv(|x| arch.activation.eval(x));
    let r = act.dot(&params.x.t());
    (r, w_pre)
}

/// Runs the exact forward pass in double precision.
pub fn forward_pass(params: &ModelParams, batch: &Batch<f64>) -> Result<ForwardTrace> {
    let arch = &params.arch;
    batch.validate(arch)?;
    let samples = batch.samples();
    let tokens = batch.tokens();
    let eps = arch.eps_ln;

    let z1 = stem(params, batch);
    ensure_finite("stem", &z1)?;

    let mut z_levels = vec![z1];
    let mut s_levels = Vec::new();
    let mut inv_levels = Vec::new();
    let mut block_traces = Vec::new();

    for (i, block) in params.blocks.iter().enumerate() {
        let z = z_levels.last().expect("stem pushed");
        let (s, inv) = layer_norm(z, eps);
        let (r, trace) = match block {
            BlockParams::Mhsa(m) => {
                let (r, t) = mhsa_forward(m, &s, arch, samples);
                (r, BlockTrace::Mhsa(t))
            }
            BlockParams::Mlp(m) => {
                let (r, w_pre) = mlp_forward(m, &s, arch);
                (r, BlockTrace::Mlp { w_pre })
            }
        };
        let label = match arch.blocks[i] {
            BlockKind::Mhsa => format!("mhsa@{}", i + 2),
            BlockKind::Mlp => format!("mlp@{}", i + 2),
        };
        let z_next = z + &r;
        ensure_finite(&label, &z_next)?;
        s_levels.push(s);
        inv_levels.push(inv);
        block_traces.push(trace);
        z_levels.push(z_next);
    }

    let z_last = z_levels.last().expect("nonempty");
    let (s_last, inv_last) = layer_norm(z_last, eps);
    let output = match (&params.head, arch.modality) {
        (HeadParams::Vision { w, b }, Modality::Vision) => {
            let mut out = s_last.dot(&w.t());
            for mut row in out.rows_mut() {
                row += b;
            }
            out
        }
        (_, Modality::Language) => {
            let emb = params.head_emb();
            s_last.dot(emb) * params.n_rescale
        }
        _ => return Err(Error::ShapeMismatch("head does not match modality".into())),
    };
    ensure_finite("head", &output)?;
    s_levels.push(s_last);
    inv_levels.push(inv_last);

    let pooled = match arch.pooling {
        crate::arch::Pooling::None => None,
        crate::arch::Pooling::TokenMean => {
            let mut pooled = Array2::zeros((samples, arch.n_out));
            for a in 0..samples {
                for t in 0..tokens {
                    for i in 0..arch.n_out {
                        pooled[(a, i)] += output[(a * tokens + t, i)] / tokens as f64;
                    }
                }
            }
            Some(pooled)
        }
    };

    Ok(ForwardTrace {
        samples,
        tokens,
        z: z_levels,
        s: s_levels,
        ln_inv_std: inv_levels,
        blocks: block_traces,
        output,
        pooled,
    })
}
