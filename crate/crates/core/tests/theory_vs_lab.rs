//! Cross-validation of the infinite-width recursions against the
//! finite-width Monte-Carlo lab at moderate width.

use tangents::arch::{Activation, ArchSpec, BlockKind, Masking, Modality, Pooling};
use tangents::inputs::Batch;
use tangents::kernel::{propagate_kernels, PropagationSettings};
use tangents::lab::{empirical_kernel, empirical_ntk};
use tangents::ntk::propagate_ntk_with_kernels;
use tangents::plan::{make_plan, ScalingConstants, ScalingPlan, ScalingStrategy};

fn vision_arch(n: usize) -> ArchSpec {
    ArchSpec {
        modality: Modality::Vision,
        n,
        heads: 4,
        mlp_multiplier: 2,
        tokens: 3,
        n_in: 12,
        n_out: 7,
        blocks: vec![BlockKind::Mhsa, BlockKind::Mlp],
        masking: Masking::Bidirectional,
        eps_ln: 1e-6,
        activation: Activation::Gelu,
        pooling: Pooling::None,
        weight_tying: false,
    }
}

/// Weight tying correlates the head with the stem; the leading-order theory
/// holds for n ≲ n_vocab, so desk-scale language checks keep the vocabulary
/// several times wider than the embedding.
fn language_arch(n: usize) -> ArchSpec {
    ArchSpec {
        modality: Modality::Language,
        n,
        heads: 4,
        mlp_multiplier: 2,
        tokens: 3,
        n_in: 2048,
        n_out: 2048,
        blocks: vec![BlockKind::Mhsa, BlockKind::Mlp],
        masking: Masking::Masked,
        eps_ln: 1e-6,
        activation: Activation::Gelu,
        pooling: Pooling::None,
        weight_tying: true,
    }
}

/// Token ids with repeats within and across samples, exercising every input
/// kernel case.
fn language_batch() -> Batch<f64> {
    Batch::Language(ndarray::arr2(&[[7usize, 4, 4], [9, 4, 1]]))
}

fn plan_for(arch: &ArchSpec) -> ScalingPlan<f64> {
    let strategy = ScalingStrategy::neural_tangent();
    make_plan(arch, &strategy, &ScalingConstants::for_strategy(&strategy)).unwrap()
}

#[test]
fn forward_kernels_match_simulation_vision() {
    let arch = vision_arch(256);
    let plan = plan_for(&arch);
    let batch = Batch::random_vision(2, arch.tokens, arch.n_in, 19);
    let settings = PropagationSettings { moment_samples: 65_536, quad_order: 64, seed: 3 };
    let theory = propagate_kernels(&arch, &plan, &batch, &settings).unwrap();
    let emp = empirical_kernel(&arch, &plan, &batch, 384, 5).unwrap();

    // Per level ℓ = 1…L, every entry within combined error plus O(1/n) slack.
    let slack = 8.0 / arch.n as f64;
    for level in 1..=arch.total_blocks() {
        let th = &theory.blocks[level];
        let e = &emp.per_block[level - 1];
        for p in 0..th.g.dim() {
            for q in 0..th.g.dim() {
                let diff = (th.g.get(p, q) - e.estimate[(p, q)]).abs();
                let tol = 4.0 * e.stderr[(p, q)] + 4.0 * th.g_stderr[(p, q)] + slack;
                assert!(
                    diff < tol,
                    "level {level} ({}) entry ({p},{q}): theory {} vs emp {} ± {} (diff {diff}, tol {tol})",
                    th.label,
                    th.g.get(p, q),
                    e.estimate[(p, q)],
                    e.stderr[(p, q)]
                );
            }
        }
    }
}

#[test]
fn forward_kernels_match_simulation_language() {
    // Tied head: bulk levels follow the leading-order theory; the head level
    // additionally carries the stem–head contact term (suppressed as
    // n/n_vocab but not by 1/n), so it is checked on the untied variant.
    let arch = language_arch(192);
    let plan = plan_for(&arch);
    let batch = language_batch();
    let settings = PropagationSettings { moment_samples: 65_536, quad_order: 64, seed: 4 };
    let theory = propagate_kernels(&arch, &plan, &batch, &settings).unwrap();
    let emp = empirical_kernel(&arch, &plan, &batch, 384, 6).unwrap();

    let slack = 8.0 / arch.n as f64;
    for level in 1..arch.total_blocks() {
        let th = &theory.blocks[level];
        let e = &emp.per_block[level - 1];
        for p in 0..th.g.dim() {
            for q in 0..th.g.dim() {
                let diff = (th.g.get(p, q) - e.estimate[(p, q)]).abs();
                let tol = 4.0 * e.stderr[(p, q)] + 4.0 * th.g_stderr[(p, q)] + slack;
                assert!(
                    diff < tol,
                    "level {level} ({}) entry ({p},{q}): theory {} vs emp {} (diff {diff}, tol {tol})",
                    th.label,
                    th.g.get(p, q),
                    e.estimate[(p, q)]
                );
            }
        }
    }

    let mut untied = arch.clone();
    untied.weight_tying = false;
    let theory = propagate_kernels(&untied, &plan, &batch, &settings).unwrap();
    let emp = empirical_kernel(&untied, &plan, &batch, 384, 6).unwrap();
    let level = untied.total_blocks();
    let th = &theory.blocks[level];
    let e = &emp.per_block[level - 1];
    for p in 0..th.g.dim() {
        for q in 0..th.g.dim() {
            let diff = (th.g.get(p, q) - e.estimate[(p, q)]).abs();
            let tol = 4.0 * e.stderr[(p, q)] + 4.0 * th.g_stderr[(p, q)] + slack;
            assert!(diff < tol, "untied head entry ({p},{q}): diff {diff}, tol {tol}");
        }
    }
}

#[test]
fn ntk_matches_simulation_vision() {
    let arch = vision_arch(256);
    let plan = plan_for(&arch);
    let batch = Batch::random_vision(2, arch.tokens, arch.n_in, 23);
    let settings = PropagationSettings { moment_samples: 65_536, quad_order: 64, seed: 7 };
    let kernels = propagate_kernels(&arch, &plan, &batch, &settings).unwrap();
    let theory = propagate_ntk_with_kernels(&arch, &plan, &kernels).unwrap();
    let emp = empirical_ntk(&arch, &plan, &batch, 256, 8, &[0, 1]).unwrap();

    let slack = 16.0 / arch.n as f64;
    let th = theory.last();
    for p in 0..th.theta.dim() {
        for q in 0..th.theta.dim() {
            let diff = (th.theta.get(p, q) - emp.total.estimate[(p, q)]).abs();
            let tol = 4.0 * emp.total.stderr[(p, q)] + slack;
            assert!(
                diff < tol,
                "total Θ entry ({p},{q}): theory {} vs emp {} ± {} (diff {diff}, tol {tol})",
                th.theta.get(p, q),
                emp.total.estimate[(p, q)],
                emp.total.stderr[(p, q)]
            );
        }
    }
    // Per-group totals.
    for (group, part) in &th.by_group {
        let e = emp.by_group.get(group).expect("group estimated");
        for p in 0..part.dim() {
            for q in 0..part.dim() {
                let diff = (part.get(p, q) - e.estimate[(p, q)]).abs();
                let tol = 4.0 * e.stderr[(p, q)] + slack;
                assert!(
                    diff < tol,
                    "group {group:?} entry ({p},{q}): theory {} vs emp {} ± {} (diff {diff}, tol {tol})",
                    part.get(p, q),
                    e.estimate[(p, q)],
                    e.stderr[(p, q)]
                );
            }
        }
    }
}

#[test]
fn ntk_matches_simulation_language_tied() {
    let arch = language_arch(256);
    let plan = plan_for(&arch);
    let batch = language_batch();
    let settings = PropagationSettings { moment_samples: 65_536, quad_order: 64, seed: 9 };
    let kernels = propagate_kernels(&arch, &plan, &batch, &settings).unwrap();
    let theory = propagate_ntk_with_kernels(&arch, &plan, &kernels).unwrap();
    let emp = empirical_ntk(&arch, &plan, &batch, 192, 10, &[2, 3]).unwrap();

    let slack = 16.0 / arch.n as f64;
    let th = theory.last();
    for p in 0..th.theta.dim() {
        for q in 0..th.theta.dim() {
            let diff = (th.theta.get(p, q) - emp.total.estimate[(p, q)]).abs();
            let tol = 4.0 * emp.total.stderr[(p, q)] + slack;
            assert!(
                diff < tol,
                "total Θ entry ({p},{q}): theory {} vs emp {} ± {} (diff {diff}, tol {tol})",
                th.theta.get(p, q),
                emp.total.estimate[(p, q)],
                emp.total.stderr[(p, q)]
            );
        }
    }
}
