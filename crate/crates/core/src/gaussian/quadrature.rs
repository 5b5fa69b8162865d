//! Gauss–Hermite nodes and weights via Golub–Welsch.
//!
//! Nodes/weights are for the weight function e^{-x²}; expectations under a
//! standard normal use the √2 substitution in [`super::gauss_pair_expect`].

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

/// Nodes and weights of the order-`n` Gauss–Hermite rule.
#[derive(Debug, Clone)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn cache() -> &'static Mutex<HashMap<usize, Arc<HermiteRule>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<HermiteRule>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Returns the cached rule of the given order (≥ 1).
pub fn hermite_rule(order: usize) -> Arc<HermiteRule> {
    assert!(order >= 1, "quadrature order must be at least 1");
    let mut guard = cache().lock().expect("quadrature cache poisoned");
    guard.entry(order).or_insert_with(|| Arc::new(compute_rule(order))).clone()
}

fn compute_rule(order: usize) -> HermiteRule {
    // Jacobi matrix of the Hermite recurrence: zero diagonal, off-diagonal
    // β_k = √(k/2). Eigenvalues are the nodes; the squared first eigenvector
    // components scaled by √π are the weights.
    let mut jacobi = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let v0 = eig.eigenvectors[(0, i)];
            (node, std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    HermiteRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}
