//! Gauss–Hermite quadrature for Gaussian expectations.

use std::sync::OnceLock;

use crate::linalg::{symmetric_eigen, Matrix};

/// Nodes and weights for `∫ e^{-x²} g(x) dx ≈ Σ wᵢ g(xᵢ)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: nodes are the eigenvalues of the symmetric Jacobi
    /// matrix of the Hermite recurrence, weights come from the first
    /// eigenvector components.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "at least one node");
        let mut j = Matrix::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            j[(i - 1, i)] = b;
            j[(i, i - 1)] = b;
        }
        let eig = symmetric_eigen(&j, 1000 * n * n).expect("tridiagonal Jacobi matrix converges");
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let v0 = eig.vectors[(0, k)];
                (eig.values[k], sqrt_pi * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Enforce exact mirror symmetry of the rule.
        for i in 0..n / 2 {
            let k = n - 1 - i;
            let x = 0.5 * (pairs[k].0 - pairs[i].0);
            let w = 0.5 * (pairs[k].1 + pairs[i].1);
            pairs[i] = (-x, w);
            pairs[k] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Cached 32-node rule.
    pub fn n32() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(32))
    }

    /// Cached 64-node rule.
    pub fn n64() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(64))
    }

    /// `E[g(F)]` for `F ~ N(mean, variance)`.
    pub fn expect(&self, mean: f64, variance: f64, g: impl Fn(f64) -> f64) -> f64 {
        let scale = (2.0 * variance.max(0.0)).sqrt();
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * g(mean + scale * x))
            .sum::<f64>()
            * inv_sqrt_pi
    }
}
