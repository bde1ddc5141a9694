//! Gauss–Hermite quadrature for expectations over scalar Gaussians.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

/// Orthonormal Hermite polynomial of degree `n` at `z` and its derivative.
fn hermite_derivative(n: usize, z: f64) -> (f64, f64) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let (mut p1, mut p2) = (PIM4, 0.0);
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// Nodes and weights for `∫ exp(-x²) f(x) dx`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Computes an `n`-point rule. Starting values come from the
    /// eigenvalues of the Jacobi matrix; each node is then polished by
    /// Newton steps on the orthonormal Hermite recurrence, which also
    /// yields the weight.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite needs at least one node");
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut starts: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        starts.sort_by(|a, b| b.total_cmp(a));

        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let half = n.div_ceil(2);
        for i in 0..half {
            let mut z = starts[i];
            let mut dp = hermite_derivative(n, z).1;
            for _ in 0..8 {
                let (p, d) = hermite_derivative(n, z);
                dp = d;
                let step = p / d;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    dp = hermite_derivative(n, z).1;
                    break;
                }
            }
            if n % 2 == 1 && i == half - 1 {
                z = 0.0;
                dp = hermite_derivative(n, z).1;
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (dp * dp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    /// Shared rule for `n` nodes, built once per process.
    pub fn cached(n: usize) -> Arc<Self> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        guard
            .entry(n)
            .or_insert_with(|| Arc::new(GaussHermite::new(n)))
            .clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[g(X)]` for `X ~ N(mean, sd²)`.
    pub fn expectation(&self, mean: f64, sd: f64, g: impl Fn(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sd;
        let s: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * g(mean + scale * x))
            .sum();
        s / PI.sqrt()
    }
}
