//! Helpers shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use srf_core::MarkovTriple;

/// `∫_{b0}^{b1} dβ / √(p Λ(1-β, β))` by composite five-point Gauss–Legendre.
pub fn two_point_oracle(p: f64, b0: f64, b1: f64) -> f64 {
    let nodes = [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664];
    let weights = [0.236_926_885_056_189, 0.478_628_670_499_366, 0.568_888_888_888_889, 0.478_628_670_499_366, 0.236_926_885_056_189];
    let lm = |s: f64, t: f64| if (s - t).abs() < 1e-9 * (s + t) { 0.5 * (s + t) } else { (s - t) / (s.ln() - t.ln()) };
    let m = 2000;
    let h = (b1 - b0) / m as f64;
    let mut total = 0.0;
    for i in 0..m {
        let c = b0 + (i as f64 + 0.5) * h;
        for (x, w) in nodes.iter().zip(weights) {
            let b = c + 0.5 * h * x;
            total += 0.5 * h * w / (p * lm(1.0 - b, b)).sqrt();
        }
    }
    total.abs()
}

pub fn measure(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Reversible triple from a stationary law and symmetric conductances.
pub fn reversible(pi: &[f64], c: &[(usize, usize, f64)]) -> MarkovTriple {
    let n = pi.len();
    let s: f64 = pi.iter().sum();
    let pi: Vec<f64> = pi.iter().map(|p| p / s).collect();
    let mut q = DMatrix::zeros(n, n);
    for &(x, y, w) in c {
        q[(x, y)] = w / pi[x];
        q[(y, x)] = w / pi[y];
    }
    MarkovTriple::new((0..n).map(|i| format!("v{i}")).collect(), q, DVector::from_vec(pi)).unwrap()
}
