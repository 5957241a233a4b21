//! Exact finite-state chains: the oracle on which every decomposition
//! identity is verified to machine precision.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::Point;
use crate::util::l1_diff;

/// Row-stochastic matrix on n states, optionally embedded in R^d for
/// metric-aware tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactChain {
    n: usize,
    p: Vec<Vec<f64>>,
    pub embedding: Option<Vec<Point>>,
}

impl ExactChain {
    pub fn new(p: Vec<Vec<f64>>) -> Result<ExactChain> {
        let n = p.len();
        if n == 0 {
            return Err(CoreError::Input("chain needs at least one state".into()));
        }
        for (i, row) in p.iter().enumerate() {
            if row.len() != n {
                return Err(CoreError::Input(format!("row {i} has length {}", row.len())));
            }
            if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(CoreError::Input(format!("row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(CoreError::Input(format!("row {i} sums to {s}, expected 1")));
            }
        }
        Ok(ExactChain {
            n,
            p,
            embedding: None,
        })
    }

    pub fn with_embedding(mut self, points: Vec<Point>) -> Result<ExactChain> {
        if points.len() != self.n {
            return Err(CoreError::Input("embedding size differs from state count".into()));
        }
        self.embedding = Some(points);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &Vec<Vec<f64>> {
        &self.p
    }
}

/// One exact dual step: dist . P. Preserves the simplex exactly up to
/// rounding in the dot products.
pub fn chain_dual_step(chain: &ExactChain, dist: &[f64]) -> Result<Vec<f64>> {
    if dist.len() != chain.n {
        return Err(CoreError::DimensionMismatch {
            expected: chain.n,
            got: dist.len(),
        });
    }
    let mut out = vec![0.0f64; chain.n];
    for (i, w) in dist.iter().enumerate() {
        if *w != 0.0 {
            for (j, pij) in chain.p[i].iter().enumerate() {
                out[j] += w * pij;
            }
        }
    }
    Ok(out)
}

/// Unique stationary distribution via the linear solve (P^T - I) pi = 0
/// with the normalization row sum(pi) = 1 appended.
pub fn chain_stationary(chain: &ExactChain) -> Result<Vec<f64>> {
    let n = chain.n;
    // Detect non-uniqueness: the kernel of P^T - I must be one-dimensional.
    let a = DMatrix::from_fn(n, n, |i, j| {
        chain.p[j][i] - if i == j { 1.0 } else { 0.0 }
    });
    let svd = a.clone().svd(false, false);
    let null_dim = svd
        .singular_values
        .iter()
        .filter(|s| **s < 1e-10)
        .count();
    if null_dim != 1 {
        return Err(CoreError::Degenerate(format!(
            "stationary distribution not unique: kernel dimension {null_dim}"
        )));
    }

    // Replace the last equation by the normalization constraint.
    let mut m = a;
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut rhs = DMatrix::zeros(n, 1);
    rhs[(n - 1, 0)] = 1.0;
    let pi = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CoreError::Degenerate("singular stationary system".into()))?;
    let pi: Vec<f64> = pi.iter().cloned().collect();

    let step = chain_dual_step(chain, &pi)?;
    let residual = l1_diff(&step, &pi);
    if residual > 1e-12 {
        return Err(CoreError::Numeric(format!(
            "stationary residual {residual:.3e} exceeds 1e-12"
        )));
    }
    Ok(pi)
}
