//! Gauss-Hermite rules in expectation form: `Σ_k w_k f(x_k) ≈ E[f(X)]` for
//! `X ~ N(0, 1)`, so the weights sum to one.
//!
//! Nodes come from the Golub-Welsch eigenproblem of the Jacobi matrix of the
//! orthonormal probabilists' Hermite polynomials, then get polished by Newton
//! iterations on `p_K`; weights use the Christoffel formula
//! `w_k = 1 / Σ_{j<K} p_j(x_k)²`, which stays accurate in the tails.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Orthonormal `p_0..p_{k}` at `x`; returns `(p_{k-1}, p_k, Σ_{j<k} p_j²)`.
fn orthonormal_hermite(k: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sumsq = 0.0;
    for j in 0..k {
        sumsq += cur * cur;
        let next = (x * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (prev, cur, sumsq)
}

impl GaussHermiteRule {
    pub fn new(points: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::InvalidInput("quadrature needs at least one point".into()));
        }
        let mut jacobi = DMatrix::<f64>::zeros(points, points);
        for k in 1..points {
            let b = (k as f64).sqrt();
            jacobi[(k, k - 1)] = b;
            jacobi[(k - 1, k)] = b;
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(f64::total_cmp);
        let kf = (points as f64).sqrt();
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (pm1, p, _) = orthonormal_hermite(points, *x);
                let dp = kf * pm1;
                if dp == 0.0 {
                    break;
                }
                *x -= p / dp;
            }
        }
        // Enforce exact symmetry.
        for k in 0..points / 2 {
            let m = 0.5 * (nodes[points - 1 - k] - nodes[k]);
            nodes[k] = -m;
            nodes[points - 1 - k] = m;
        }
        if points % 2 == 1 {
            nodes[points / 2] = 0.0;
        }
        let mut weights: Vec<f64> = nodes
            .iter()
            .map(|&x| 1.0 / orthonormal_hermite(points, x).2)
            .collect();
        for k in 0..points / 2 {
            let m = 0.5 * (weights[k] + weights[points - 1 - k]);
            weights[k] = m;
            weights[points - 1 - k] = m;
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, w)| w * f(x)).sum()
    }
}

/// Tensor product of a one-dimensional rule over `q` dimensions.
#[derive(Debug, Clone)]
pub struct TensorRule {
    pub q: usize,
    pub points_per_dim: usize,
    /// Flattened `len × q` node coordinates.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `ln w_k + ½|x_k|² + (q/2) ln 2π`, i.e. `ln(w_k / φ_q(x_k))`.
    pub(crate) log_ratio: Vec<f64>,
}

impl TensorRule {
    pub fn new(points: usize, q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidInput("tensor rule needs q >= 1".into()));
        }
        let base = GaussHermiteRule::new(points)?;
        let total = points
            .checked_pow(q as u32)
            .filter(|t| *t <= 5_000_000)
            .ok_or_else(|| Error::InvalidInput(format!("{points}^{q} quadrature nodes is too many")))?;
        let mut nodes = Vec::with_capacity(total * q);
        let mut weights = Vec::with_capacity(total);
        let mut log_ratio = Vec::with_capacity(total);
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut idx = vec![0usize; q];
        for _ in 0..total {
            let mut w = 1.0;
            let mut sq = 0.0;
            for &k in &idx {
                let x = base.nodes[k];
                nodes.push(x);
                w *= base.weights[k];
                sq += x * x;
            }
            weights.push(w);
            log_ratio.push(w.ln() + 0.5 * sq + q as f64 * half_ln_2pi);
            for d in (0..q).rev() {
                idx[d] += 1;
                if idx[d] < points {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self {
            q,
            points_per_dim: points,
            nodes,
            weights,
            log_ratio,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.q..(k + 1) * self.q]
    }
}
