//! Posterior expectations `E[A(z) | y]` and marginal likelihoods under five
//! approximations: classical Laplace, fully exponential Laplace (FLA),
//! Gauss-Hermite (GH), and adaptive GH centred either at the posterior mode
//! (AGH-mode) or at running posterior moments (AGH-mean).

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    dsigma_dt, find_mode, log_kernel, FlaFunctional, LatentFunction, ModeConfig, PosteriorGeometry,
};
use crate::model::{ModelParams, OrdinalDataset};
use crate::quadrature::TensorRule;

pub const DEFAULT_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ApproximationMethod {
    Laplace,
    Fla,
    Gh { points: usize },
    AghMode { points: usize },
    AghMean { points: usize },
}

impl ApproximationMethod {
    pub fn points(&self) -> Option<usize> {
        match *self {
            Self::Laplace | Self::Fla => None,
            Self::Gh { points } | Self::AghMode { points } | Self::AghMean { points } => Some(points),
        }
    }

    pub fn with_points(self, k: usize) -> Self {
        match self {
            Self::Gh { .. } => Self::Gh { points: k },
            Self::AghMode { .. } => Self::AghMode { points: k },
            Self::AghMean { .. } => Self::AghMean { points: k },
            other => other,
        }
    }

    pub fn needs_mode(&self) -> bool {
        matches!(self, Self::Laplace | Self::Fla | Self::AghMode { .. })
    }

    pub fn is_quadrature(&self) -> bool {
        self.points().is_some()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Laplace => "laplace",
            Self::Fla => "fla",
            Self::Gh { .. } => "gh",
            Self::AghMode { .. } => "agh-mode",
            Self::AghMean { .. } => "agh-mean",
        }
    }
}

impl fmt::Display for ApproximationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.points() {
            Some(k) => write!(f, "{}:{k}", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// Parses `laplace`, `fla`, `gh`, `agh-mode`, `agh-mean`, optionally suffixed
/// with `:K` for the quadrature variants.
impl FromStr for ApproximationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, points) = match s.split_once(':') {
            Some((n, k)) => {
                let k: usize = k
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad point count in `{s}`")))?;
                (n.trim(), Some(k))
            }
            None => (s.trim(), None),
        };
        let k = points.unwrap_or(DEFAULT_POINTS);
        if k == 0 {
            return Err(Error::InvalidInput("quadrature needs K >= 1".into()));
        }
        let method = match name.to_ascii_lowercase().as_str() {
            "laplace" => Self::Laplace,
            "fla" => Self::Fla,
            "gh" => Self::Gh { points: k },
            "agh-mode" | "agh_mode" => Self::AghMode { points: k },
            "agh-mean" | "agh_mean" => Self::AghMean { points: k },
            _ => return Err(Error::InvalidInput(format!("unknown method `{name}`"))),
        };
        if points.is_some() && !method.is_quadrature() {
            return Err(Error::InvalidInput(format!("`{name}` takes no point count")));
        }
        Ok(method)
    }
}

impl TryFrom<String> for ApproximationMethod {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ApproximationMethod> for String {
    fn from(m: ApproximationMethod) -> String {
        m.to_string()
    }
}

/// A discrete posterior: nodes with normalised weights, plus the log of the
/// marginal likelihood estimated from the same pass.
#[derive(Debug, Clone)]
pub struct PosteriorNodes {
    pub q: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_marginal: f64,
}

impl PosteriorNodes {
    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.q..(k + 1) * self.q]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn expect_with(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| if *w == 0.0 { 0.0 } else { w * f(self.node(k)) })
            .sum()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.q);
        for (k, w) in self.weights.iter().enumerate() {
            for (j, v) in self.node(k).iter().enumerate() {
                m[j] += w * v;
            }
        }
        m
    }

    pub fn covariance(&self, mean: &DVector<f64>) -> DMatrix<f64> {
        let q = self.q;
        let mut c = DMatrix::zeros(q, q);
        for (k, w) in self.weights.iter().enumerate() {
            let z = self.node(k);
            for r in 0..q {
                let dr = z[r] - mean[r];
                for s in 0..q {
                    c[(r, s)] += w * dr * (z[s] - mean[s]);
                }
            }
        }
        c
    }
}

/// Places `rule` at `center + L x` (with `LL'` the proposal covariance) and
/// weights each node by `exp(log_kernel)`, where `log_kernel` includes the prior.
pub fn adaptive_nodes(
    log_kernel: impl Fn(&[f64]) -> f64,
    center: &DVector<f64>,
    factor: &DMatrix<f64>,
    rule: &TensorRule,
) -> PosteriorNodes {
    let q = rule.q;
    let log_det: f64 = factor.diagonal().iter().map(|d| d.abs().ln()).sum();
    let mut nodes = Vec::with_capacity(rule.nodes.len());
    let mut logw = Vec::with_capacity(rule.len());
    let mut z = vec![0.0; q];
    for k in 0..rule.len() {
        let x = rule.node(k);
        for r in 0..q {
            z[r] = center[r] + (0..q).map(|c| factor[(r, c)] * x[c]).sum::<f64>();
        }
        nodes.extend_from_slice(&z);
        logw.push(rule.log_ratio[k] + log_det + log_kernel(&z));
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    PosteriorNodes {
        q,
        nodes,
        weights,
        log_marginal: max + total.ln(),
    }
}

/// Classical GH: nodes from the prior.
pub fn gh_posterior(params: &ModelParams, pattern: &[usize], rule: &TensorRule) -> PosteriorNodes {
    let q = params.q;
    adaptive_nodes(
        |z| log_kernel(params, pattern, z, None),
        &DVector::zeros(q),
        &DMatrix::identity(q, q),
        rule,
    )
}

/// Lower Cholesky factor of `Σ⁻¹`.
fn inverse_factor(geometry: &PosteriorGeometry) -> Result<DMatrix<f64>> {
    let cov = geometry.cholesky()?.inverse();
    Cholesky::new(cov)
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite("posterior covariance"))
}

/// AGH placed at the mode with covariance `Σ⁻¹`.
pub fn agh_mode_posterior(
    params: &ModelParams,
    pattern: &[usize],
    geometry: &PosteriorGeometry,
    rule: &TensorRule,
) -> Result<PosteriorNodes> {
    let factor = inverse_factor(geometry)?;
    Ok(adaptive_nodes(
        |z| log_kernel(params, pattern, z, None),
        &geometry.mode,
        &factor,
        rule,
    ))
}

/// Running posterior moments for AGH-mean, one per observation.
#[derive(Debug, Clone)]
pub struct AghState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Set when a refreshed covariance was not positive definite and was reset.
    pub reset: bool,
}

impl AghState {
    pub fn new(q: usize) -> Self {
        Self {
            mean: DVector::zeros(q),
            covariance: DMatrix::identity(q, q),
            reset: false,
        }
    }

    fn refresh(&mut self, nodes: &PosteriorNodes) {
        let mean = nodes.mean();
        let cov = nodes.covariance(&mean);
        if mean.iter().all(|v| v.is_finite()) {
            self.mean = mean;
        }
        if cov.iter().all(|v| v.is_finite()) && Cholesky::new(cov.clone()).is_some() {
            self.covariance = cov;
        } else {
            self.covariance = DMatrix::identity(self.mean.len(), self.mean.len());
            self.reset = true;
        }
    }
}

/// AGH at the state's mean and covariance; afterwards the state holds the
/// moments computed from this pass.
pub fn agh_mean_posterior(
    params: &ModelParams,
    pattern: &[usize],
    rule: &TensorRule,
    state: &mut AghState,
) -> Result<PosteriorNodes> {
    let factor = match Cholesky::new(state.covariance.clone()) {
        Some(c) => c.l(),
        None => {
            state.covariance = DMatrix::identity(params.q, params.q);
            state.reset = true;
            DMatrix::identity(params.q, params.q)
        }
    };
    let nodes = adaptive_nodes(|z| log_kernel(params, pattern, z, None), &state.mean, &factor, rule);
    if !nodes.log_marginal.is_finite() {
        return Err(Error::Numerical("AGH-mean produced a non-finite marginal".into()));
    }
    state.refresh(&nodes);
    Ok(nodes)
}

/// Runs AGH-mean passes from `state` until the mean moves less than `tol`.
pub fn converge_agh_state(
    params: &ModelParams,
    pattern: &[usize],
    rule: &TensorRule,
    state: &mut AghState,
    tol: f64,
    max_passes: usize,
) -> Result<PosteriorNodes> {
    let mut nodes = agh_mean_posterior(params, pattern, rule, state)?;
    for _ in 1..max_passes {
        let before = state.mean.clone();
        nodes = agh_mean_posterior(params, pattern, rule, state)?;
        if (&state.mean - before).amax() < tol {
            break;
        }
    }
    Ok(nodes)
}

pub fn expectation_laplace(geometry: &PosteriorGeometry, component: &dyn LatentFunction) -> f64 {
    component.value(geometry.mode.as_slice())
}

/// `A(ẑ) - ½ tr(Σ⁻¹ ∂Σ/∂t)` evaluated at the untilted mode.
pub fn expectation_fla(
    params: &ModelParams,
    pattern: &[usize],
    geometry: &PosteriorGeometry,
    component: &dyn LatentFunction,
) -> Result<f64> {
    if !geometry.converged {
        return Err(Error::Numerical("posterior mode did not converge".into()));
    }
    let ds = dsigma_dt(params, pattern, geometry, component)?;
    let omega = geometry.cholesky()?.solve(&ds);
    Ok(component.value(geometry.mode.as_slice()) - 0.5 * omega.trace())
}

pub fn expectation_gh(
    params: &ModelParams,
    pattern: &[usize],
    component: &dyn LatentFunction,
    rule: &TensorRule,
) -> f64 {
    gh_posterior(params, pattern, rule).expect_with(|z| component.value(z))
}

pub fn expectation_agh_mode(
    params: &ModelParams,
    pattern: &[usize],
    geometry: &PosteriorGeometry,
    component: &dyn LatentFunction,
    rule: &TensorRule,
) -> Result<f64> {
    Ok(agh_mode_posterior(params, pattern, geometry, rule)?.expect_with(|z| component.value(z)))
}

pub fn expectation_agh_mean(
    params: &ModelParams,
    pattern: &[usize],
    component: &dyn LatentFunction,
    rule: &TensorRule,
    state: &mut AghState,
) -> Result<f64> {
    Ok(agh_mean_posterior(params, pattern, rule, state)?.expect_with(|z| component.value(z)))
}

/// The posterior of one observation as seen by an E-step.
#[derive(Debug, Clone)]
pub enum PosteriorApprox {
    /// Laplace: all mass at the mode.
    Point(DVector<f64>),
    Fla(FlaFunctional),
    Nodes(PosteriorNodes),
}

impl PosteriorApprox {
    pub fn expect(&self, f: &dyn LatentFunction) -> f64 {
        match self {
            Self::Point(z) => f.value(z.as_slice()),
            Self::Fla(fla) => fla.expect(f),
            Self::Nodes(n) => n.expect_with(|z| f.value(z)),
        }
    }
}

/// Observed-data log-likelihood `Σ_l log ∫ g(y_l|z) h(z) dz`.
///
/// Laplace and FLA share the Laplace determinant formula. AGH-mean adapts
/// each observation from the prior until its mean settles.
pub fn log_marginal_lik(
    params: &ModelParams,
    data: &OrdinalDataset,
    method: ApproximationMethod,
) -> Result<f64> {
    params.check_dataset(data)?;
    let rule = method.points().map(|k| TensorRule::new(k, params.q)).transpose()?;
    let mode_cfg = ModeConfig::default();
    let mut total = 0.0;
    for (pattern, count) in data.unique_patterns() {
        let ll = match method {
            ApproximationMethod::Laplace | ApproximationMethod::Fla => {
                find_mode(params, &pattern, None, None, &mode_cfg)?.laplace_log_integral()?
            }
            ApproximationMethod::Gh { .. } => {
                gh_posterior(params, &pattern, rule.as_ref().unwrap()).log_marginal
            }
            ApproximationMethod::AghMode { .. } => {
                let geo = find_mode(params, &pattern, None, None, &mode_cfg)?;
                agh_mode_posterior(params, &pattern, &geo, rule.as_ref().unwrap())?.log_marginal
            }
            ApproximationMethod::AghMean { .. } => {
                let mut state = AghState::new(params.q);
                converge_agh_state(params, &pattern, rule.as_ref().unwrap(), &mut state, 1e-10, 50)?
                    .log_marginal
            }
        };
        total += count as f64 * ll;
    }
    Ok(total)
}
