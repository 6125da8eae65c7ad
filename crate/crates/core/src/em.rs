//! Full-information maximum likelihood via EM.
//!
//! Each iteration finds posterior modes (when the method needs them), builds a
//! per-pattern [`PosteriorApprox`] (E-step) and then solves the expected score
//! equations item by item with Newton-Raphson (M-step). Observations sharing a
//! response pattern share a posterior, so work is done per distinct pattern.

use std::time::Duration;

// std's clock panics on wasm32-unknown-unknown.
#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    find_mode, regularized_cholesky, FlaFunctional, RidgeMoments,
    ModeConfig,
};
use crate::integrate::{
    agh_mean_posterior, agh_mode_posterior, converge_agh_state, gh_posterior, AghState,
    ApproximationMethod, PosteriorApprox,
};
use crate::model::{default_mask, ItemParams, ModelParams, OrdinalDataset, MIN_THRESHOLD_GAP};
use crate::parallel::map_indexed;
use crate::quadrature::TensorRule;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum InitPolicy {
    /// Thresholds from logits of smoothed empirical cumulative frequencies,
    /// free loadings set to `loading`.
    Empirical { loading: f64 },
    /// As `Empirical`, with free loadings jittered uniformly by `±spread`
    /// using the fit seed.
    Jittered { loading: f64, spread: f64 },
    Given(ModelParams),
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self::Empirical { loading: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub method: ApproximationMethod,
    pub max_em_iter: usize,
    /// Convergence requires the largest parameter change below this...
    pub param_tol: f64,
    /// ...and the change in log-likelihood below this.
    pub loglik_tol: f64,
    pub mstep_tol: f64,
    pub mstep_max_iter: usize,
    pub mode: ModeConfig,
    pub init: InitPolicy,
    pub seed: u64,
    /// Fits with any `|α| > loading_bound` are invalid.
    pub loading_bound: f64,
    /// Overrides the default identification mask.
    pub mask: Option<Vec<Vec<bool>>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            method: ApproximationMethod::Fla,
            max_em_iter: 500,
            param_tol: 1e-4,
            loglik_tol: 1e-6,
            mstep_tol: 1e-8,
            mstep_max_iter: 50,
            mode: ModeConfig::default(),
            init: InitPolicy::default(),
            seed: 0,
            loading_bound: 25.0,
            mask: None,
        }
    }
}

impl FitConfig {
    pub fn with_method(method: ApproximationMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.param_tol > 0.0 && self.loglik_tol > 0.0 && self.mstep_tol > 0.0 && self.mode.tol > 0.0)
        {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.max_em_iter == 0 || self.mstep_max_iter == 0 || self.mode.max_iter == 0 {
            return Err(Error::InvalidInput("iteration limits must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct IterationRecord {
    pub log_lik: f64,
    /// Largest parameter change of the M-step that produced these parameters
    /// (`None` for the starting values).
    pub max_change: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub log_lik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub valid: bool,
    pub failure: Option<String>,
    pub trace: Vec<IterationRecord>,
    pub elapsed: Duration,
}

/// Distinct response patterns with frequencies.
#[derive(Debug, Clone)]
pub struct PatternSet {
    pub patterns: Vec<Vec<usize>>,
    pub counts: Vec<f64>,
}

impl PatternSet {
    pub fn from_dataset(data: &OrdinalDataset) -> Self {
        let (patterns, counts) = data
            .unique_patterns()
            .into_iter()
            .map(|(p, c)| (p, c as f64))
            .unzip();
        Self { patterns, counts }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Per-pattern state carried across EM iterations.
#[derive(Debug, Clone)]
pub struct EmWorkspace {
    pub modes: Vec<Option<DVector<f64>>>,
    pub agh: Vec<AghState>,
}

impl EmWorkspace {
    pub fn new(n_patterns: usize, q: usize) -> Self {
        Self {
            modes: vec![None; n_patterns],
            agh: vec![AghState::new(q); n_patterns],
        }
    }
}

/// Output of one E-step.
#[derive(Debug, Clone)]
pub struct EStep {
    pub posteriors: Vec<PosteriorApprox>,
    /// Approximate observed-data log-likelihood at the E-step parameters.
    pub log_lik: f64,
    /// Patterns whose mode search did not converge even from a cold start.
    pub mode_failures: usize,
}

struct PatternOutcome {
    posterior: PosteriorApprox,
    log_lik: f64,
    mode: Option<DVector<f64>>,
    agh: Option<AghState>,
    mode_failed: bool,
}

fn e_step_pattern(
    params: &ModelParams,
    pattern: &[usize],
    method: ApproximationMethod,
    rule: Option<&TensorRule>,
    warm: Option<&DVector<f64>>,
    agh: &AghState,
    mode_cfg: &ModeConfig,
) -> Result<PatternOutcome> {
    let mut mode_failed = false;
    let geometry = if method.needs_mode() {
        let mut geo = find_mode(params, pattern, None, warm.map(|m| m.as_slice()), mode_cfg)?;
        if !geo.converged && warm.is_some() {
            geo = find_mode(params, pattern, None, None, mode_cfg)?;
        }
        mode_failed = !geo.converged;
        Some(geo)
    } else {
        None
    };
    let mode = geometry.as_ref().map(|g| g.mode.clone());
    let (posterior, log_lik, agh) = match method {
        ApproximationMethod::Laplace => {
            let geo = geometry.unwrap();
            let ll = geo.laplace_log_integral()?;
            (PosteriorApprox::Point(geo.mode), ll, None)
        }
        ApproximationMethod::Fla => {
            let geo = geometry.unwrap();
            let ll = geo.laplace_log_integral()?;
            (PosteriorApprox::Fla(FlaFunctional::new(params, pattern, &geo)?), ll, None)
        }
        ApproximationMethod::Gh { .. } => {
            let nodes = gh_posterior(params, pattern, rule.unwrap());
            let ll = nodes.log_marginal;
            (PosteriorApprox::Nodes(nodes), ll, None)
        }
        ApproximationMethod::AghMode { .. } => {
            let nodes = agh_mode_posterior(params, pattern, &geometry.unwrap(), rule.unwrap())?;
            let ll = nodes.log_marginal;
            (PosteriorApprox::Nodes(nodes), ll, None)
        }
        ApproximationMethod::AghMean { .. } => {
            let mut state = agh.clone();
            let nodes = agh_mean_posterior(params, pattern, rule.unwrap(), &mut state)?;
            let ll = nodes.log_marginal;
            (PosteriorApprox::Nodes(nodes), ll, Some(state))
        }
    };
    if !log_lik.is_finite() {
        return Err(Error::Numerical("non-finite marginal likelihood".into()));
    }
    Ok(PatternOutcome {
        posterior,
        log_lik,
        mode,
        agh,
        mode_failed,
    })
}

/// Builds the posterior approximation of every pattern at `params` and
/// updates the warm-start / adaptive state in `ws`.
pub fn e_step(
    params: &ModelParams,
    patterns: &PatternSet,
    method: ApproximationMethod,
    rule: Option<&TensorRule>,
    ws: &mut EmWorkspace,
    mode_cfg: &ModeConfig,
) -> Result<EStep> {
    let outcomes = map_indexed(patterns.len(), |l| {
        e_step_pattern(
            params,
            &patterns.patterns[l],
            method,
            rule,
            ws.modes[l].as_ref(),
            &ws.agh[l],
            mode_cfg,
        )
    });
    let mut posteriors = Vec::with_capacity(patterns.len());
    let mut log_lik = 0.0;
    let mut mode_failures = 0;
    for (l, out) in outcomes.into_iter().enumerate() {
        let out = out?;
        log_lik += patterns.counts[l] * out.log_lik;
        mode_failures += usize::from(out.mode_failed);
        if out.mode.is_some() {
            ws.modes[l] = out.mode;
        }
        if let Some(state) = out.agh {
            ws.agh[l] = state;
        }
        posteriors.push(out.posterior);
    }
    Ok(EStep {
        posteriors,
        log_lik,
        mode_failures,
    })
}

/// Posterior approximation for a single pattern from scratch (cold mode
/// start; AGH-mean adapted from the prior until its mean settles).
pub fn posterior_for_pattern(
    params: &ModelParams,
    pattern: &[usize],
    method: ApproximationMethod,
) -> Result<PosteriorApprox> {
    params.check_pattern(pattern)?;
    let rule = method.points().map(|k| TensorRule::new(k, params.q)).transpose()?;
    if let ApproximationMethod::AghMean { .. } = method {
        let mut state = AghState::new(params.q);
        let nodes = converge_agh_state(params, pattern, rule.as_ref().unwrap(), &mut state, 1e-10, 100)?;
        return Ok(PosteriorApprox::Nodes(nodes));
    }
    let out = e_step_pattern(
        params,
        pattern,
        method,
        rule.as_ref(),
        None,
        &AghState::new(params.q),
        &ModeConfig::default(),
    )?;
    if out.mode_failed {
        return Err(Error::Numerical("posterior mode did not converge".into()));
    }
    Ok(out.posterior)
}

/// `Ê(S(a_i))` for one item and response, written into `out` (scaled by
/// `weight`, accumulated).
///
/// Laplace and FLA posteriors assemble the score from the expectations of
/// `A1_y`, `A2_{y-1}` and `A3_y` combined with the cumulative indicators;
/// node-based posteriors integrate the complete-data score directly.
pub fn accumulate_expected_score(
    item: &ItemParams,
    y: usize,
    posterior: &PosteriorApprox,
    weight: f64,
    out: &mut [f64],
) {
    match posterior {
        PosteriorApprox::Nodes(nodes) => {
            for (k, w) in nodes.weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                accumulate_complete_score(item, y, nodes.node(k), weight * w, out);
            }
        }
        PosteriorApprox::Point(z) => {
            accumulate_ridge_score(item, y, &RidgeMoments::point(z.as_slice(), &item.loadings), weight, out)
        }
        PosteriorApprox::Fla(f) => accumulate_ridge_score(item, y, &f.ridge(&item.loadings), weight, out),
    }
}

/// Component assembly: `Ê(A1_y)` and `Ê(A2_{y-1})` enter the threshold
/// coordinates with signs from the cumulative indicators, `-Ê(A3_y)` the
/// loadings. Every component is a function of `x = α'z` (times `z_j` for A3).
fn accumulate_ridge_score(item: &ItemParams, y: usize, r: &RidgeMoments, weight: f64, out: &mut [f64]) {
    let nt = item.thresholds.len();
    let x = r.center;
    if y <= nt {
        // dA1/dx = w, d²A1/dx² = -u
        let e = r.expect(item.a1_at(x, y), item.w_at(x, y), -item.u_at(x, y));
        out[y - 1] += weight * e;
    }
    if y >= 2 {
        let e = r.expect(item.a2_at(x, y - 1), -item.w_at(x, y - 1), item.u_at(x, y - 1));
        out[y - 2] -= weight * e;
    }
    let f = item.a3_factor_at(x, y);
    let w = item.w_at(x, y) + item.w_at(x, y - 1);
    let u = item.u_at(x, y) + item.u_at(x, y - 1);
    for j in 0..item.q() {
        out[nt + j] -= weight * r.expect_times_coord(j, f, w, -u);
    }
}

/// `Ê[log π_y]` for a point or FLA posterior.
fn ridge_log_prob(item: &ItemParams, y: usize, r: &RidgeMoments) -> f64 {
    let x = r.center;
    let f = item.a3_factor_at(x, y);
    let w = item.w_at(x, y) + item.w_at(x, y - 1);
    r.expect(item.log_prob_at(x, y), -f, -w)
}

/// Complete-data score at one `z`, accumulated into `out`.
#[inline]
fn accumulate_complete_score(item: &ItemParams, y: usize, z: &[f64], weight: f64, out: &mut [f64]) {
    let nt = item.thresholds.len();
    let l = item.local_at(item.project(z), y);
    if y <= nt {
        out[y - 1] += weight * l.a1(y);
    }
    if y >= 2 {
        out[y - 2] -= weight * l.a2(y == nt + 1);
    }
    let f = weight * l.a3_factor();
    for (o, zj) in out[nt..].iter_mut().zip(z) {
        *o -= f * zj;
    }
}

/// Gradient and Hessian of `log π_y(z)` accumulated in compact coordinates
/// `(τ_y, τ_{y-1}, α_1..α_q)`; only these enter `π_y`. Slots for thresholds
/// that do not exist at the boundary categories stay zero.
struct CompactDerivs {
    q: usize,
    grad: Vec<f64>,
    hess: Vec<f64>,
    full: Vec<f64>,
}

impl CompactDerivs {
    fn new(q: usize) -> Self {
        let m = q + 2;
        Self {
            q,
            grad: vec![0.0; m],
            hess: vec![0.0; m * m],
            full: vec![0.0; m],
        }
    }

    #[inline]
    fn add(&mut self, item: &ItemParams, y: usize, z: &[f64], weight: f64) {
        let q = self.q;
        let m = q + 2;
        let nt = item.thresholds.len();
        let l = item.local_at(item.project(z), y);
        // P = γ_y - γ_{y-1}: ∂P/∂τ_y = w_y, ∂P/∂τ_{y-1} = -w_{y-1},
        // ∂P/∂α = -z (w_y - w_{y-1}); second derivatives carry u in place of w.
        let (w1, u1) = if y <= nt { (l.w_hi, l.u_hi) } else { (0.0, 0.0) };
        let (w0, u0) = if y >= 2 { (l.w_lo, l.u_lo) } else { (0.0, 0.0) };
        let da = w0 - w1;
        let daa = u1 - u0;
        let full = &mut self.full;
        full[0] = w1;
        full[1] = -w0;
        for j in 0..q {
            full[2 + j] = z[j] * da;
        }
        let wi = weight / l.gap;
        let wi2 = wi / l.gap;
        let h = &mut self.hess;
        for r in 0..m {
            self.grad[r] += wi * full[r];
            let fr = wi2 * full[r];
            for c in 0..m {
                h[r * m + c] -= fr * full[c];
            }
        }
        h[0] += wi * u1;
        h[m + 1] -= wi * u0;
        for j in 0..q {
            let a = wi * z[j];
            h[2 + j] -= a * u1;
            h[(2 + j) * m] -= a * u1;
            h[m + 2 + j] += a * u0;
            h[(2 + j) * m + 1] += a * u0;
            for k in 0..q {
                h[(2 + j) * m + 2 + k] += a * z[k] * daa;
            }
        }
    }

    /// Adds the compact block for response `y` into full `(τ, α)` storage.
    fn scatter(&self, nt: usize, y: usize, grad: &mut [f64], hess: &mut DMatrix<f64>) {
        let m = self.q + 2;
        let map = |r: usize| -> Option<usize> {
            match r {
                0 => (y <= nt).then(|| y - 1),
                1 => (y >= 2).then(|| y - 2),
                _ => Some(nt + r - 2),
            }
        };
        for r in 0..m {
            let Some(fr) = map(r) else { continue };
            grad[fr] += self.grad[r];
            for c in 0..m {
                if let Some(fc) = map(c) {
                    hess[(fr, fc)] += self.hess[r * m + c];
                }
            }
        }
    }
}

/// `Ê(S(a_i))` for one pattern under `method` at `params`.
pub fn expected_score(
    params: &ModelParams,
    pattern: &[usize],
    item: usize,
    method: ApproximationMethod,
) -> Result<Vec<f64>> {
    let it = params
        .items
        .get(item)
        .ok_or(Error::Index { what: "item", index: item, lo: 0, hi: params.p() - 1 })?;
    let post = posterior_for_pattern(params, pattern, method)?;
    let mut out = vec![0.0; it.n_params()];
    accumulate_expected_score(it, pattern[item], &post, 1.0, &mut out);
    Ok(out)
}

/// Maps between an item's `(τ, α)` and the unconstrained vector
/// `(τ_1, log(τ_2 - τ_1), …, free α)` used by the M-step.
struct ItemReparam {
    n_thresholds: usize,
    free: Vec<usize>,
    q: usize,
}

impl ItemReparam {
    fn dim(&self) -> usize {
        self.n_thresholds + self.free.len()
    }

    fn to_unconstrained(&self, item: &ItemParams) -> Vec<f64> {
        let t = &item.thresholds;
        let mut u = Vec::with_capacity(self.dim());
        u.push(t[0]);
        for s in 1..t.len() {
            u.push((t[s] - t[s - 1]).max(MIN_THRESHOLD_GAP).ln());
        }
        u.extend(self.free.iter().map(|&j| item.loadings[j]));
        u
    }

    fn to_item(&self, u: &[f64]) -> ItemParams {
        let mut thresholds = Vec::with_capacity(self.n_thresholds);
        thresholds.push(u[0]);
        for s in 1..self.n_thresholds {
            let gap = u[s].exp().max(MIN_THRESHOLD_GAP);
            thresholds.push(thresholds[s - 1] + gap);
        }
        let mut loadings = vec![0.0; self.q];
        for (k, &j) in self.free.iter().enumerate() {
            loadings[j] = u[self.n_thresholds + k];
        }
        ItemParams { thresholds, loadings }
    }

    /// Jacobian `∂(τ, α)/∂u` (dense, small).
    fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let nt = self.n_thresholds;
        let mut j = DMatrix::zeros(nt + self.q, self.dim());
        for s in 0..nt {
            j[(s, 0)] = 1.0;
            for r in 1..=s {
                j[(s, r)] = u[r].exp();
            }
        }
        for (k, &a) in self.free.iter().enumerate() {
            j[(nt + a, nt + k)] = 1.0;
        }
        j
    }

    /// Second-derivative term `Σ_s g_τs ∂²τ_s/∂u²` (diagonal).
    fn curvature(&self, u: &[f64], grad_a: &[f64]) -> DMatrix<f64> {
        let nt = self.n_thresholds;
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for r in 1..nt {
            let tail: f64 = grad_a[r..nt].iter().sum();
            h[(r, r)] = u[r].exp() * tail;
        }
        h
    }
}

struct ItemObjective<'a> {
    posteriors: &'a [PosteriorApprox],
    responses: Vec<usize>,
    counts: &'a [f64],
    analytic_hessian: bool,
}

impl ItemObjective<'_> {
    fn value(&self, item: &ItemParams) -> f64 {
        self.posteriors
            .iter()
            .zip(&self.responses)
            .zip(self.counts)
            .map(|((post, &y), &c)| {
                c * match post {
                    PosteriorApprox::Point(z) => {
                        ridge_log_prob(item, y, &RidgeMoments::point(z.as_slice(), &item.loadings))
                    }
                    PosteriorApprox::Fla(f) => ridge_log_prob(item, y, &f.ridge(&item.loadings)),
                    PosteriorApprox::Nodes(nodes) => nodes.expect_with(|z| item.local_at(item.project(z), y).gap.ln()),
                }
            })
            .sum()
    }

    fn gradient(&self, item: &ItemParams) -> Vec<f64> {
        let mut g = vec![0.0; item.n_params()];
        for ((post, &y), &c) in self.posteriors.iter().zip(&self.responses).zip(self.counts) {
            accumulate_expected_score(item, y, post, c, &mut g);
        }
        g
    }

    /// Gradient and Hessian in `(τ, α)`; `None` for the Hessian when it has
    /// to be obtained numerically.
    fn derivatives(&self, item: &ItemParams) -> (Vec<f64>, Option<DMatrix<f64>>) {
        if !self.analytic_hessian {
            return (self.gradient(item), None);
        }
        let dim = item.n_params();
        let nt = item.thresholds.len();
        let mut blocks: Vec<CompactDerivs> = (0..=nt + 1).map(|_| CompactDerivs::new(item.q())).collect();
        for ((post, &y), &c) in self.posteriors.iter().zip(&self.responses).zip(self.counts) {
            let block = &mut blocks[y];
            match post {
                PosteriorApprox::Nodes(nodes) => {
                    for (k, w) in nodes.weights.iter().enumerate() {
                        if *w != 0.0 {
                            block.add(item, y, nodes.node(k), c * w);
                        }
                    }
                }
                PosteriorApprox::Point(z) => block.add(item, y, z.as_slice(), c),
                PosteriorApprox::Fla(_) => unreachable!("FLA uses the numerical Hessian"),
            }
        }
        let mut g = vec![0.0; dim];
        let mut h = DMatrix::zeros(dim, dim);
        for (y, block) in blocks.iter().enumerate().skip(1) {
            block.scatter(nt, y, &mut g, &mut h);
        }
        (g, Some(h))
    }
}

/// Outcome of a single item's Newton solve.
#[derive(Debug, Clone)]
pub struct ItemUpdate {
    pub item: ItemParams,
    pub iterations: usize,
    pub converged: bool,
}

fn solve_item(
    current: &ItemParams,
    free: Vec<usize>,
    objective: &ItemObjective<'_>,
    total: f64,
    config: &FitConfig,
) -> Result<ItemUpdate> {
    let map = ItemReparam {
        n_thresholds: current.thresholds.len(),
        free,
        q: current.q(),
    };
    let dim = map.dim();
    let mut u = map.to_unconstrained(current);
    let mut item = map.to_item(&u);
    let mut value = objective.value(&item);
    let scale = total.max(1.0);
    let grad_u = |u: &[f64]| -> DVector<f64> {
        let it = map.to_item(u);
        let ga = objective.gradient(&it);
        map.jacobian(u).transpose() * DVector::from_vec(ga)
    };
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.mstep_max_iter {
        let (ga, ha) = objective.derivatives(&item);
        let jac = map.jacobian(&u);
        let g = jac.transpose() * DVector::from_column_slice(&ga);
        if g.amax() / scale < config.mstep_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let hess = match ha {
            Some(ha) => jac.transpose() * ha * &jac + map.curvature(&u, &ga),
            None => {
                let mut h = DMatrix::zeros(dim, dim);
                for r in 0..dim {
                    let step = 1e-5 * u[r].abs().max(1.0);
                    let mut up = u.clone();
                    let mut dn = u.clone();
                    up[r] += step;
                    dn[r] -= step;
                    let col = (grad_u(&up) - grad_u(&dn)) / (2.0 * step);
                    h.set_column(r, &col);
                }
                (&h + h.transpose()) * 0.5
            }
        };
        let neg = -hess;
        let chol = regularized_cholesky(&neg);
        let delta = chol.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = u.iter().zip(delta.iter()).map(|(a, d)| a + t * d).collect();
            let trial_item = map.to_item(&trial);
            let v = objective.value(&trial_item);
            if v.is_finite() && v >= value - 1e-12 * value.abs() {
                let moved = delta.amax() * t;
                u = trial;
                item = trial_item;
                value = v;
                accepted = true;
                if moved < config.mstep_tol {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || converged {
            converged |= !accepted && g.amax() / scale < config.mstep_tol.sqrt();
            break;
        }
        if u.iter().any(|v| !v.is_finite() || v.abs() > 1e4) {
            return Err(Error::Numerical("M-step diverged".into()));
        }
    }
    Ok(ItemUpdate {
        item,
        iterations,
        converged,
    })
}

/// Solves `Σ_l Ê(S(a_i)) = 0` for every item by Newton-Raphson in the
/// ordered-threshold parameterisation, holding masked loadings at zero.
/// Returns the new parameters and the number of items whose Newton solve
/// did not converge.
pub fn m_step(
    params: &ModelParams,
    patterns: &PatternSet,
    estep: &EStep,
    config: &FitConfig,
) -> Result<(ModelParams, usize)> {
    let analytic = !matches!(config.method, ApproximationMethod::Fla);
    let total = patterns.total();
    let updates = map_indexed(params.p(), |i| {
        let objective = ItemObjective {
            posteriors: &estep.posteriors,
            responses: patterns.patterns.iter().map(|p| p[i]).collect(),
            counts: &patterns.counts,
            analytic_hessian: analytic,
        };
        let free = (0..params.q).filter(|&j| !params.fixed[i][j]).collect();
        solve_item(&params.items[i], free, &objective, total, config)
    });
    let mut items = Vec::with_capacity(params.p());
    let mut unconverged = 0;
    for u in updates {
        let u = u?;
        unconverged += usize::from(!u.converged);
        items.push(u.item);
    }
    let next = ModelParams {
        items,
        q: params.q,
        fixed: params.fixed.clone(),
    };
    Ok((next, unconverged))
}

/// Starting values per the configured policy.
pub fn initial_params(data: &OrdinalDataset, q: usize, config: &FitConfig) -> Result<ModelParams> {
    let mask = config.mask.clone().unwrap_or_else(|| default_mask(data.p(), q));
    let (loading, spread) = match &config.init {
        InitPolicy::Given(p) => {
            p.validate()?;
            p.check_dataset(data)?;
            if p.q != q {
                return Err(Error::InvalidInput("initial parameters have the wrong q".into()));
            }
            return Ok(p.clone());
        }
        InitPolicy::Empirical { loading } => (*loading, 0.0),
        InitPolicy::Jittered { loading, spread } => (*loading, *spread),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.n() as f64;
    let mut items = Vec::with_capacity(data.p());
    for (i, &c) in data.categories().iter().enumerate() {
        let mut counts = vec![0.5; c];
        for pat in data.patterns() {
            counts[pat[i] - 1] += 1.0;
        }
        let denom = n + 0.5 * c as f64;
        let mut cum = 0.0;
        let thresholds = counts[..c - 1]
            .iter()
            .map(|k| {
                cum += k;
                let p = cum / denom;
                (p / (1.0 - p)).ln()
            })
            .collect();
        let loadings = (0..q)
            .map(|j| {
                if mask[i][j] {
                    0.0
                } else if spread > 0.0 {
                    loading + rng.gen_range(-spread..spread)
                } else {
                    loading
                }
            })
            .collect();
        items.push(ItemParams { thresholds, loadings });
    }
    ModelParams::with_mask(items, q, mask)
}

/// Runs EM to convergence.
pub fn fit(data: &OrdinalDataset, q: usize, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if q == 0 {
        return Err(Error::InvalidInput("q must be at least 1".into()));
    }
    let start = Instant::now();
    let mut params = initial_params(data, q, config)?;
    let patterns = PatternSet::from_dataset(data);
    let rule = config.method.points().map(|k| TensorRule::new(k, q)).transpose()?;
    let mut ws = EmWorkspace::new(patterns.len(), q);

    let mut trace = Vec::new();
    let mut converged = false;
    let mut failure = None;
    let mut prev_ll: Option<f64> = None;
    let mut last_change: Option<f64> = None;
    let mut log_lik = f64::NAN;
    let mut iterations = 0;
    let mut mode_failures = 0;
    for iter in 1..=config.max_em_iter {
        iterations = iter;
        let estep = match e_step(&params, &patterns, config.method, rule.as_ref(), &mut ws, &config.mode) {
            Ok(e) => e,
            Err(e) => {
                failure = Some(format!("E-step failed at iteration {iter}: {e}"));
                break;
            }
        };
        log_lik = estep.log_lik;
        mode_failures = estep.mode_failures;
        trace.push(IterationRecord {
            log_lik,
            max_change: last_change,
        });
        if let (Some(prev), Some(change)) = (prev_ll, last_change) {
            if change < config.param_tol && (log_lik - prev).abs() < config.loglik_tol {
                converged = true;
                break;
            }
        }
        prev_ll = Some(log_lik);
        let (next, _) = match m_step(&params, &patterns, &estep, config) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(format!("M-step failed at iteration {iter}: {e}"));
                break;
            }
        };
        last_change = Some(next.max_abs_diff(&params));
        params = next;
    }
    if failure.is_none() && mode_failures > 0 {
        failure = Some(format!("{mode_failures} posterior modes did not converge"));
    }
    let max_loading = params
        .items
        .iter()
        .flat_map(|it| it.loadings.iter())
        .fold(0.0f64, |m, a| m.max(a.abs()));
    let valid = converged && failure.is_none() && max_loading <= config.loading_bound;
    Ok(FitResult {
        params,
        log_lik,
        iterations,
        converged,
        valid,
        failure,
        trace,
        elapsed: start.elapsed(),
    })
}

/// Flips the sign of whole loading columns of `fitted` to minimise the squared
/// distance of the loadings to `reference`, trying all `2^q` sign patterns.
pub fn align_solution(fitted: &ModelParams, reference: &ModelParams) -> ModelParams {
    let q = fitted.q;
    let distance = |signs: u32| -> f64 {
        fitted
            .items
            .iter()
            .zip(&reference.items)
            .map(|(f, r)| {
                (0..q)
                    .map(|j| {
                        let s = if signs >> j & 1 == 1 { -1.0 } else { 1.0 };
                        (s * f.loadings[j] - r.loadings[j]).powi(2)
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let best = (0..1u32 << q)
        .map(|s| (s, distance(s)))
        .fold((0u32, f64::INFINITY), |acc, (s, d)| if d < acc.1 { (s, d) } else { acc });
    let mut out = fitted.clone();
    for item in out.items.iter_mut() {
        for j in 0..q {
            if best.0 >> j & 1 == 1 {
                item.loadings[j] = -item.loadings[j];
            }
        }
    }
    out
}

/// `Σ_l Ê(S(a_i))` over a dataset for every item, evaluated at `params`.
pub fn total_expected_score(
    params: &ModelParams,
    data: &OrdinalDataset,
    method: ApproximationMethod,
) -> Result<Vec<Vec<f64>>> {
    let patterns = PatternSet::from_dataset(data);
    let posts = map_indexed(patterns.len(), |l| {
        posterior_for_pattern(params, &patterns.patterns[l], method)
    });
    let mut out: Vec<Vec<f64>> = params.items.iter().map(|it| vec![0.0; it.n_params()]).collect();
    for (l, post) in posts.into_iter().enumerate() {
        let post = post?;
        for (i, it) in params.items.iter().enumerate() {
            accumulate_expected_score(it, patterns.patterns[l][i], &post, patterns.counts[l], &mut out[i]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AComponent, LatentFunction, LogCategoryProb};
    use approx::assert_relative_eq;

    fn params_q1() -> ModelParams {
        ModelParams::new(
            vec![
                ItemParams::new(vec![-1.0, 0.3, 1.2], vec![1.1]).unwrap(),
                ItemParams::new(vec![-0.2, 0.8], vec![0.7]).unwrap(),
                ItemParams::new(vec![-1.5, 0.0, 1.0], vec![1.6]).unwrap(),
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn align_restores_negated_column() {
        let reference = ModelParams::new(
            vec![
                ItemParams::new(vec![0.0], vec![1.0, 0.0]).unwrap(),
                ItemParams::new(vec![0.0], vec![0.5, 0.8]).unwrap(),
            ],
            2,
        )
        .unwrap();
        assert_eq!(align_solution(&reference, &reference), reference);
        let mut flipped = reference.clone();
        for it in flipped.items.iter_mut() {
            it.loadings[1] = -it.loadings[1];
        }
        assert_eq!(align_solution(&flipped, &reference), reference);
    }

    #[test]
    fn analytic_item_hessian_matches_finite_differences() {
        let item = ItemParams::new(vec![-0.7, 0.4, 1.9], vec![0.9, -0.4]).unwrap();
        let z = [0.6, 1.3];
        for y in 1..=4 {
            let dim = item.n_params();
            let mut g = vec![0.0; dim];
            let mut h = DMatrix::zeros(dim, dim);
            let mut block = CompactDerivs::new(2);
            block.add(&item, y, &z, 1.0);
            block.scatter(3, y, &mut g, &mut h);
            let score = item.complete_data_score(y, &z).unwrap();
            for r in 0..dim {
                assert_relative_eq!(g[r], score[r], epsilon = 1e-12);
                let step = 1e-6;
                let mut up = item.to_vector();
                let mut dn = item.to_vector();
                up[r] += step;
                dn[r] -= step;
                let su = ItemParams::from_vector(&up, 3).complete_data_score(y, &z).unwrap();
                let sd = ItemParams::from_vector(&dn, 3).complete_data_score(y, &z).unwrap();
                for c in 0..dim {
                    let fd = (su[c] - sd[c]) / (2.0 * step);
                    assert!((h[(c, r)] - fd).abs() < 1e-6, "y={y} ({c},{r}): {} vs {fd}", h[(c, r)]);
                }
            }
        }
    }

    #[test]
    fn fla_objective_gradient_matches_component_assembly() {
        // The M-step objective Ê[log π] must have the assembled expected score
        // as its gradient in (τ, α).
        let params = params_q1();
        let pattern = [3, 1, 4];
        let post = posterior_for_pattern(&params, &pattern, ApproximationMethod::Fla).unwrap();
        let other = ItemParams::new(vec![-0.8, 0.1, 1.5], vec![1.3]).unwrap();
        for y in 1..=4 {
            let mut g = vec![0.0; 4];
            accumulate_expected_score(&other, y, &post, 1.0, &mut g);
            let base = other.to_vector();
            for r in 0..4 {
                let h = 1e-6;
                let mut up = base.clone();
                let mut dn = base.clone();
                up[r] += h;
                dn[r] -= h;
                let fu = post.expect(&LogCategoryProb { item: &ItemParams::from_vector(&up, 3), response: y });
                let fd = post.expect(&LogCategoryProb { item: &ItemParams::from_vector(&dn, 3), response: y });
                assert_relative_eq!((fu - fd) / (2.0 * h), g[r], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn ridge_assembly_matches_generic_component_expectations() {
        let params = params_q1();
        let pattern = [3, 1, 4];
        for method in [ApproximationMethod::Fla, ApproximationMethod::Laplace] {
            let post = posterior_for_pattern(&params, &pattern, method).unwrap();
            let item = ItemParams::new(vec![-0.8, 0.1, 1.5], vec![1.3]).unwrap();
            for y in 1..=4 {
                let mut fast = vec![0.0; 4];
                accumulate_expected_score(&item, y, &post, 1.0, &mut fast);
                let mut slow = [0.0; 4];
                if y <= 3 {
                    slow[y - 1] += post.expect(&AComponent::a1(&item, y).unwrap());
                }
                if y >= 2 {
                    slow[y - 2] -= post.expect(&AComponent::a2(&item, y - 1).unwrap());
                }
                slow[3] -= post.expect(&AComponent::a3(&item, y, 0).unwrap());
                for r in 0..4 {
                    assert_relative_eq!(fast[r], slow[r], epsilon = 1e-13);
                }
                let generic = post.expect(&LogCategoryProb { item: &item, response: y });
                let objective = ItemObjective {
                    posteriors: std::slice::from_ref(&post),
                    responses: vec![y],
                    counts: &[1.0],
                    analytic_hessian: false,
                };
                assert_relative_eq!(objective.value(&item), generic, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn node_scores_match_component_assembly() {
        let params = params_q1();
        let pattern = [2, 3, 1];
        let post = posterior_for_pattern(&params, &pattern, "gh:15".parse().unwrap()).unwrap();
        let PosteriorApprox::Nodes(nodes) = &post else { panic!() };
        let item = &params.items[0];
        let mut direct = vec![0.0; 4];
        accumulate_expected_score(item, 2, &post, 1.0, &mut direct);
        let a1 = nodes.expect_with(|z| AComponent::a1(item, 2).unwrap().value(z));
        let a2 = nodes.expect_with(|z| AComponent::a2(item, 1).unwrap().value(z));
        let a3 = nodes.expect_with(|z| AComponent::a3(item, 2, 0).unwrap().value(z));
        assert_relative_eq!(direct[1], a1, epsilon = 1e-14);
        assert_relative_eq!(direct[0], -a2, epsilon = 1e-14);
        assert_eq!(direct[2], 0.0);
        assert_relative_eq!(direct[3], -a3, epsilon = 1e-14);
    }

    #[test]
    fn zero_loading_scores_vanish_for_loadings() {
        let params = ModelParams::new(
            vec![
                ItemParams::new(vec![-0.6, 0.9], vec![0.0]).unwrap(),
                ItemParams::new(vec![0.2], vec![0.0]).unwrap(),
            ],
            1,
        )
        .unwrap();
        for method in ["laplace", "fla", "gh:9", "agh-mode", "agh-mean"] {
            let s = expected_score(&params, &[3, 1], 0, method.parse().unwrap()).unwrap();
            assert!(s[2].abs() < 1e-12, "{method}: {s:?}");
        }
    }

    #[test]
    fn m_step_with_fixed_loadings_recovers_empirical_logits() {
        let rows: Vec<Vec<usize>> = [1, 1, 2, 3, 3, 3, 2, 1, 3, 2, 2, 3]
            .iter()
            .map(|&y| vec![y])
            .collect();
        let data = OrdinalDataset::new(rows, Some(vec![3])).unwrap();
        let mut config = FitConfig::with_method(ApproximationMethod::Gh { points: 5 });
        config.mask = Some(vec![vec![true]]);
        let params = initial_params(&data, 1, &config).unwrap();
        let patterns = PatternSet::from_dataset(&data);
        let mut ws = EmWorkspace::new(patterns.len(), 1);
        let rule = TensorRule::new(5, 1).unwrap();
        let est = e_step(&params, &patterns, config.method, Some(&rule), &mut ws, &config.mode).unwrap();
        let (next, unconverged) = m_step(&params, &patterns, &est, &config).unwrap();
        assert_eq!(unconverged, 0);
        // cumulative frequencies 3/12, 7/12
        assert_relative_eq!(next.items[0].thresholds[0], (3.0f64 / 9.0).ln(), epsilon = 1e-8);
        assert_relative_eq!(next.items[0].thresholds[1], (7.0f64 / 5.0).ln(), epsilon = 1e-8);
        assert_eq!(next.items[0].loadings[0], 0.0);
    }

    #[test]
    fn single_binary_item_is_logistic_intercept() {
        // 7 of 20 in category 1: τ̂ = logit(0.35)
        let rows: Vec<Vec<usize>> = (0..20).map(|k| vec![if k < 7 { 1 } else { 2 }]).collect();
        let data = OrdinalDataset::new(rows, None).unwrap();
        let mut config = FitConfig::with_method(ApproximationMethod::Laplace);
        config.mask = Some(vec![vec![true]]);
        let res = fit(&data, 1, &config).unwrap();
        assert!(res.converged);
        assert_relative_eq!(res.params.items[0].thresholds[0], (0.35f64 / 0.65).ln(), epsilon = 1e-6);
    }
}
