//! Geometry of the (optionally tilted) posterior kernel
//!
//! ```text
//! ℓ_t(z) = log g(y | z) + log h(z) + t·A(z)
//! ```
//!
//! where `h` is the standard normal density. Sign conventions follow the
//! estimation equations: [`kernel_gradient`] returns `S(z) = -∇ℓ_t` and
//! [`kernel_hessian`] returns `Σ^{(t)} = -∇²ℓ_t`, so the Newton update is
//! `z ← z - Σ⁻¹ S` and every accepted step must increase `ℓ_t`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_index, Error, Result};
use crate::model::{dot, ItemParams, ModelParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A smooth scalar function of the latent vector with analytic derivatives.
pub trait LatentFunction: Sync {
    fn value(&self, z: &[f64]) -> f64;
    fn gradient(&self, z: &[f64]) -> DVector<f64>;
    fn hessian(&self, z: &[f64]) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl LatentFunction for Constant {
    fn value(&self, _z: &[f64]) -> f64 {
        self.0
    }
    fn gradient(&self, z: &[f64]) -> DVector<f64> {
        DVector::zeros(z.len())
    }
    fn hessian(&self, z: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(z.len(), z.len())
    }
}

/// `v'z`.
#[derive(Debug, Clone)]
pub struct Linear(pub DVector<f64>);

impl LatentFunction for Linear {
    fn value(&self, z: &[f64]) -> f64 {
        dot(self.0.as_slice(), z)
    }
    fn gradient(&self, _z: &[f64]) -> DVector<f64> {
        self.0.clone()
    }
    fn hessian(&self, z: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(z.len(), z.len())
    }
}

/// `z_j^k`, a monomial in one coordinate. Used for posterior moments.
#[derive(Debug, Clone, Copy)]
pub struct Power {
    pub coord: usize,
    pub exponent: i32,
}

impl LatentFunction for Power {
    fn value(&self, z: &[f64]) -> f64 {
        z[self.coord].powi(self.exponent)
    }
    fn gradient(&self, z: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(z.len());
        let k = self.exponent;
        if k >= 1 {
            g[self.coord] = f64::from(k) * z[self.coord].powi(k - 1);
        }
        g
    }
    fn hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(z.len(), z.len());
        let k = self.exponent;
        if k >= 2 {
            h[(self.coord, self.coord)] = f64::from(k * (k - 1)) * z[self.coord].powi(k - 2);
        }
        h
    }
}

/// Which score component a latent function represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AKind {
    /// `A1_s = -∂θ_{s-1}/∂τ_s`, `s ∈ 1..=c-1`.
    Threshold1,
    /// `A2_s = ∂b(θ_s)/∂τ_s`, `s ∈ 1..=c-1`.
    Threshold2,
    /// Coordinate `coord` of `A3_s = (1 - γ_s - γ_{s-1}) z`, `s ∈ 1..=c`.
    Loading { coord: usize },
}

/// The z-dependent pieces of the complete-data score for one item and category.
#[derive(Debug, Clone, Copy)]
pub struct AComponent<'a> {
    pub item: &'a ItemParams,
    pub kind: AKind,
    pub category: usize,
}

impl<'a> AComponent<'a> {
    pub fn new(item: &'a ItemParams, kind: AKind, category: usize) -> Result<Self> {
        match kind {
            AKind::Threshold1 | AKind::Threshold2 => {
                check_index("threshold category", category, 1, item.n_categories() - 1)?
            }
            AKind::Loading { coord } => {
                check_index("loading category", category, 1, item.n_categories())?;
                if coord >= item.q() {
                    return Err(Error::Index {
                        what: "loading coordinate",
                        index: coord,
                        lo: 0,
                        hi: item.q().saturating_sub(1),
                    });
                }
            }
        }
        Ok(Self { item, kind, category })
    }

    pub fn a1(item: &'a ItemParams, s: usize) -> Result<Self> {
        Self::new(item, AKind::Threshold1, s)
    }

    pub fn a2(item: &'a ItemParams, s: usize) -> Result<Self> {
        Self::new(item, AKind::Threshold2, s)
    }

    pub fn a3(item: &'a ItemParams, s: usize, coord: usize) -> Result<Self> {
        Self::new(item, AKind::Loading { coord }, s)
    }

    fn alpha(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.item.loadings)
    }
}

impl LatentFunction for AComponent<'_> {
    fn value(&self, z: &[f64]) -> f64 {
        let x = self.item.project(z);
        match self.kind {
            AKind::Threshold1 => self.item.a1_at(x, self.category),
            AKind::Threshold2 => self.item.a2_at(x, self.category),
            AKind::Loading { coord } => self.item.a3_factor_at(x, self.category) * z[coord],
        }
    }

    fn gradient(&self, z: &[f64]) -> DVector<f64> {
        let x = self.item.project(z);
        let s = self.category;
        let alpha = self.alpha();
        match self.kind {
            // A1' = α γ_s(1-γ_s), A2' = -A1'
            AKind::Threshold1 => alpha * self.item.w_at(x, s),
            AKind::Threshold2 => alpha * -self.item.w_at(x, s),
            AKind::Loading { coord } => {
                // ∂(F z_j)/∂z_k = δ_jk F + z_j α_k W,  W = w_s + w_{s-1}
                let f = self.item.a3_factor_at(x, s);
                let w = self.item.w_at(x, s) + self.item.w_at(x, s - 1);
                let mut g = alpha * (z[coord] * w);
                g[coord] += f;
                g
            }
        }
    }

    fn hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let x = self.item.project(z);
        let s = self.category;
        let alpha = self.alpha();
        let outer = &alpha * alpha.transpose();
        match self.kind {
            // A1'' = -αα' γ(1 - 3γ + 2γ²), A2'' = -A1''
            AKind::Threshold1 => outer * -self.item.u_at(x, s),
            AKind::Threshold2 => outer * self.item.u_at(x, s),
            AKind::Loading { coord } => {
                // ∂²(F z_j)/∂z_k∂z_m = δ_jk α_m W + δ_jm α_k W - z_j α_k α_m U,
                // U = u_s + u_{s-1}
                let w = self.item.w_at(x, s) + self.item.w_at(x, s - 1);
                let u = self.item.u_at(x, s) + self.item.u_at(x, s - 1);
                let mut h = outer * (-z[coord] * u);
                for m in 0..z.len() {
                    h[(coord, m)] += alpha[m] * w;
                    h[(m, coord)] += alpha[m] * w;
                }
                h
            }
        }
    }
}

/// `log π_y(z)` for one item, as a latent function. Its z-derivatives are
/// `-α F` and `-αα' W`, with `F` and `W` as in [`AComponent`].
#[derive(Debug, Clone, Copy)]
pub struct LogCategoryProb<'a> {
    pub item: &'a ItemParams,
    pub response: usize,
}

impl LatentFunction for LogCategoryProb<'_> {
    fn value(&self, z: &[f64]) -> f64 {
        self.item.log_prob_at(self.item.project(z), self.response)
    }
    fn gradient(&self, z: &[f64]) -> DVector<f64> {
        let f = self.item.a3_factor_at(self.item.project(z), self.response);
        DVector::from_iterator(z.len(), self.item.loadings.iter().map(|a| -a * f))
    }
    fn hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let x = self.item.project(z);
        let w = self.item.w_at(x, self.response) + self.item.w_at(x, self.response - 1);
        let a = DVector::from_column_slice(&self.item.loadings);
        &a * a.transpose() * -w
    }
}

pub fn a1(item: &ItemParams, s: usize, z: &[f64]) -> Result<f64> {
    Ok(AComponent::a1(item, s)?.value(z))
}

pub fn a2(item: &ItemParams, s: usize, z: &[f64]) -> Result<f64> {
    Ok(AComponent::a2(item, s)?.value(z))
}

/// `A3_s(z)` as a vector.
pub fn a3(item: &ItemParams, s: usize, z: &[f64]) -> Result<DVector<f64>> {
    check_index("loading category", s, 1, item.n_categories())?;
    let f = item.a3_factor_at(item.project(z), s);
    Ok(DVector::from_iterator(z.len(), z.iter().map(|v| f * v)))
}

pub fn a_gradient(component: &AComponent<'_>, z: &[f64]) -> DVector<f64> {
    component.gradient(z)
}

pub fn a_hessian(component: &AComponent<'_>, z: &[f64]) -> DMatrix<f64> {
    component.hessian(z)
}

/// An exponential tilt `t·A(z)` added to the log kernel.
#[derive(Clone, Copy)]
pub struct Tilt<'a> {
    pub function: &'a dyn LatentFunction,
    pub t: f64,
}

/// `ℓ_t(z) = log g(y|z) + log h(z) + t A(z)`.
pub fn log_kernel(params: &ModelParams, pattern: &[usize], z: &[f64], tilt: Option<Tilt<'_>>) -> f64 {
    let prior = -0.5 * dot(z, z) - 0.5 * z.len() as f64 * LN_2PI;
    let extra = tilt.map_or(0.0, |t| t.t * t.function.value(z));
    params.joint_log_lik_unchecked(pattern, z) + prior + extra
}

/// `S(z) = -∂ℓ_t/∂z = Σ_i α_i (1 - γ_{i,y} - γ_{i,y-1}) + z - t A'(z)`.
pub fn kernel_gradient(
    params: &ModelParams,
    pattern: &[usize],
    z: &[f64],
    tilt: Option<Tilt<'_>>,
) -> DVector<f64> {
    let mut g = DVector::from_column_slice(z);
    for (item, &y) in params.items.iter().zip(pattern) {
        let f = item.a3_factor_at(item.project(z), y);
        for (gj, a) in g.iter_mut().zip(&item.loadings) {
            *gj += a * f;
        }
    }
    if let Some(t) = tilt {
        g -= t.function.gradient(z) * t.t;
    }
    g
}

/// `Σ^{(t)} = -∂²ℓ_t/∂z∂z' = Σ_i α_iα_i' (w_{i,y} + w_{i,y-1}) + I - t A''(z)`.
pub fn kernel_hessian(
    params: &ModelParams,
    pattern: &[usize],
    z: &[f64],
    tilt: Option<Tilt<'_>>,
) -> DMatrix<f64> {
    let q = z.len();
    let mut h = DMatrix::identity(q, q);
    for (item, &y) in params.items.iter().zip(pattern) {
        let x = item.project(z);
        let w = item.w_at(x, y) + item.w_at(x, y - 1);
        let a = &item.loadings;
        for r in 0..q {
            for c in 0..q {
                h[(r, c)] += w * a[r] * a[c];
            }
        }
    }
    if let Some(t) = tilt {
        h -= t.function.hessian(z) * t.t;
    }
    h
}

#[derive(Debug, Clone)]
pub struct ModeConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 20,
        }
    }
}

/// Mode and curvature of one observation's posterior kernel.
#[derive(Debug, Clone)]
pub struct PosteriorGeometry {
    pub mode: DVector<f64>,
    /// `Σ^{(t)}` at the mode.
    pub sigma: DMatrix<f64>,
    pub log_kernel: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PosteriorGeometry {
    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.sigma.clone()).ok_or(Error::NotPositiveDefinite("posterior Σ"))
    }

    /// Laplace approximation of `log ∫ exp(ℓ_t(z)) dz`.
    pub fn laplace_log_integral(&self) -> Result<f64> {
        let chol = self.cholesky()?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let q = self.mode.len() as f64;
        Ok(self.log_kernel + 0.5 * q * LN_2PI - 0.5 * log_det)
    }
}

/// Cholesky of `m`, adding `λI` with `λ` doubling from `1e-4` until it succeeds.
pub(crate) fn regularized_cholesky(m: &DMatrix<f64>) -> Cholesky<f64, Dyn> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return c;
    }
    let n = m.nrows();
    let mut lambda = 1e-4;
    loop {
        let shifted = m + DMatrix::identity(n, n) * lambda;
        if let Some(c) = Cholesky::new(shifted) {
            return c;
        }
        lambda *= 2.0;
    }
}

/// Newton-Raphson for `argmax_z ℓ_t(z)` with step halving.
///
/// Starts from `start` (warm start) or the origin. A non-positive-definite
/// `Σ` is replaced by `Σ + λI`. Failure to reach `max|S| < tol` is reported
/// through `converged = false`, not as an error.
pub fn find_mode(
    params: &ModelParams,
    pattern: &[usize],
    tilt: Option<Tilt<'_>>,
    start: Option<&[f64]>,
    config: &ModeConfig,
) -> Result<PosteriorGeometry> {
    params.check_pattern(pattern)?;
    let q = params.q;
    let mut z: Vec<f64> = match start {
        Some(s) if s.len() == q && s.iter().all(|v| v.is_finite()) => s.to_vec(),
        Some(_) => return Err(Error::InvalidInput("mode start has wrong length".into())),
        None => vec![0.0; q],
    };
    let mut value = log_kernel(params, pattern, &z, tilt);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let grad = kernel_gradient(params, pattern, &z, tilt);
        if grad.amax() < config.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let sigma = kernel_hessian(params, pattern, &z, tilt);
        let step = regularized_cholesky(&sigma).solve(&grad);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=config.max_halvings {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a - scale * d).collect();
            let v = log_kernel(params, pattern, &trial, tilt);
            if v >= value {
                z = trial;
                value = v;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // No ascent possible at working precision.
            let grad = kernel_gradient(params, pattern, &z, tilt);
            converged = grad.amax() < config.tol.max(1e-6);
            break;
        }
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("posterior mode diverged".into()));
    }
    let sigma = kernel_hessian(params, pattern, &z, tilt);
    Ok(PosteriorGeometry {
        mode: DVector::from_vec(z),
        sigma,
        log_kernel: value,
        iterations,
        converged,
    })
}

/// `∂Σ^{(t)}/∂t` at `t = 0` along the tilted mode path:
///
/// ```text
/// ∂Σ/∂t = (∂Σ/∂z)(∂ẑ/∂t) - A''(ẑ),   ∂ẑ/∂t = Σ⁻¹ A'(ẑ)
///       = -Σ_i α_iα_i' (u_{i,y} + u_{i,y-1}) α_i'Σ⁻¹A'(ẑ) - A''(ẑ)
/// ```
///
/// `geometry` must describe the untilted posterior at the same `params`.
pub fn dsigma_dt(
    params: &ModelParams,
    pattern: &[usize],
    geometry: &PosteriorGeometry,
    component: &dyn LatentFunction,
) -> Result<DMatrix<f64>> {
    let z = geometry.mode.as_slice();
    let dz = geometry.cholesky()?.solve(&component.gradient(z));
    let q = params.q;
    let mut out = -component.hessian(z);
    for (item, &y) in params.items.iter().zip(pattern) {
        let x = item.project(z);
        let u = item.u_at(x, y) + item.u_at(x, y - 1);
        let coef = -u * dot(&item.loadings, dz.as_slice());
        let a = &item.loadings;
        for r in 0..q {
            for c in 0..q {
                out[(r, c)] += coef * a[r] * a[c];
            }
        }
    }
    Ok(out)
}

/// Precomputed second-order posterior summary that evaluates the fully
/// exponential Laplace expectation of any smooth function:
///
/// ```text
/// Ê[A] = A(ẑ) - ½ tr(Σ⁻¹ ∂Σ/∂t) = A(ẑ) + d'A'(ẑ) + ½ tr(V A''(ẑ))
/// ```
///
/// with `V = Σ⁻¹`, `d = -½ V g` and `g_m = tr(V ∂Σ/∂z_m)`. The functional is
/// linear in `A`, so it can be reused for score components built from other
/// item parameters (the M-step does this).
#[derive(Debug, Clone)]
pub struct FlaFunctional {
    pub mode: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl FlaFunctional {
    pub fn new(params: &ModelParams, pattern: &[usize], geometry: &PosteriorGeometry) -> Result<Self> {
        let z = geometry.mode.as_slice();
        let v = geometry.cholesky()?.inverse();
        let q = params.q;
        let mut g = DVector::zeros(q);
        for (item, &y) in params.items.iter().zip(pattern) {
            let x = item.project(z);
            let u = item.u_at(x, y) + item.u_at(x, y - 1);
            let a = DVector::from_column_slice(&item.loadings);
            let ava = (a.transpose() * &v * &a)[(0, 0)];
            g -= a * (u * ava);
        }
        let shift = &v * g * -0.5;
        Ok(Self {
            mode: geometry.mode.clone(),
            covariance: v,
            shift,
        })
    }

    /// Projections needed to expect any function of `α'z` (times a coordinate).
    pub fn ridge(&self, alpha: &[f64]) -> RidgeMoments {
        let a = DVector::from_column_slice(alpha);
        let va = &self.covariance * &a;
        RidgeMoments {
            center: a.dot(&self.mode),
            shift: a.dot(&self.shift),
            spread: a.dot(&va),
            mode: self.mode.as_slice().to_vec(),
            coord_shift: self.shift.as_slice().to_vec(),
            cov_alpha: va.as_slice().to_vec(),
        }
    }

    pub fn expect(&self, f: &dyn LatentFunction) -> f64 {
        let z = self.mode.as_slice();
        let h = f.hessian(z);
        let trace: f64 = self.covariance.component_mul(&h).sum();
        f.value(z) + self.shift.dot(&f.gradient(z)) + 0.5 * trace
    }
}

/// For a fixed `α`: `center = α'ẑ`, `shift = d'α`, `spread = α'Vα`,
/// `cov_alpha = Vα`. A point posterior is the case `d = 0`, `V = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeMoments {
    pub center: f64,
    pub shift: f64,
    pub spread: f64,
    pub mode: Vec<f64>,
    pub coord_shift: Vec<f64>,
    pub cov_alpha: Vec<f64>,
}

impl RidgeMoments {
    pub fn point(mode: &[f64], alpha: &[f64]) -> Self {
        Self {
            center: crate::model::dot(alpha, mode),
            shift: 0.0,
            spread: 0.0,
            mode: mode.to_vec(),
            coord_shift: vec![0.0; mode.len()],
            cov_alpha: vec![0.0; mode.len()],
        }
    }

    /// `Ê[φ(α'z)]` from `φ, φ', φ''` at `center`.
    #[inline]
    pub fn expect(&self, phi: f64, d1: f64, d2: f64) -> f64 {
        phi + d1 * self.shift + 0.5 * d2 * self.spread
    }

    /// `Ê[φ(α'z) z_j]` from `φ, φ', φ''` at `center`.
    #[inline]
    pub fn expect_times_coord(&self, j: usize, phi: f64, d1: f64, d2: f64) -> f64 {
        let zj = self.mode[j];
        phi * zj + d1 * zj * self.shift + phi * self.coord_shift[j] + 0.5 * d2 * zj * self.spread + d1 * self.cov_alpha[j]
    }
}
