//! Data generation, posterior shape diagnostics and replicate studies.

use std::time::Duration;

use nalgebra::{Cholesky, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::em::{align_solution, fit, FitConfig};
use crate::error::{Error, Result};
use crate::geometry::{find_mode, ModeConfig};
use crate::integrate::{agh_mode_posterior, ApproximationMethod};
use crate::model::{ItemParams, ModelParams, OrdinalDataset};
use crate::parallel::map_indexed;
use crate::quadrature::TensorRule;

/// A generating population plus the study protocol run on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub params: ModelParams,
    pub n: usize,
    pub replicates: usize,
    pub methods: Vec<ApproximationMethod>,
    pub seed: u64,
}

fn population(loadings: [[f64; 2]; 5], thresholds: [f64; 3]) -> ModelParams {
    let items = loadings
        .iter()
        .map(|a| ItemParams {
            thresholds: thresholds.to_vec(),
            loadings: a.to_vec(),
        })
        .collect();
    ModelParams::new(items, 2).expect("built-in population is valid")
}

fn default_methods() -> Vec<ApproximationMethod> {
    vec![
        ApproximationMethod::Fla,
        ApproximationMethod::AghMean { points: 5 },
        ApproximationMethod::AghMode { points: 5 },
    ]
}

impl ScenarioSpec {
    /// Five 4-category items on two factors with dispersed loadings;
    /// thresholds equally spaced over [-3, 3].
    pub fn dispersed(n: usize) -> Self {
        Self {
            name: "dispersed".into(),
            params: population(
                [[1.03, 0.0], [1.44, 2.42], [2.11, 1.52], [1.8, 0.75], [1.53, 1.34]],
                [-3.0, 0.0, 3.0],
            ),
            n,
            replicates: 100,
            methods: default_methods(),
            seed: 1,
        }
    }

    /// Symmetric-posterior scenario: all free loadings 0.5.
    pub fn symmetric(n: usize) -> Self {
        Self {
            name: "symmetric".into(),
            params: population([[0.5, 0.0], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]], [-2.0, 0.0, 2.0]),
            n,
            replicates: 100,
            methods: default_methods(),
            seed: 1,
        }
    }

    /// Skewed-posterior scenario: strong first factor.
    pub fn skewed(n: usize) -> Self {
        Self {
            name: "skewed".into(),
            params: population([[2.5, 0.0], [2.5, 1.0], [2.5, 1.0], [2.5, 1.0], [2.5, 1.0]], [-1.0, 0.0, 1.0]),
            n,
            replicates: 100,
            methods: default_methods(),
            seed: 1,
        }
    }

    /// Zero-loading control population (Gaussian posteriors).
    pub fn null_loadings(n: usize) -> Self {
        Self {
            name: "null-loadings".into(),
            params: population([[0.0; 2]; 5], [-2.0, 0.0, 2.0]),
            n,
            replicates: 100,
            methods: default_methods(),
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.n == 0 {
            return Err(Error::InvalidInput("scenario n must be at least 1".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of replicate `index` under study seed `seed`:
/// `splitmix64(splitmix64(seed) ^ index)`.
pub fn replicate_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

/// Draws `n` observations: `z ~ N(0, I)`, then each item's category from
/// its conditional distribution by inversion of the cumulative probabilities.
pub fn generate_with<R: Rng>(params: &ModelParams, n: usize, rng: &mut R) -> Result<OrdinalDataset> {
    params.validate()?;
    let q = params.q;
    let mut z = vec![0.0; q];
    let rows = (0..n)
        .map(|_| {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            params
                .items
                .iter()
                .map(|item| {
                    let x = item.project(&z);
                    let u: f64 = rng.gen();
                    let c = item.n_categories();
                    (1..c).find(|&s| u < item.gamma_at(x, s)).unwrap_or(c)
                })
                .collect()
        })
        .collect();
    OrdinalDataset::new(rows, Some(params.categories()))
}

/// Dataset of replicate `index`, deterministic in `(spec.seed, index)`.
pub fn generate(spec: &ScenarioSpec, index: u64) -> Result<OrdinalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(spec.seed, index));
    generate_with(&spec.params, spec.n, &mut rng)
}

/// Mardia skewness `β₁,q` and kurtosis `β₂,q` of one posterior density.
///
/// Moments come from the rule placed at the posterior mode (AGH-mode); the
/// coordinates are then fully standardised with the Cholesky factor of the
/// posterior covariance, so `E[x] = 0` and `E[xx'] = I` on the nodes.
/// `β₁ = Σ_{rst} E[x_r x_s x_t]²`, `β₂ = E[(x'x)²]`.
pub fn mardia(params: &ModelParams, pattern: &[usize], rule: &TensorRule) -> Result<(f64, f64)> {
    params.check_pattern(pattern)?;
    if rule.q != params.q {
        return Err(Error::InvalidInput("rule dimension does not match q".into()));
    }
    let q = params.q;
    let geo = find_mode(params, pattern, None, None, &ModeConfig::default())?;
    let nodes = agh_mode_posterior(params, pattern, &geo, rule)?;
    let mean = nodes.mean();
    let cov = nodes.covariance(&mean);
    let chol = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite("posterior covariance"))?;
    let mut third = vec![0.0; q * q * q];
    let mut beta2 = 0.0;
    for (k, &w) in nodes.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let d = DVector::from_column_slice(nodes.node(k)) - &mean;
        let x = chol.l().solve_lower_triangular(&d).ok_or(Error::Numerical("singular factor".into()))?;
        let r2 = x.norm_squared();
        beta2 += w * r2 * r2;
        for a in 0..q {
            for b in 0..q {
                for c in 0..q {
                    third[(a * q + b) * q + c] += w * x[a] * x[b] * x[c];
                }
            }
        }
    }
    let beta1: f64 = third.iter().map(|m| m * m).sum();
    if !(beta1.is_finite() && beta2.is_finite()) {
        return Err(Error::Numerical("non-finite posterior moments".into()));
    }
    Ok((beta1, beta2))
}

/// Mardia's asymptotic tests for one density, treating it as a sample of
/// `effective_n` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MardiaConfig {
    /// Quadrature points per dimension.
    pub points: usize,
    /// Sample size entering the asymptotic null distributions.
    pub effective_n: f64,
    /// Significance level.
    pub level: f64,
}

impl Default for MardiaConfig {
    fn default() -> Self {
        Self {
            points: 21,
            effective_n: 5000.0,
            level: 0.05,
        }
    }
}

/// `n β₁ / 6 ~ χ²` with `q(q+1)(q+2)/6` degrees of freedom under normality.
pub fn skewness_significant(beta1: f64, q: usize, config: &MardiaConfig) -> bool {
    let df = (q * (q + 1) * (q + 2)) as f64 / 6.0;
    let chi = ChiSquared::new(df).expect("positive degrees of freedom");
    config.effective_n * beta1 / 6.0 > chi.inverse_cdf(1.0 - config.level)
}

/// `(β₂ - q(q+2)) / sqrt(8q(q+2)/n) ~ N(0, 1)` under normality.
pub fn kurtosis_significant(beta2: f64, q: usize, config: &MardiaConfig) -> bool {
    let qq = (q * (q + 2)) as f64;
    let z = (beta2 - qq) / (8.0 * qq / config.effective_n).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    z.abs() > normal.inverse_cdf(1.0 - config.level / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MardiaDiagnostics {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub skew_flags: Vec<bool>,
    pub kurtosis_flags: Vec<bool>,
    pub skew_rate: f64,
    pub kurtosis_rate: f64,
    pub mean_beta1: f64,
    pub max_beta1: f64,
    pub mean_beta2: f64,
}

/// Per-observation diagnostics of every posterior in `data` at `params`.
pub fn diagnose(params: &ModelParams, data: &OrdinalDataset, config: &MardiaConfig) -> Result<MardiaDiagnostics> {
    params.check_dataset(data)?;
    let rule = TensorRule::new(config.points, params.q)?;
    let per_pattern = map_indexed(data.n(), |l| mardia(params, data.pattern(l), &rule));
    let mut beta1 = Vec::with_capacity(data.n());
    let mut beta2 = Vec::with_capacity(data.n());
    for r in per_pattern {
        let (b1, b2) = r?;
        beta1.push(b1);
        beta2.push(b2);
    }
    let q = params.q;
    let skew_flags: Vec<bool> = beta1.iter().map(|&b| skewness_significant(b, q, config)).collect();
    let kurtosis_flags: Vec<bool> = beta2.iter().map(|&b| kurtosis_significant(b, q, config)).collect();
    let n = data.n().max(1) as f64;
    let rate = |f: &[bool]| 100.0 * f.iter().filter(|&&x| x).count() as f64 / n;
    Ok(MardiaDiagnostics {
        skew_rate: rate(&skew_flags),
        kurtosis_rate: rate(&kurtosis_flags),
        mean_beta1: beta1.iter().sum::<f64>() / n,
        max_beta1: beta1.iter().copied().fold(0.0, f64::max),
        mean_beta2: beta2.iter().sum::<f64>() / n,
        beta1,
        beta2,
        skew_flags,
        kurtosis_flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub label: String,
    pub true_value: f64,
    pub mean: f64,
    pub bias: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: ApproximationMethod,
    pub replicates: usize,
    pub valid: usize,
    pub percent_valid: f64,
    /// Free loadings, first factor then second, masked entries omitted.
    pub loadings: Vec<ParamSummary>,
    pub thresholds: Vec<ParamSummary>,
    pub failures: Vec<ReplicateFailure>,
    /// Summed fit time; kept out of serialised output so reruns are identical.
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: String,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<MethodReport>,
}

struct Labelled {
    label: String,
    value: f64,
}

fn loading_entries(params: &ModelParams) -> Vec<Labelled> {
    let mut out = Vec::new();
    for j in 0..params.q {
        for (i, item) in params.items.iter().enumerate() {
            if !params.fixed[i][j] {
                out.push(Labelled {
                    label: format!("alpha[{},{}]", i + 1, j + 1),
                    value: item.loadings[j],
                });
            }
        }
    }
    out
}

fn threshold_entries(params: &ModelParams) -> Vec<Labelled> {
    let mut out = Vec::new();
    for (i, item) in params.items.iter().enumerate() {
        for (s, t) in item.thresholds.iter().enumerate() {
            out.push(Labelled {
                label: format!("tau[{},{}]", i + 1, s + 1),
                value: *t,
            });
        }
    }
    out
}

fn summarise(truth: &[Labelled], estimates: &[Vec<Labelled>]) -> Vec<ParamSummary> {
    truth
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let m = estimates.len();
            if m == 0 {
                return ParamSummary {
                    label: t.label.clone(),
                    true_value: t.value,
                    mean: f64::NAN,
                    bias: f64::NAN,
                    mse: f64::NAN,
                };
            }
            let vals: Vec<f64> = estimates.iter().map(|e| e[k].value).collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let mse = vals.iter().map(|v| (v - t.value).powi(2)).sum::<f64>() / m as f64;
            ParamSummary {
                label: t.label.clone(),
                true_value: t.value,
                mean,
                bias: mean - t.value,
                mse,
            }
        })
        .collect()
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateFit {
    pub params: Option<ModelParams>,
    pub failure: Option<String>,
    pub elapsed: Duration,
}

/// Fits every method of `spec` on replicate `index`; fitted parameters are
/// sign-aligned to the generating values, and only valid fits are kept.
pub fn run_replicate(spec: &ScenarioSpec, index: usize, base: &FitConfig) -> Result<Vec<ReplicateFit>> {
    let data = generate(spec, index as u64)?;
    Ok(spec
        .methods
        .iter()
        .map(|&method| {
            let config = FitConfig {
                method,
                seed: replicate_seed(spec.seed, index as u64),
                mask: Some(spec.params.fixed.clone()),
                ..base.clone()
            };
            match fit(&data, spec.params.q, &config) {
                Ok(r) if r.valid => ReplicateFit {
                    params: Some(align_solution(&r.params, &spec.params)),
                    failure: None,
                    elapsed: r.elapsed,
                },
                Ok(r) => ReplicateFit {
                    params: None,
                    failure: Some(r.failure.unwrap_or_else(|| {
                        if r.converged {
                            "loading bound exceeded".into()
                        } else {
                            format!("no convergence in {} iterations", r.iterations)
                        }
                    })),
                    elapsed: r.elapsed,
                },
                Err(e) => ReplicateFit {
                    params: None,
                    failure: Some(e.to_string()),
                    elapsed: Duration::ZERO,
                },
            }
        })
        .collect())
}

/// Generates `spec.replicates` datasets, fits each method and aggregates
/// mean, bias and MSE over valid fits. Replicates run concurrently;
/// aggregation follows replicate order.
pub fn run_study(spec: &ScenarioSpec, base: &FitConfig) -> Result<StudyReport> {
    spec.validate()?;
    let per_rep = map_indexed(spec.replicates, |r| run_replicate(spec, r, base));
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    let truth_loadings = loading_entries(&spec.params);
    let truth_thresholds = threshold_entries(&spec.params);
    let methods = spec
        .methods
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let mut loadings = Vec::new();
            let mut thresholds = Vec::new();
            let mut failures = Vec::new();
            let mut elapsed = Duration::ZERO;
            for (r, fits) in per_rep.iter().enumerate() {
                let f = &fits[m];
                elapsed += f.elapsed;
                match (&f.params, &f.failure) {
                    (Some(p), _) => {
                        loadings.push(loading_entries(p));
                        thresholds.push(threshold_entries(p));
                    }
                    (None, reason) => failures.push(ReplicateFailure {
                        replicate: r,
                        reason: reason.clone().unwrap_or_default(),
                    }),
                }
            }
            let valid = loadings.len();
            MethodReport {
                method,
                replicates: spec.replicates,
                valid,
                percent_valid: if spec.replicates == 0 {
                    0.0
                } else {
                    100.0 * valid as f64 / spec.replicates as f64
                },
                loadings: summarise(&truth_loadings, &loadings),
                thresholds: summarise(&truth_thresholds, &thresholds),
                failures,
                elapsed,
            }
        })
        .collect();
    Ok(StudyReport {
        scenario: spec.name.clone(),
        n: spec.n,
        replicates: spec.replicates,
        seed: spec.seed,
        methods,
    })
}

/// Posterior density on a regular `q = 2` grid, normalised by the
/// AGH-mode marginal likelihood. Rows are `(z1, z2, density)`.
pub fn density_grid(
    params: &ModelParams,
    pattern: &[usize],
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Vec<[f64; 3]>> {
    params.check_pattern(pattern)?;
    if params.q != 2 || steps < 2 || hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidInput("density grid needs q = 2, steps >= 2 and lo < hi".into()));
    }
    let geo = find_mode(params, pattern, None, None, &ModeConfig::default())?;
    let rule = TensorRule::new(21, 2)?;
    let log_marginal = agh_mode_posterior(params, pattern, &geo, &rule)?.log_marginal;
    let h = (hi - lo) / (steps - 1) as f64;
    let mut out = Vec::with_capacity(steps * steps);
    for a in 0..steps {
        for b in 0..steps {
            let z = [lo + a as f64 * h, lo + b as f64 * h];
            let lk = crate::geometry::log_kernel(params, pattern, &z, None);
            out.push([z[0], z[1], (lk - log_marginal).exp()]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn replicate_seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..100).map(|r| replicate_seed(7, r)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_eq!(replicate_seed(7, 3), a[3]);
        assert_ne!(replicate_seed(8, 3), a[3]);
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = ScenarioSpec::symmetric(50);
        assert_eq!(generate(&spec, 4).unwrap(), generate(&spec, 4).unwrap());
        assert_ne!(generate(&spec, 4).unwrap(), generate(&spec, 5).unwrap());
    }

    #[test]
    fn zero_loading_frequencies_match_threshold_probabilities() {
        let spec = ScenarioSpec::null_loadings(100_000);
        let data = generate(&spec, 0).unwrap();
        let item = &spec.params.items[0];
        for s in 1..=4 {
            let freq = data.patterns().filter(|p| p[0] == s).count() as f64 / data.n() as f64;
            let prob = item.category_prob(&[0.0, 0.0], s).unwrap();
            assert!((freq - prob).abs() < 0.01, "s={s}: {freq} vs {prob}");
        }
    }

    #[test]
    fn extreme_thresholds_put_everything_in_category_one() {
        let params = ModelParams::new(vec![ItemParams::new(vec![60.0, 61.0], vec![0.5]).unwrap()], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = generate_with(&params, 500, &mut rng).unwrap();
        assert!(data.patterns().all(|p| p[0] == 1));
    }

    #[test]
    fn gaussian_posterior_has_null_mardia_values() {
        let spec = ScenarioSpec::null_loadings(10);
        let rule = TensorRule::new(21, 2).unwrap();
        let (b1, b2) = mardia(&spec.params, &[1, 2, 3, 4, 2], &rule).unwrap();
        assert!(b1.abs() < 1e-6);
        assert_relative_eq!(b2, 8.0, epsilon = 1e-6);
    }

    #[test]
    fn general_skewness_matches_bivariate_display() {
        // With whitened coordinates, Σ_{rst} m_rst² collapses to
        // μ30² + μ03² + 3μ12² + 3μ21², and E[(x'x)²] to μ40 + μ04 + 2μ22.
        let spec = ScenarioSpec::skewed(10);
        let pattern = [4, 1, 4, 4, 1];
        let rule = TensorRule::new(21, 2).unwrap();
        let (b1, b2) = mardia(&spec.params, &pattern, &rule).unwrap();
        let geo = find_mode(&spec.params, &pattern, None, None, &ModeConfig::default()).unwrap();
        let nodes = agh_mode_posterior(&spec.params, &pattern, &geo, &rule).unwrap();
        let mean = nodes.mean();
        let l = Cholesky::new(nodes.covariance(&mean)).unwrap().l();
        let mu = |i: i32, j: i32| {
            nodes.expect_with(|z| {
                let d = DVector::from_column_slice(z) - &mean;
                let x = l.solve_lower_triangular(&d).unwrap();
                x[0].powi(i) * x[1].powi(j)
            })
        };
        let display1 = mu(3, 0).powi(2) + mu(0, 3).powi(2) + 3.0 * mu(1, 2).powi(2) + 3.0 * mu(2, 1).powi(2);
        let display2 = mu(4, 0) + mu(0, 4) + 2.0 * mu(2, 2);
        assert_relative_eq!(b1, display1, epsilon = 1e-12);
        assert_relative_eq!(b2, display2, epsilon = 1e-10);
        assert!(b1 > 1e-3);
    }

    #[test]
    fn significance_tests_null_cases() {
        let cfg = MardiaConfig::default();
        assert!(!skewness_significant(1e-6, 2, &cfg));
        assert!(!kurtosis_significant(8.0, 2, &cfg));
        assert!(skewness_significant(10.0, 2, &cfg));
    }

    #[test]
    fn zero_replicate_study_is_empty() {
        let mut spec = ScenarioSpec::symmetric(20);
        spec.replicates = 0;
        let report = run_study(&spec, &FitConfig::default()).unwrap();
        for m in &report.methods {
            assert_eq!(m.percent_valid, 0.0);
            assert_eq!(m.valid, 0);
            assert_eq!(m.loadings.len(), 9);
        }
    }
}
