//! Browser bindings. Every export takes and returns JSON strings so the page
//! needs no generated type glue beyond the wasm-bindgen shim.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use ordinal_lvm::em::{align_solution, fit, posterior_for_pattern, FitConfig};
use ordinal_lvm::geometry::{find_mode, ModeConfig, Power};
use ordinal_lvm::quadrature::TensorRule;
use ordinal_lvm::sim::{density_grid, generate_with, mardia, skewness_significant, MardiaConfig, ScenarioSpec};
use ordinal_lvm::{ApproximationMethod, ModelParams};

type Out = Result<String, String>;

fn preset(name: &str) -> Result<ScenarioSpec, String> {
    match name {
        "symmetric" => Ok(ScenarioSpec::symmetric(200)),
        "skewed" => Ok(ScenarioSpec::skewed(200)),
        "dispersed" => Ok(ScenarioSpec::dispersed(200)),
        "null" => Ok(ScenarioSpec::null_loadings(200)),
        _ => Err(format!("unknown preset `{name}`")),
    }
}

fn json<T: Serialize>(v: &T) -> Out {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn method(name: &str) -> Result<ApproximationMethod, String> {
    name.parse().map_err(|e: ordinal_lvm::Error| e.to_string())
}

pub fn preset_params_json(name: &str) -> Out {
    json(&preset(name)?.params)
}

#[derive(Serialize)]
struct MethodMean {
    method: String,
    mean: Vec<f64>,
}

#[derive(Serialize)]
struct PosteriorView {
    mode: Vec<f64>,
    /// Row-major inverse curvature at the mode.
    covariance: Vec<f64>,
    means: Vec<MethodMean>,
    beta1: f64,
    beta2: f64,
    skewed: bool,
    /// `[z1, z2, density]` rows on a square grid (q = 2 only).
    grid: Vec<[f64; 3]>,
    grid_steps: usize,
}

pub fn posterior_json(params_json: &str, pattern_json: &str) -> Out {
    let params: ModelParams = serde_json::from_str(params_json).map_err(|e| e.to_string())?;
    params.validate().map_err(|e| e.to_string())?;
    let pattern: Vec<usize> = serde_json::from_str(pattern_json).map_err(|e| e.to_string())?;
    params.check_pattern(&pattern).map_err(|e| e.to_string())?;
    let q = params.q;
    let geo = find_mode(&params, &pattern, None, None, &ModeConfig::default()).map_err(|e| e.to_string())?;
    let covariance = geo.cholesky().map_err(|e| e.to_string())?.inverse();
    let mut means = Vec::new();
    for name in ["laplace", "fla", "agh-mode:5", "agh-mean:5", "agh-mode:21"] {
        let post = posterior_for_pattern(&params, &pattern, method(name)?).map_err(|e| e.to_string())?;
        let mean = (0..q).map(|coord| post.expect(&Power { coord, exponent: 1 })).collect();
        means.push(MethodMean { method: name.into(), mean });
    }
    let config = MardiaConfig::default();
    let rule = TensorRule::new(config.points, q).map_err(|e| e.to_string())?;
    let (beta1, beta2) = mardia(&params, &pattern, &rule).map_err(|e| e.to_string())?;
    let grid_steps = 41;
    let grid = if q == 2 {
        density_grid(&params, &pattern, -4.0, 4.0, grid_steps).map_err(|e| e.to_string())?
    } else {
        Vec::new()
    };
    json(&PosteriorView {
        mode: geo.mode.iter().copied().collect(),
        covariance: covariance.transpose().iter().copied().collect(),
        means,
        beta1,
        beta2,
        skewed: skewness_significant(beta1, q, &config),
        grid,
        grid_steps,
    })
}

#[derive(Serialize)]
struct FitView {
    method: String,
    valid: bool,
    converged: bool,
    iterations: usize,
    failure: Option<String>,
    log_lik_trace: Vec<f64>,
    truth: ModelParams,
    estimate: ModelParams,
}

pub fn simulate_and_fit_json(preset_name: &str, n: usize, seed: u64, method_name: &str) -> Out {
    let spec = preset(preset_name)?;
    if !(10..=2000).contains(&n) {
        return Err("n must be between 10 and 2000".into());
    }
    let m = method(method_name)?;
    let data = generate_with(&spec.params, n, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
    let mut config = FitConfig::with_method(m);
    config.max_em_iter = 200;
    let result = fit(&data, spec.params.q, &config).map_err(|e| e.to_string())?;
    json(&FitView {
        method: m.to_string(),
        valid: result.valid,
        converged: result.converged,
        iterations: result.iterations,
        failure: result.failure.clone(),
        log_lik_trace: result.trace.iter().map(|r| r.log_lik).collect(),
        estimate: align_solution(&result.params, &spec.params),
        truth: spec.params,
    })
}

fn js(r: Out) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Generating parameters of a named population as JSON.
#[wasm_bindgen(js_name = presetParams)]
pub fn preset_params(name: &str) -> Result<String, JsValue> {
    js(preset_params_json(name))
}

/// Mode, method-by-method posterior means, Mardia statistics and a density grid.
#[wasm_bindgen(js_name = posterior)]
pub fn posterior(params_json: &str, pattern_json: &str) -> Result<String, JsValue> {
    js(posterior_json(params_json, pattern_json))
}

/// Draws a sample from a preset and fits it.
#[wasm_bindgen(js_name = simulateAndFit)]
pub fn simulate_and_fit(preset_name: &str, n: usize, seed: u64, method_name: &str) -> Result<String, JsValue> {
    js(simulate_and_fit_json(preset_name, n, seed, method_name))
}
