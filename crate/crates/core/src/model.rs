//! Proportional-odds measurement model.
//!
//! Item `i` with `c` ordered categories has thresholds `τ_1 < … < τ_{c-1}` and a
//! loading vector `α`. Given latent factors `z`, the cumulative probability of a
//! response in category `s` or lower is
//!
//! ```text
//! γ_s(z) = F(τ_s - α'z),   γ_0 = 0,   γ_c = 1
//! ```
//!
//! with `F` the logistic CDF, and the category probability is `π_s = γ_s - γ_{s-1}`.
//! Every quantity here depends on `z` only through the projection `x = α'z`,
//! which the `*_at` helpers take directly so hot loops avoid re-projecting.
//!
//! Categories are 1-based throughout the public API.

use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};

/// Lower clamp applied to category probabilities and cumulative gaps before
/// division or logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Minimum spacing between consecutive thresholds kept during estimation.
pub const MIN_THRESHOLD_GAP: f64 = 1e-6;

/// Link CDF. All cumulative probabilities are computed through this function
/// and [`link_cdf_upper`]; swapping the link means replacing these two (and the
/// closed-form derivatives in `geometry`, which use the logistic identity
/// `F' = F(1 - F)`).
#[inline]
pub fn link_cdf(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `1 - F(eta)` without cancellation.
#[inline]
pub fn link_cdf_upper(eta: f64) -> f64 {
    link_cdf(-eta)
}

/// `(F(eta), 1 - F(eta))` with a single exponential.
#[inline]
pub(crate) fn link_pair(eta: f64) -> (f64, f64) {
    let e = (-eta.abs()).exp();
    let big = 1.0 / (1.0 + e);
    let small = e / (1.0 + e);
    if eta >= 0.0 {
        (big, small)
    } else {
        (small, big)
    }
}

/// Link quantities at the two cumulative probabilities bounding category `y`:
/// `hi` refers to `γ_y`, `lo` to `γ_{y-1}`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CategoryLocal {
    pub up_hi: f64,
    pub g_lo: f64,
    pub w_hi: f64,
    pub w_lo: f64,
    pub u_hi: f64,
    pub u_lo: f64,
    /// `γ_y - γ_{y-1}`, floored at [`PROB_FLOOR`].
    pub gap: f64,
}

impl CategoryLocal {
    /// `A1_y`.
    #[inline]
    pub fn a1(&self, y: usize) -> f64 {
        if y == 1 {
            self.up_hi
        } else {
            self.w_hi / self.gap
        }
    }

    /// `A2_{y-1}`.
    #[inline]
    pub fn a2(&self, last: bool) -> f64 {
        if last {
            self.g_lo
        } else {
            self.w_lo / self.gap
        }
    }

    /// `1 - γ_y - γ_{y-1}`.
    #[inline]
    pub fn a3_factor(&self) -> f64 {
        self.up_hi - self.g_lo
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Observed ordinal responses: `n` patterns over `p` items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrdinalDataset {
    item_names: Vec<String>,
    categories: Vec<usize>,
    /// Row-major `n × p`, 1-based categories.
    responses: Vec<usize>,
    n: usize,
}

impl OrdinalDataset {
    /// Builds a dataset from response rows. When `categories` is `None` each
    /// item's category count is the largest observed response (at least 2).
    pub fn new(rows: Vec<Vec<usize>>, categories: Option<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no observations".into()));
        }
        let p = rows[0].len();
        if p == 0 {
            return Err(Error::InvalidInput("dataset has no items".into()));
        }
        for (l, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::InvalidInput(format!(
                    "observation {} has {} responses, expected {p}",
                    l + 1,
                    row.len()
                )));
            }
        }
        let categories = match categories {
            Some(c) => {
                if c.len() != p {
                    return Err(Error::InvalidInput(format!(
                        "{} category counts given for {p} items",
                        c.len()
                    )));
                }
                c
            }
            None => (0..p)
                .map(|i| rows.iter().map(|r| r[i]).max().unwrap_or(2).max(2))
                .collect(),
        };
        for (i, &c) in categories.iter().enumerate() {
            if c < 2 {
                return Err(Error::InvalidInput(format!("item {} has {c} categories", i + 1)));
            }
        }
        for (l, row) in rows.iter().enumerate() {
            for (i, &y) in row.iter().enumerate() {
                if y < 1 || y > categories[i] {
                    return Err(Error::InvalidInput(format!(
                        "observation {}, item {}: response {y} outside 1..={}",
                        l + 1,
                        i + 1,
                        categories[i]
                    )));
                }
            }
        }
        let item_names = (1..=p).map(|i| format!("y{i}")).collect();
        Ok(Self {
            item_names,
            categories,
            responses: rows.into_iter().flatten().collect(),
            n,
        })
    }

    pub fn with_item_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::InvalidInput(format!(
                "{} item names for {} items",
                names.len(),
                self.p()
            )));
        }
        self.item_names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.categories.len()
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn item_names(&self) -> &[String] {
        &self.item_names
    }

    pub fn pattern(&self, l: usize) -> &[usize] {
        let p = self.p();
        &self.responses[l * p..(l + 1) * p]
    }

    pub fn patterns(&self) -> impl Iterator<Item = &[usize]> {
        self.responses.chunks(self.p())
    }

    /// Distinct response patterns with their frequencies, in lexicographic order.
    pub fn unique_patterns(&self) -> Vec<(Vec<usize>, usize)> {
        let mut counts = std::collections::BTreeMap::<&[usize], usize>::new();
        for pat in self.patterns() {
            *counts.entry(pat).or_default() += 1;
        }
        counts.into_iter().map(|(k, v)| (k.to_vec(), v)).collect()
    }

    /// Cumulative indicator `y*_{i,s}`: 1 when the response to item `i` in
    /// observation `l` is in category `s` or lower.
    pub fn cumulative_indicator(&self, l: usize, i: usize, s: usize) -> u8 {
        cumulative_indicator(self.pattern(l)[i], s)
    }
}

/// `y*_s` for a response `y`: 1 iff `y ≤ s`. `y*_0 = 0` and `y*_c = 1`.
#[inline]
pub fn cumulative_indicator(y: usize, s: usize) -> u8 {
    u8::from(y <= s)
}

/// Thresholds and loadings of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    pub thresholds: Vec<f64>,
    pub loadings: Vec<f64>,
}

impl ItemParams {
    pub fn new(thresholds: Vec<f64>, loadings: Vec<f64>) -> Result<Self> {
        let item = Self { thresholds, loadings };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidInput("item needs at least one threshold".into()));
        }
        if self.thresholds.iter().chain(&self.loadings).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite item parameter".into()));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "thresholds must be strictly increasing: {:?}",
                self.thresholds
            )));
        }
        Ok(())
    }

    /// Number of categories `c`.
    pub fn n_categories(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn q(&self) -> usize {
        self.loadings.len()
    }

    /// Length of the parameter vector `(τ_1..τ_{c-1}, α_1..α_q)`.
    pub fn n_params(&self) -> usize {
        self.thresholds.len() + self.loadings.len()
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.thresholds.iter().chain(&self.loadings).copied().collect()
    }

    pub fn from_vector(v: &[f64], n_thresholds: usize) -> Self {
        Self {
            thresholds: v[..n_thresholds].to_vec(),
            loadings: v[n_thresholds..].to_vec(),
        }
    }

    #[inline]
    pub fn project(&self, z: &[f64]) -> f64 {
        dot(&self.loadings, z)
    }

    /// `η_s = τ_s - α'z`.
    pub fn linear_predictor(&self, z: &[f64], s: usize) -> Result<f64> {
        check_index("threshold", s, 1, self.thresholds.len())?;
        Ok(self.thresholds[s - 1] - self.project(z))
    }

    /// `γ_s(z)`, `s ∈ 0..=c`.
    pub fn cumulative_prob(&self, z: &[f64], s: usize) -> Result<f64> {
        check_index("cumulative category", s, 0, self.n_categories())?;
        Ok(self.gamma_at(self.project(z), s))
    }

    /// `π_s(z) = γ_s - γ_{s-1}`, `s ∈ 1..=c`.
    pub fn category_prob(&self, z: &[f64], s: usize) -> Result<f64> {
        check_index("category", s, 1, self.n_categories())?;
        Ok(self.gap_at(self.project(z), s))
    }

    /// `log g(y | z)`, floored at `log(PROB_FLOOR)`.
    pub fn cond_log_lik(&self, y: usize, z: &[f64]) -> Result<f64> {
        check_index("response", y, 1, self.n_categories())?;
        Ok(self.log_prob_at(self.project(z), y))
    }

    /// `θ_s = log[γ_s / (γ_{s+1} - γ_s)]`, `s ∈ 1..=c-1`.
    pub fn theta(&self, z: &[f64], s: usize) -> Result<f64> {
        check_index("threshold", s, 1, self.thresholds.len())?;
        let x = self.project(z);
        Ok(self.gamma_at(x, s).ln() - self.gap_at(x, s + 1).max(PROB_FLOOR).ln())
    }

    /// `b(θ_s) = log[γ_{s+1} / (γ_{s+1} - γ_s)]`, `s ∈ 1..=c-1`.
    pub fn b_theta(&self, z: &[f64], s: usize) -> Result<f64> {
        check_index("threshold", s, 1, self.thresholds.len())?;
        let x = self.project(z);
        Ok(self.gamma_at(x, s + 1).ln() - self.gap_at(x, s + 1).max(PROB_FLOOR).ln())
    }

    /// Complete-data score `∂ log g(y | z) / ∂(τ, α)`, thresholds first.
    ///
    /// The threshold block is `(y*_s - y*_{s-1}) A1_s - (y*_{s+1} - y*_s) A2_s`
    /// and the loading block is `-A3_y`.
    pub fn complete_data_score(&self, y: usize, z: &[f64]) -> Result<Vec<f64>> {
        check_index("response", y, 1, self.n_categories())?;
        let x = self.project(z);
        let nt = self.thresholds.len();
        let mut out = Vec::with_capacity(self.n_params());
        for s in 1..=nt {
            let up = f64::from(cumulative_indicator(y, s)) - f64::from(cumulative_indicator(y, s - 1));
            let down =
                f64::from(cumulative_indicator(y, s + 1)) - f64::from(cumulative_indicator(y, s));
            let mut v = 0.0;
            if up != 0.0 {
                v += up * self.a1_at(x, s);
            }
            if down != 0.0 {
                v -= down * self.a2_at(x, s);
            }
            out.push(v);
        }
        let f = self.a3_factor_at(x, y);
        out.extend(z.iter().map(|zj| -f * zj));
        Ok(out)
    }

    // ---- projection-level helpers -------------------------------------------------

    #[inline]
    pub(crate) fn eta_at(&self, x: f64, s: usize) -> f64 {
        self.thresholds[s - 1] - x
    }

    /// `γ_s` at projection `x`.
    #[inline]
    pub fn gamma_at(&self, x: f64, s: usize) -> f64 {
        if s == 0 {
            0.0
        } else if s >= self.n_categories() {
            1.0
        } else {
            link_cdf(self.eta_at(x, s))
        }
    }

    /// `γ_s (1 - γ_s)`; zero at the boundary categories.
    #[inline]
    pub fn w_at(&self, x: f64, s: usize) -> f64 {
        if s == 0 || s >= self.n_categories() {
            0.0
        } else {
            let eta = self.eta_at(x, s);
            link_cdf(eta) * link_cdf_upper(eta)
        }
    }

    /// `γ_s (1 - γ_s)(1 - 2γ_s)`, the derivative of `w` with respect to `η`.
    #[inline]
    pub fn u_at(&self, x: f64, s: usize) -> f64 {
        if s == 0 || s >= self.n_categories() {
            0.0
        } else {
            let eta = self.eta_at(x, s);
            let g = link_cdf(eta);
            let h = link_cdf_upper(eta);
            g * h * (h - g)
        }
    }

    /// `γ_s - γ_{s-1}` computed without cancellation, `s ∈ 1..=c`. Not floored.
    #[inline]
    pub fn gap_at(&self, x: f64, s: usize) -> f64 {
        let c = self.n_categories();
        if s == 1 {
            link_cdf(self.eta_at(x, 1))
        } else if s == c {
            link_cdf_upper(self.eta_at(x, c - 1))
        } else {
            let hi = self.eta_at(x, s);
            let lo = self.eta_at(x, s - 1);
            link_cdf(hi) * link_cdf_upper(lo) * (-(lo - hi).exp_m1())
        }
    }

    #[inline]
    pub fn log_prob_at(&self, x: f64, y: usize) -> f64 {
        self.gap_at(x, y).max(PROB_FLOOR).ln()
    }

    pub(crate) fn local_at(&self, x: f64, y: usize) -> CategoryLocal {
        let c = self.n_categories();
        let (g_hi, up_hi) = if y >= c { (1.0, 0.0) } else { link_pair(self.eta_at(x, y)) };
        let (g_lo, up_lo) = if y <= 1 { (0.0, 1.0) } else { link_pair(self.eta_at(x, y - 1)) };
        let w_hi = g_hi * up_hi;
        let w_lo = g_lo * up_lo;
        let gap = if y <= 1 {
            g_hi
        } else if y >= c {
            up_lo
        } else {
            g_hi * up_lo * (-(self.eta_at(x, y - 1) - self.eta_at(x, y)).exp_m1())
        };
        CategoryLocal {
            up_hi,
            g_lo,
            w_hi,
            w_lo,
            u_hi: w_hi * (up_hi - g_hi),
            u_lo: w_lo * (up_lo - g_lo),
            gap: gap.max(PROB_FLOOR),
        }
    }

    /// `A1_s` at projection `x`.
    #[inline]
    pub fn a1_at(&self, x: f64, s: usize) -> f64 {
        if s == 1 {
            link_cdf_upper(self.eta_at(x, 1))
        } else {
            self.w_at(x, s) / self.gap_at(x, s).max(PROB_FLOOR)
        }
    }

    /// `A2_s` at projection `x`.
    #[inline]
    pub fn a2_at(&self, x: f64, s: usize) -> f64 {
        if s + 1 == self.n_categories() {
            // (1 - γ_s) γ_s / (1 - γ_s)
            link_cdf(self.eta_at(x, s))
        } else {
            self.w_at(x, s) / self.gap_at(x, s + 1).max(PROB_FLOOR)
        }
    }

    /// Scalar factor `1 - γ_s - γ_{s-1}` of `A3_s = (1 - γ_s - γ_{s-1}) z`.
    #[inline]
    pub fn a3_factor_at(&self, x: f64, s: usize) -> f64 {
        let c = self.n_categories();
        if s == c {
            -self.gamma_at(x, c - 1)
        } else {
            link_cdf_upper(self.eta_at(x, s)) - self.gamma_at(x, s - 1)
        }
    }
}

/// Parameters of the full model: `p` items, `q` latent factors with a standard
/// normal prior, and a mask of loadings fixed at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub items: Vec<ItemParams>,
    pub q: usize,
    /// `fixed[i][j]` is true when `α_ij` is held at zero.
    pub fixed: Vec<Vec<bool>>,
}

impl ModelParams {
    /// Builds parameters with the default identification mask.
    pub fn new(items: Vec<ItemParams>, q: usize) -> Result<Self> {
        let fixed = default_mask(items.len(), q);
        Self::with_mask(items, q, fixed)
    }

    pub fn with_mask(items: Vec<ItemParams>, q: usize, fixed: Vec<Vec<bool>>) -> Result<Self> {
        let params = Self { items, q, fixed };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::InvalidInput("latent dimension must be at least 1".into()));
        }
        if self.items.is_empty() {
            return Err(Error::InvalidInput("model has no items".into()));
        }
        if self.fixed.len() != self.items.len() {
            return Err(Error::InvalidInput("constraint mask has wrong number of rows".into()));
        }
        for (i, (item, mask)) in self.items.iter().zip(&self.fixed).enumerate() {
            item.validate()?;
            if item.loadings.len() != self.q || mask.len() != self.q {
                return Err(Error::InvalidInput(format!(
                    "item {} needs {} loadings and mask entries",
                    i + 1,
                    self.q
                )));
            }
            if item.loadings.iter().zip(mask).any(|(a, &f)| f && *a != 0.0) {
                return Err(Error::InvalidInput(format!(
                    "item {} has a non-zero loading where the mask fixes it at zero",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.items.len()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.items.iter().map(ItemParams::n_categories).collect()
    }

    /// Checks that a response pattern is compatible with these parameters.
    pub fn check_pattern(&self, pattern: &[usize]) -> Result<()> {
        if pattern.len() != self.p() {
            return Err(Error::InvalidInput(format!(
                "pattern has {} responses, model has {} items",
                pattern.len(),
                self.p()
            )));
        }
        for (item, &y) in self.items.iter().zip(pattern) {
            check_index("response", y, 1, item.n_categories())?;
        }
        Ok(())
    }

    pub fn check_dataset(&self, data: &OrdinalDataset) -> Result<()> {
        if data.categories() != self.categories().as_slice() {
            return Err(Error::InvalidInput(format!(
                "dataset categories {:?} do not match model categories {:?}",
                data.categories(),
                self.categories()
            )));
        }
        Ok(())
    }

    /// `log g(y | z) = Σ_i log g(y_i | z)`.
    pub fn joint_cond_log_lik(&self, pattern: &[usize], z: &[f64]) -> Result<f64> {
        self.check_pattern(pattern)?;
        Ok(self.joint_log_lik_unchecked(pattern, z))
    }

    #[inline]
    pub(crate) fn joint_log_lik_unchecked(&self, pattern: &[usize], z: &[f64]) -> f64 {
        self.items
            .iter()
            .zip(pattern)
            .map(|(item, &y)| item.log_prob_at(item.project(z), y))
            .sum()
    }

    /// Free loadings in row order of the reports: factor by factor, item by item.
    pub fn free_loadings(&self) -> Vec<(usize, usize, f64)> {
        (0..self.q)
            .flat_map(|j| {
                self.items
                    .iter()
                    .enumerate()
                    .filter(move |(i, _)| !self.fixed[*i][j])
                    .map(move |(i, item)| (i, j, item.loadings[j]))
            })
            .collect()
    }

    /// Largest absolute difference over all thresholds and loadings.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.items
            .iter()
            .zip(&other.items)
            .flat_map(|(a, b)| {
                a.thresholds
                    .iter()
                    .zip(&b.thresholds)
                    .chain(a.loadings.iter().zip(&b.loadings))
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Default identification: `α_ij = 0` for `j > i` on the first `q - 1` items.
pub fn default_mask(p: usize, q: usize) -> Vec<Vec<bool>> {
    (0..p)
        .map(|i| (0..q).map(|j| i + 1 < q && j > i).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn local_quantities_match_individual_helpers() {
        let it = ItemParams::new(vec![-1.2, 0.1, 0.9], vec![0.8]).unwrap();
        for x in [-30.0, -2.0, 0.0, 0.7, 3.0, 40.0] {
            for y in 1..=4 {
                let l = it.local_at(x, y);
                assert_relative_eq!(1.0 - l.up_hi, it.gamma_at(x, y), max_relative = 1e-14, epsilon = 1e-15);
                assert_relative_eq!(l.g_lo, it.gamma_at(x, y - 1), max_relative = 1e-14);
                assert_relative_eq!(l.w_hi, it.w_at(x, y), max_relative = 1e-13);
                assert_relative_eq!(l.u_lo, it.u_at(x, y - 1), max_relative = 1e-13, epsilon = 1e-300);
                assert_relative_eq!(l.gap, it.gap_at(x, y).max(PROB_FLOOR), max_relative = 1e-13);
                assert_relative_eq!(l.a3_factor(), it.a3_factor_at(x, y), max_relative = 1e-13, epsilon = 1e-15);
                if y <= 3 {
                    assert_relative_eq!(l.a1(y), it.a1_at(x, y), max_relative = 1e-12);
                }
                if y >= 2 {
                    assert_relative_eq!(l.a2(y == 4), it.a2_at(x, y - 1), max_relative = 1e-12);
                }
            }
        }
    }

    fn item(t: &[f64], a: &[f64]) -> ItemParams {
        ItemParams::new(t.to_vec(), a.to_vec()).unwrap()
    }

    #[test]
    fn linear_predictor_cancels() {
        let it = item(&[0.5], &[1.0]);
        assert_eq!(it.linear_predictor(&[0.5], 1).unwrap(), 0.0);
        let zero = item(&[-1.0, 0.3], &[0.0, 0.0]);
        assert_eq!(zero.linear_predictor(&[4.0, -2.0], 2).unwrap(), 0.3);
        assert!(matches!(zero.linear_predictor(&[0.0, 0.0], 3), Err(Error::Index { .. })));
        assert!(zero.linear_predictor(&[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn linear_predictor_on_dispersed_loadings() {
        // α_3 = (2.11, 1.52), τ = (-3, 0, 3), z = (0.4, -1.1)
        let it = item(&[-3.0, 0.0, 3.0], &[2.11, 1.52]);
        let z = [0.4, -1.1];
        let proj = 2.11 * 0.4 + 1.52 * -1.1;
        assert_relative_eq!(proj, -0.828, epsilon = 1e-12);
        assert_relative_eq!(it.linear_predictor(&z, 1).unwrap(), -2.172, epsilon = 1e-12);
        assert_relative_eq!(it.linear_predictor(&z, 2).unwrap(), 0.828, epsilon = 1e-12);
        assert_relative_eq!(it.linear_predictor(&z, 3).unwrap(), 3.828, epsilon = 1e-12);
    }

    #[test]
    fn cumulative_probabilities() {
        let it = item(&[-2.0, 0.0, 2.0], &[0.0]);
        let z = [1.7];
        assert_eq!(it.cumulative_prob(&z, 0).unwrap(), 0.0);
        assert_eq!(it.cumulative_prob(&z, 4).unwrap(), 1.0);
        assert_relative_eq!(it.cumulative_prob(&z, 1).unwrap(), 0.11920292202211755, epsilon = 1e-15);
        assert_relative_eq!(it.cumulative_prob(&z, 2).unwrap(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(it.cumulative_prob(&z, 3).unwrap(), 0.8807970779778823, epsilon = 1e-15);
        assert!(it.cumulative_prob(&z, 5).is_err());
    }

    #[test]
    fn category_probabilities() {
        let it = item(&[-2.0, 0.0, 2.0], &[0.0]);
        let expected = [0.11920292202211755, 0.3807970779778823, 0.3807970779778823, 0.11920292202211755];
        for (s, e) in (1..=4).zip(expected) {
            assert_relative_eq!(it.category_prob(&[0.3], s).unwrap(), e, epsilon = 1e-15);
        }
        let two = item(&[0.0], &[0.0]);
        assert_eq!(two.category_prob(&[0.0], 1).unwrap(), 0.5);
        assert_eq!(two.category_prob(&[0.0], 2).unwrap(), 0.5);
    }

    #[test]
    fn cond_log_lik_floor() {
        let it = item(&[0.0], &[0.0]);
        assert_relative_eq!(it.cond_log_lik(1, &[0.0]).unwrap(), 0.5f64.ln());
        let extreme = item(&[-80.0, 80.0], &[1.0]);
        let v = extreme.cond_log_lik(1, &[0.0]).unwrap();
        assert!(v.is_finite());
        assert_relative_eq!(v, PROB_FLOOR.ln());
    }

    #[test]
    fn theta_and_b() {
        // γ_1 = 0.25, γ_2 = 0.75
        let it = item(&[(0.25f64 / 0.75).ln(), 3f64.ln()], &[0.0]);
        assert_relative_eq!(it.theta(&[0.0], 1).unwrap(), 0.5f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(it.b_theta(&[0.0], 1).unwrap(), 1.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loading_score_vanishes_by_symmetry() {
        let it = item(&[-1.0, 1.0], &[0.0, 0.0]);
        let s = it.complete_data_score(2, &[0.0, 0.0]).unwrap();
        assert_eq!(&s[2..], &[0.0, 0.0]);
    }

    #[test]
    fn mask_default() {
        let m = default_mask(5, 2);
        assert_eq!(m[0], vec![false, true]);
        assert!(m[1..].iter().all(|r| r == &vec![false, false]));
        let m3 = default_mask(4, 3);
        assert_eq!(m3[0], vec![false, true, true]);
        assert_eq!(m3[1], vec![false, false, true]);
        assert_eq!(m3[2], vec![false, false, false]);
        assert!(default_mask(3, 1).iter().all(|r| r == &vec![false]));
    }

    #[test]
    fn masked_loading_rejected() {
        let items = vec![item(&[0.0], &[1.0, 0.5]), item(&[0.0], &[1.0, 0.5])];
        assert!(ModelParams::new(items, 2).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(OrdinalDataset::new(vec![vec![1, 0]], None).is_err());
        assert!(OrdinalDataset::new(vec![vec![1, 3]], Some(vec![2, 2])).is_err());
        assert!(OrdinalDataset::new(vec![vec![1, 2], vec![1]], None).is_err());
        let d = OrdinalDataset::new(vec![vec![1, 2], vec![1, 2], vec![2, 1]], None).unwrap();
        assert_eq!(d.categories(), &[2, 2]);
        assert_eq!(d.unique_patterns(), vec![(vec![1, 2], 2), (vec![2, 1], 1)]);
        assert_eq!(d.cumulative_indicator(2, 0, 1), 0);
        assert_eq!(d.cumulative_indicator(2, 0, 2), 1);
    }
}
