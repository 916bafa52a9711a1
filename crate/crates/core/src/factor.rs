//! k-factor design matrices, per-asset OLS sufficient statistics, and the
//! data model for returns panels.
//!
//! The regression for asset `i` is `r_i = X θ_i + ε_i` with
//! `X = [1 | market | extra factors]` of shape `n × (k+1)`. The null point
//! `μ₀ = (0, 1, 0, …, 0)ᵀ` encodes "intercept zero, market loading one,
//! other loadings zero": an asset at the null behaves like the market.

use chrono::NaiveDate;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Errors from design construction and estimation.
#[derive(Debug, Error)]
pub enum FactorError {
    /// Σ_X = XᵀX is singular to working precision, or n ≤ k+1. Signals
    /// collinear factor columns or too few observations.
    #[error("design matrix rank deficient (n={n}, columns={cols}): {detail}")]
    RankDeficient {
        n: usize,
        cols: usize,
        detail: String,
    },

    /// Portfolio weights do not sum to one.
    #[error("portfolio weights sum to {sum}, expected 1 within 1e-9")]
    WeightSum { sum: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Excess-return panel: `n` trading days by `P` assets.
#[derive(Debug, Clone)]
pub struct ReturnsPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    /// n×P matrix of daily excess returns; column order matches `assets`.
    pub excess: DMatrix<f64>,
}

impl ReturnsPanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        excess: DMatrix<f64>,
    ) -> Result<Self, FactorError> {
        if excess.nrows() != dates.len() || excess.ncols() != assets.len() {
            return Err(FactorError::DimensionMismatch(format!(
                "excess is {}x{}, expected {}x{}",
                excess.nrows(),
                excess.ncols(),
                dates.len(),
                assets.len()
            )));
        }
        if dates.is_empty() || assets.is_empty() {
            return Err(FactorError::InvalidInput(
                "panel needs at least one day and one asset".into(),
            ));
        }
        if excess.iter().any(|v| !v.is_finite()) {
            return Err(FactorError::InvalidInput(
                "panel contains non-finite excess returns".into(),
            ));
        }
        Ok(Self {
            dates,
            assets,
            excess,
        })
    }

    pub fn n_days(&self) -> usize {
        self.excess.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.excess.ncols()
    }

    /// Column view of one asset's excess returns.
    pub fn asset_returns(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.excess.column(i).as_slice())
    }
}

/// The null point μ₀ = (0, 1, 0, …, 0)ᵀ of the pricing restriction.
#[derive(Debug, Clone, PartialEq)]
pub struct NullPoint(DVector<f64>);

impl NullPoint {
    /// Null point for a design with `dim = k+1` columns.
    pub fn for_dim(dim: usize) -> Self {
        assert!(dim >= 2, "null point needs at least intercept and market");
        let mut v = DVector::zeros(dim);
        v[1] = 1.0;
        NullPoint(v)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// An n×(k+1) factor design with cached Gram matrix Σ_X = XᵀX.
#[derive(Debug, Clone)]
pub struct FactorDesign {
    x: DMatrix<f64>,
    sigma_x: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    k: usize,
}

impl FactorDesign {
    /// Assembles `X = [1 | market | extras]` and verifies Σ_X is positive
    /// definite. Requires `n > k+1` so residual degrees of freedom remain.
    pub fn build(market: &[f64], extra_factors: &[Vec<f64>]) -> Result<Self, FactorError> {
        let n = market.len();
        for (j, f) in extra_factors.iter().enumerate() {
            if f.len() != n {
                return Err(FactorError::DimensionMismatch(format!(
                    "factor {} has length {}, market has {}",
                    j,
                    f.len(),
                    n
                )));
            }
        }
        let k = 1 + extra_factors.len();
        let dim = k + 1;
        if n <= dim {
            return Err(FactorError::RankDeficient {
                n,
                cols: dim,
                detail: "need n > k+1 observations".into(),
            });
        }
        let mut x = DMatrix::zeros(n, dim);
        for t in 0..n {
            x[(t, 0)] = 1.0;
            x[(t, 1)] = market[t];
            for (j, f) in extra_factors.iter().enumerate() {
                x[(t, 2 + j)] = f[t];
            }
        }
        Self::from_matrix(x)
    }

    /// Wraps an already-assembled design matrix (first column must be the
    /// intercept). Used by the simulator, which generates X directly.
    pub fn from_matrix(x: DMatrix<f64>) -> Result<Self, FactorError> {
        let (n, dim) = x.shape();
        if dim < 2 || n <= dim {
            return Err(FactorError::RankDeficient {
                n,
                cols: dim,
                detail: "need n > k+1 and k >= 1".into(),
            });
        }
        if x.column(0).iter().any(|v| *v != 1.0) {
            return Err(FactorError::InvalidInput(
                "first design column must be the all-ones intercept".into(),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FactorError::InvalidInput(
                "design contains non-finite entries".into(),
            ));
        }
        let sigma_x = x.transpose() * &x;
        let chol = Cholesky::new(sigma_x.clone()).ok_or_else(|| FactorError::RankDeficient {
            n,
            cols: dim,
            detail: "XᵀX not positive definite".into(),
        })?;
        // Cholesky can survive exact collinearity through rounding; reject
        // designs whose pivot ratio is at working precision.
        let diag = chol.l_dirty();
        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0_f64);
        for j in 0..dim {
            let d = diag[(j, j)].abs();
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        if dmin <= 0.0 || (dmin / dmax).powi(2) < 1e-12 {
            return Err(FactorError::RankDeficient {
                n,
                cols: dim,
                detail: "XᵀX singular to working precision".into(),
            });
        }
        Ok(Self {
            x,
            sigma_x,
            chol,
            k: dim - 1,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn sigma_x(&self) -> &DMatrix<f64> {
        &self.sigma_x
    }

    /// Number of factors k (design has k+1 columns).
    pub fn k(&self) -> usize {
        self.k
    }

    /// k+1, the parameter dimension.
    pub fn dim(&self) -> usize {
        self.k + 1
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn null_point(&self) -> NullPoint {
        NullPoint::for_dim(self.dim())
    }

    /// Solves Σ_X y = b.
    pub fn solve_sigma_x(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Restricts the design to its first `dim` columns (intercept, market,
    /// leading extras), re-validating. Used to fit a smaller model to data
    /// generated from a larger one.
    pub fn restrict(&self, dim: usize) -> Result<Self, FactorError> {
        assert!(dim >= 2 && dim <= self.dim());
        Self::from_matrix(self.x.columns(0, dim).into_owned())
    }
}

/// Per-asset OLS output: sufficient statistics for all downstream tests.
#[derive(Debug, Clone)]
pub struct AssetEstimate {
    /// θ̂_i = Σ_X⁻¹ Xᵀ r_i.
    pub theta_hat: DVector<f64>,
    /// Residual sum of squares ‖r_i − Xθ̂_i‖².
    pub rss: f64,
    /// Plug-in residual variance rss/(n−k−1).
    pub sigma2_hat: f64,
    /// Sample size.
    pub n: usize,
}

/// Least-squares fit of one asset against the design.
pub fn ols_estimate(design: &FactorDesign, r_i: &DVector<f64>) -> Result<AssetEstimate, FactorError> {
    let n = design.n();
    if r_i.len() != n {
        return Err(FactorError::DimensionMismatch(format!(
            "returns length {} vs design rows {}",
            r_i.len(),
            n
        )));
    }
    let xtr = design.x().transpose() * r_i;
    let theta_hat = design.solve_sigma_x(&xtr);
    let resid = r_i - design.x() * &theta_hat;
    let rss = resid.norm_squared();
    let df = n - design.dim();
    let sigma2_hat = rss / df as f64;
    Ok(AssetEstimate {
        theta_hat,
        rss,
        sigma2_hat,
        n,
    })
}

/// Exact idiosyncratic portfolio variance and its diversification bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdiosyncraticRisk {
    /// Σ w_i² σ_i², the exact idiosyncratic variance of the portfolio.
    pub exact: f64,
    /// max(σ²) · max(w); the exact value never exceeds this.
    pub bound: f64,
}

/// Computes the idiosyncratic variance of a weighted portfolio together
/// with the bound that drives diversification: as the largest weight
/// shrinks, the idiosyncratic risk washes out.
pub fn idiosyncratic_bound(
    weights: &[f64],
    sigma2s: &[f64],
) -> Result<IdiosyncraticRisk, FactorError> {
    if weights.len() != sigma2s.len() {
        return Err(FactorError::DimensionMismatch(format!(
            "{} weights vs {} variances",
            weights.len(),
            sigma2s.len()
        )));
    }
    if weights.is_empty() {
        return Err(FactorError::InvalidInput("empty portfolio".into()));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(FactorError::InvalidInput("negative or non-finite weight".into()));
    }
    if sigma2s.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(FactorError::InvalidInput(
            "negative or non-finite variance".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(FactorError::WeightSum { sum });
    }
    let exact = weights
        .iter()
        .zip(sigma2s)
        .map(|(w, s)| w * w * s)
        .sum::<f64>();
    let max_s = sigma2s.iter().cloned().fold(0.0_f64, f64::max);
    let max_w = weights.iter().cloned().fold(0.0_f64, f64::max);
    Ok(IdiosyncraticRisk {
        exact,
        bound: max_s * max_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_market(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn capm_design_has_two_columns() {
        let design = FactorDesign::build(&random_market(20, 1), &[]).unwrap();
        assert_eq!(design.dim(), 2);
        assert_eq!(design.k(), 1);
        assert!(design.x().column(0).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn three_factor_design_has_four_columns() {
        let n = 30;
        let smb = random_market(n, 2);
        let hml = random_market(n, 3);
        let design = FactorDesign::build(&random_market(n, 1), &[smb, hml]).unwrap();
        assert_eq!(design.dim(), 4);
        assert_eq!(design.k(), 3);
    }

    #[test]
    fn constant_market_is_rank_deficient() {
        let err = FactorDesign::build(&[0.01; 25], &[]).unwrap_err();
        assert!(matches!(err, FactorError::RankDeficient { .. }));
    }

    #[test]
    fn too_few_rows_rejected() {
        let err = FactorDesign::build(&random_market(2, 4), &[]).unwrap_err();
        assert!(matches!(err, FactorError::RankDeficient { .. }));
    }

    #[test]
    fn sigma_x_is_spd_on_accepted_designs() {
        for seed in 0..20 {
            let design = FactorDesign::build(&random_market(25, seed), &[]).unwrap();
            let s = design.sigma_x();
            assert_relative_eq!(s[(0, 1)], s[(1, 0)], max_relative = 1e-12);
            let eig = s.clone().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e > 0.0));
        }
    }

    #[test]
    fn ols_interpolates_null_asset() {
        let design = FactorDesign::build(&random_market(20, 5), &[]).unwrap();
        let mu0 = design.null_point();
        let r = design.x() * mu0.as_vector();
        let est = ols_estimate(&design, &r).unwrap();
        assert_relative_eq!(est.theta_hat[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(est.theta_hat[1], 1.0, epsilon = 1e-10);
        assert!(est.rss < 1e-18);
    }

    #[test]
    fn ols_recovers_exact_linear_returns() {
        let design = FactorDesign::build(&random_market(20, 6), &[]).unwrap();
        let theta = DVector::from_vec(vec![0.02, 1.3]);
        let r = design.x() * &theta;
        let est = ols_estimate(&design, &r).unwrap();
        assert_relative_eq!(est.theta_hat[0], 0.02, epsilon = 1e-10);
        assert_relative_eq!(est.theta_hat[1], 1.3, epsilon = 1e-10);
        assert!(est.rss < 1e-18);
    }

    #[test]
    fn ols_matches_explicit_normal_equations() {
        // Independent oracle: explicit matrix inverse of the normal equations.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let design = FactorDesign::build(&random_market(40, 8), &[random_market(40, 9)]).unwrap();
        let r = DVector::from_fn(40, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.05);
        let est = ols_estimate(&design, &r).unwrap();

        let inv = design
            .sigma_x()
            .clone()
            .try_inverse()
            .expect("oracle inverse");
        let oracle = inv * design.x().transpose() * &r;
        assert!((est.theta_hat - oracle).amax() < 1e-10);
    }

    #[test]
    fn sigma2_hat_uses_residual_df() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let design = FactorDesign::build(&random_market(20, 12), &[]).unwrap();
        let r = DVector::from_fn(20, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.1);
        let est = ols_estimate(&design, &r).unwrap();
        assert_relative_eq!(est.sigma2_hat, est.rss / 18.0, max_relative = 1e-14);
    }

    #[test]
    fn idio_equal_weights_hit_the_bound() {
        let p = 100;
        let w = vec![1.0 / p as f64; p];
        let s = vec![0.01; p];
        let risk = idiosyncratic_bound(&w, &s).unwrap();
        assert_relative_eq!(risk.exact, 1e-4, max_relative = 1e-12);
        assert_relative_eq!(risk.bound, 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn idio_single_asset_degenerate() {
        let risk = idiosyncratic_bound(&[1.0], &[0.04]).unwrap();
        assert_relative_eq!(risk.exact, 0.04, max_relative = 1e-12);
        assert_relative_eq!(risk.bound, 0.04, max_relative = 1e-12);
    }

    #[test]
    fn idio_bound_dominates_random_portfolios() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let p = rng.gen_range(2..50);
            let raw: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let s: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..0.1)).collect();
            let risk = idiosyncratic_bound(&w, &s).unwrap();
            assert!(risk.exact <= risk.bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn idio_weight_sum_enforced() {
        let err = idiosyncratic_bound(&[0.5, 0.4], &[0.01, 0.01]).unwrap_err();
        assert!(matches!(err, FactorError::WeightSum { .. }));
    }

    #[test]
    fn idio_vanishes_as_weights_spread() {
        let mut last = f64::INFINITY;
        for p in [10usize, 100, 1000] {
            let w = vec![1.0 / p as f64; p];
            let s = vec![0.02; p];
            let risk = idiosyncratic_bound(&w, &s).unwrap();
            assert_relative_eq!(risk.exact, 0.02 / p as f64, max_relative = 1e-12);
            assert!(risk.exact < last);
            last = risk.exact;
        }
    }
}
