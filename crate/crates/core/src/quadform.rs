//! Distributions of weighted sums of independent χ²₁ variables.
//!
//! The test statistics of the oracle test are quadratic forms in standard
//! normals, so their null and alternative laws are Σⱼ λⱼ χ²₁ with positive
//! weights. The CDF is evaluated by numerical inversion of the
//! characteristic function (an Imhof-type oscillatory integral) with an
//! analytic truncation bound; a seeded Monte Carlo estimator serves as an
//! independent oracle.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Weights below this are numerically zero eigenvalues and are dropped to
/// keep the integrand well conditioned.
const WEIGHT_FLOOR: f64 = 1e-12;

/// Absolute accuracy target for [`qf_cdf`].
const CDF_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum QuadFormError {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    /// The quadrature did not converge to tolerance; extreme weight ratios
    /// are the usual cause. Callers may fall back to [`qf_cdf_mc`].
    #[error("characteristic-function inversion failed: {0}")]
    IntegrationFailure(String),

    /// An eigenweight fell outside (0,1) beyond tolerance, which signals
    /// inconsistent inputs: Λ_n = Λ₀ + Σ_X/σ² forces every eigenvalue of
    /// Λ_n⁻¹ Σ_X/σ² into (0,1).
    #[error("eigenweight {value} outside (0,1) beyond tolerance")]
    NumericalRange { value: f64 },

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),
}

/// The law of Σⱼ λⱼ χ²₁ with independent χ²₁ terms and λⱼ > 0.
#[derive(Debug, Clone)]
pub struct WeightedChiSquare {
    weights: Vec<f64>,
}

impl WeightedChiSquare {
    /// Builds the distribution, dropping weights below 1e-12.
    pub fn new(weights: impl IntoIterator<Item = f64>) -> Result<Self, QuadFormError> {
        let kept: Vec<f64> = weights
            .into_iter()
            .map(|w| {
                if !w.is_finite() || w < 0.0 {
                    Err(QuadFormError::InvalidWeights(format!(
                        "weight {w} is negative or non-finite"
                    )))
                } else {
                    Ok(w)
                }
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|w| *w >= WEIGHT_FLOOR)
            .collect();
        if kept.is_empty() {
            return Err(QuadFormError::InvalidWeights(
                "no weights above the 1e-12 floor".into(),
            ));
        }
        Ok(Self { weights: kept })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// P(Σ λⱼ χ²ⱼ ≤ c2) by inversion of the characteristic function, absolute
/// accuracy 1e-6. Values of `c2` at or below zero return 0 (the support is
/// positive), so thresholds from dense regimes behave as always-reject.
pub fn qf_cdf(dist: &WeightedChiSquare, c2: f64) -> Result<f64, QuadFormError> {
    if !c2.is_finite() {
        return Ok(if c2 > 0.0 { 1.0 } else { 0.0 });
    }
    if c2 <= 0.0 {
        return Ok(0.0);
    }
    let lambda = &dist.weights;
    // Far tails are resolved by Chernoff bounds: when the survival (resp.
    // CDF) is provably below a tenth of the tolerance, skip the quadrature,
    // whose oscillation count grows with c2.
    const LOG_NEGLIGIBLE: f64 = -16.2; // ln(1e-7)
    if chernoff_log_survival(lambda, c2) < LOG_NEGLIGIBLE {
        return Ok(1.0);
    }
    if chernoff_log_cdf(lambda, c2) < LOG_NEGLIGIBLE {
        return Ok(0.0);
    }
    let sum_lambda: f64 = lambda.iter().sum();
    let m = lambda.len() as f64;
    let log_sqrt_prod: f64 = 0.5 * lambda.iter().map(|l| l.ln()).sum::<f64>();

    let theta = |u: f64| 0.5 * lambda.iter().map(|l| (l * u).atan()).sum::<f64>() - 0.5 * c2 * u;
    // ρ(u) = Π (1 + λ²u²)^{1/4}, evaluated in log space.
    let log_rho = |u: f64| 0.25 * lambda.iter().map(|l| (l * l * u * u).ln_1p()).sum::<f64>();
    let integrand = |u: f64| {
        if u < 1e-300 {
            // limit of sin θ(u)/(u ρ(u)) as u → 0
            0.5 * (sum_lambda - c2)
        } else {
            theta(u).sin() / u * (-log_rho(u)).exp()
        }
    };

    // Truncation point: u beyond which the analytic tail bound is under
    // tolerance. Two bounds apply — the absolute bound from ρ(u) ≥
    // u^{m/2}·√Πλ, and an integration-by-parts bound that exploits the
    // asymptotic oscillation at frequency c2/2.
    let tail_tol = 0.25 * CDF_TOL;
    let tail_bound = |u: f64| {
        let abs_bound = (2.0 / m) * (-0.5 * m * u.ln() - log_sqrt_prod).exp();
        let slope: f64 = lambda.iter().map(|l| l / (1.0 + l * l * u * u)).sum();
        let osc_bound = if slope <= 0.5 * c2 {
            let g = (-u.ln() - log_rho(u)).exp();
            8.0 * g / c2
        } else {
            f64::INFINITY
        };
        abs_bound.min(osc_bound) / std::f64::consts::PI
    };
    let mut upper = 1.0 / (sum_lambda + c2);
    let mut found = false;
    for _ in 0..500 {
        if tail_bound(upper) < tail_tol {
            found = true;
            break;
        }
        upper *= 2.0;
    }
    if !found {
        return Err(QuadFormError::IntegrationFailure(format!(
            "no truncation point below tolerance for m={} weights",
            lambda.len()
        )));
    }

    // Initial panels no wider than half an oscillation so adaptive Simpson
    // cannot be fooled by periodicity.
    let freq = 0.5 * (sum_lambda + c2);
    let n_panels = ((upper * freq / std::f64::consts::PI).ceil() as usize).clamp(4, 400_000);
    if n_panels == 400_000 {
        return Err(QuadFormError::IntegrationFailure(
            "oscillation count exceeds panel budget".into(),
        ));
    }
    let quad_tol = 0.5 * CDF_TOL * std::f64::consts::PI; // integral-space tolerance
    let panel_tol = quad_tol / n_panels as f64;
    let mut total = 0.0;
    let mut evals: usize = 0;
    let h = upper / n_panels as f64;
    for i in 0..n_panels {
        let a = i as f64 * h;
        let b = a + h;
        total += adaptive_simpson(&integrand, a, b, panel_tol, 40, &mut evals)?;
    }

    let cdf = 0.5 - total / std::f64::consts::PI;
    Ok(cdf.clamp(0.0, 1.0))
}

/// ln P(Σλχ² > c2) upper bound: min over t < 1/(2λ_max) of
/// −t·c2 − ½Σln(1−2tλ).
fn chernoff_log_survival(lambda: &[f64], c2: f64) -> f64 {
    let lmax = lambda.iter().cloned().fold(0.0_f64, f64::max);
    let mut best = f64::INFINITY;
    for frac in [0.5, 0.9, 0.99, 0.999, 0.9999] {
        let t = frac / (2.0 * lmax);
        let log_mgf: f64 = lambda.iter().map(|l| -0.5 * (-2.0 * t * l).ln_1p()).sum();
        best = best.min(-t * c2 + log_mgf);
    }
    best
}

/// ln P(Σλχ² ≤ c2) upper bound: min over t > 0 of t·c2 − ½Σln(1+2tλ).
fn chernoff_log_cdf(lambda: &[f64], c2: f64) -> f64 {
    let lmax = lambda.iter().cloned().fold(0.0_f64, f64::max);
    let mut best = f64::INFINITY;
    for j in 0..20 {
        let t = 10f64.powi(j) / (2.0 * lmax);
        let log_mgf: f64 = lambda.iter().map(|l| -0.5 * (2.0 * t * l).ln_1p()).sum();
        best = best.min(t * c2 + log_mgf);
    }
    best
}

fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    depth: usize,
    evals: &mut usize,
) -> Result<f64, QuadFormError> {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    *evals += 3;
    simpson_step(f, a, b, fa, fm, fb, simpson(a, b, fa, fm, fb), tol, depth, evals)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
    evals: &mut usize,
) -> Result<f64, QuadFormError> {
    if *evals > 20_000_000 {
        return Err(QuadFormError::IntegrationFailure(
            "evaluation budget exhausted".into(),
        ));
    }
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    *evals += 2;
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let err = left + right - whole;
    if err.abs() <= 15.0 * tol || depth == 0 {
        return Ok(left + right + err / 15.0);
    }
    let l = simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, evals)?;
    let r = simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, evals)?;
    Ok(l + r)
}

/// Empirical CDF from `draws` simulated Σ λⱼ Zⱼ² with Zⱼ iid standard
/// normal. Deterministic given `seed`; the independent oracle for
/// [`qf_cdf`].
pub fn qf_cdf_mc(dist: &WeightedChiSquare, c2: f64, draws: usize, seed: u64) -> f64 {
    assert!(draws >= 1, "need at least one draw");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut below = 0usize;
    for _ in 0..draws {
        let s: f64 = dist
            .weights
            .iter()
            .map(|l| {
                let z: f64 = rng.sample(StandardNormal);
                l * z * z
            })
            .sum();
        if s <= c2 {
            below += 1;
        }
    }
    below as f64 / draws as f64
}

/// The k+1 eigenweights λⱼ of Q = (X/σ) Λ_n⁻¹ (X/σ)ᵀ together with their
/// complements 1−λⱼ.
///
/// Both ends are computed from their own symmetric eigenproblems so that
/// values very close to 0 or 1 keep full relative accuracy: λⱼ from
/// L⁻¹(Σ_X/σ²)L⁻ᵀ and 1−λⱼ from L⁻¹(Λ_n − Σ_X/σ²)L⁻ᵀ, where Λ_n = LLᵀ.
/// `lambdas` is sorted descending and `complements[i]` pairs with
/// `lambdas[i]`.
#[derive(Debug, Clone)]
pub struct EigenWeights {
    lambdas: Vec<f64>,
    complements: Vec<f64>,
}

impl EigenWeights {
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// 1−λⱼ, paired with `lambdas`.
    pub fn complements(&self) -> &[f64] {
        &self.complements
    }

    /// log Π(1−λⱼ) = log det(I−Q) = log det(Λ₀) − log det(Λ_n).
    pub fn log_det_complement(&self) -> f64 {
        self.complements.iter().map(|v| v.ln()).sum()
    }

    /// √Π(1−λⱼ), the contraction factor of the asymptotic theory.
    pub fn sqrt_prod_complement(&self) -> f64 {
        (0.5 * self.log_det_complement()).exp()
    }

    /// Null law of the posterior statistic: Σ λⱼ χ²₁.
    pub fn null_dist(&self) -> Result<WeightedChiSquare, QuadFormError> {
        WeightedChiSquare::new(self.lambdas.iter().copied())
    }

    /// Alternative law: Σ (λⱼ/(1−λⱼ)) χ²₁.
    pub fn alt_dist(&self) -> Result<WeightedChiSquare, QuadFormError> {
        WeightedChiSquare::new(
            self.lambdas
                .iter()
                .zip(&self.complements)
                .map(|(l, c)| l / c),
        )
    }
}

/// Computes the eigenweights from the (k+1)×(k+1) similarity
/// Λ_n⁻¹ Σ_X/σ², which shares the nonzero spectrum of the n×n matrix Q.
pub fn eigen_weights(
    lambda_n: &DMatrix<f64>,
    sigma_x: &DMatrix<f64>,
    sigma2: f64,
) -> Result<EigenWeights, QuadFormError> {
    let dim = lambda_n.nrows();
    if lambda_n.ncols() != dim || sigma_x.shape() != (dim, dim) {
        return Err(QuadFormError::NotPositiveDefinite(
            "shape mismatch between Λ_n and Σ_X".into(),
        ));
    }
    if !(sigma2 > 0.0) {
        return Err(QuadFormError::InvalidWeights(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    let chol = nalgebra::Cholesky::new(lambda_n.clone())
        .ok_or_else(|| QuadFormError::NotPositiveDefinite("Λ_n".into()))?;
    let g = sigma_x / sigma2;
    let prior = lambda_n - &g; // implied Λ₀

    let mut lambdas = congruent_eigenvalues(&chol, &g);
    lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut complements = congruent_eigenvalues(&chol, &prior);
    complements.sort_by(|a, b| a.partial_cmp(b).unwrap());
    build_eigen_weights(lambdas, complements)
}

fn build_eigen_weights(
    lambdas: Vec<f64>,
    complements: Vec<f64>,
) -> Result<EigenWeights, QuadFormError> {
    const TOL: f64 = 1e-10;
    for v in lambdas.iter().chain(&complements) {
        if !v.is_finite() || *v < -TOL || *v > 1.0 + TOL {
            return Err(QuadFormError::NumericalRange { value: *v });
        }
    }
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    Ok(EigenWeights {
        lambdas: lambdas.into_iter().map(clamp).collect(),
        complements: complements.into_iter().map(clamp).collect(),
    })
}

/// Eigenvalues of L⁻¹ A L⁻ᵀ for symmetric A, where `chol` factors LLᵀ.
fn congruent_eigenvalues(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, a: &DMatrix<f64>) -> Vec<f64> {
    let l = chol.l();
    let y = l.solve_lower_triangular(a).expect("L invertible");
    let b = l
        .solve_lower_triangular(&y.transpose())
        .expect("L invertible");
    let sym = 0.5 * (&b + b.transpose());
    sym.symmetric_eigen().eigenvalues.iter().copied().collect()
}

/// Eigenweights from an explicit prior precision, forming Λ_n = Λ₀ + Σ_X/σ²
/// internally. Unlike [`eigen_weights`], the complements come from Λ₀
/// directly instead of the subtraction Λ_n − Σ_X/σ², so they stay accurate
/// even when the likelihood term dwarfs the prior beyond float resolution.
pub fn eigen_weights_from_prior(
    lambda0: &DMatrix<f64>,
    sigma_x: &DMatrix<f64>,
    sigma2: f64,
) -> Result<EigenWeights, QuadFormError> {
    if !(sigma2 > 0.0) {
        return Err(QuadFormError::InvalidWeights(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    let g = sigma_x / sigma2;
    let lambda_n = lambda0 + &g;
    let chol = nalgebra::Cholesky::new(lambda_n)
        .ok_or_else(|| QuadFormError::NotPositiveDefinite("Λ_n".into()))?;
    let mut lambdas = congruent_eigenvalues(&chol, &g);
    lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut complements = congruent_eigenvalues(&chol, lambda0);
    complements.sort_by(|a, b| a.partial_cmp(b).unwrap());
    build_eigen_weights(lambdas, complements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn wcs(w: &[f64]) -> WeightedChiSquare {
        WeightedChiSquare::new(w.iter().copied()).unwrap()
    }

    #[test]
    fn chi2_two_df_closed_form() {
        // Σ of two unit weights is χ²₂, i.e. Exp(1/2).
        let cdf = qf_cdf(&wcs(&[1.0, 1.0]), 2.0).unwrap();
        assert_relative_eq!(cdf, 1.0 - (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn chi2_one_df_95th_percentile() {
        let cdf = qf_cdf(&wcs(&[1.0]), 3.841459).unwrap();
        assert_relative_eq!(cdf, 0.95, epsilon = 1e-5);
    }

    #[test]
    fn matches_monte_carlo_oracle() {
        let dist = wcs(&[0.3, 0.7]);
        let exact = qf_cdf(&dist, 1.5).unwrap();
        let mc = qf_cdf_mc(&dist, 1.5, 10_000_000, 99);
        assert!((exact - mc).abs() < 1e-3, "exact={exact} mc={mc}");
    }

    #[test]
    fn mc_hits_known_chi2_value() {
        let mc = qf_cdf_mc(&wcs(&[1.0, 1.0]), 2.0, 1_000_000, 3);
        assert!((mc - 0.6321).abs() < 0.002, "mc={mc}");
    }

    #[test]
    fn zero_threshold_is_zero() {
        assert_eq!(qf_cdf(&wcs(&[0.5, 2.0]), 0.0).unwrap(), 0.0);
        assert_eq!(qf_cdf_mc(&wcs(&[0.5, 2.0]), 0.0, 1000, 1), 0.0);
    }

    #[test]
    fn saturates_at_large_threshold() {
        let w = [0.2, 1.0, 3.0];
        let sum: f64 = w.iter().sum();
        let cdf = qf_cdf(&wcs(&w), 1e6 * sum).unwrap();
        assert!(cdf > 1.0 - 1e-9);
    }

    #[test]
    fn nondecreasing_in_threshold() {
        let dist = wcs(&[0.4, 1.3, 2.2]);
        let mut last = 0.0;
        for i in 0..40 {
            let c2 = 0.25 * i as f64;
            let cdf = qf_cdf(&dist, c2).unwrap();
            assert!(cdf + 1e-9 >= last, "c2={c2} cdf={cdf} last={last}");
            last = cdf;
        }
    }

    #[test]
    fn mc_deterministic_given_seed() {
        let dist = wcs(&[0.9, 1.1]);
        let a = qf_cdf_mc(&dist, 2.0, 100_000, 7);
        let b = qf_cdf_mc(&dist, 2.0, 100_000, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn extreme_weight_ratio_still_converges() {
        let dist = wcs(&[1e-6, 1.0]);
        let cdf = qf_cdf(&dist, 3.0).unwrap();
        // dominated by the unit weight: close to χ²₁ CDF at 3
        let chi1 = qf_cdf(&wcs(&[1.0]), 3.0).unwrap();
        assert!((cdf - chi1).abs() < 1e-3);
    }

    #[test]
    fn huge_weights_scale_invariance() {
        // P(κΣλχ² ≤ κc) is invariant in κ
        let base = qf_cdf(&wcs(&[1.0, 1.0]), 2.0).unwrap();
        let scaled = qf_cdf(&wcs(&[512.5, 512.5]), 2.0 * 512.5).unwrap();
        assert_relative_eq!(base, scaled, epsilon = 5e-6);
    }

    #[test]
    fn rejects_empty_and_negative_weights() {
        assert!(WeightedChiSquare::new([1e-15]).is_err());
        assert!(WeightedChiSquare::new([-0.1, 1.0]).is_err());
        assert!(WeightedChiSquare::new([]).is_err());
    }

    fn reference_lambda0() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.3, 0.7])
    }

    #[test]
    fn strong_prior_drives_weights_to_zero() {
        let sigma_x = DMatrix::from_row_slice(2, 2, &[20.0, 0.0, 0.0, 20.0]);
        let lambda0 = 1e8 * DMatrix::identity(2, 2);
        let ew = eigen_weights_from_prior(&lambda0, &sigma_x, 0.01).unwrap();
        assert!(ew.lambdas().iter().all(|&l| l < 1e-3));
    }

    #[test]
    fn strong_likelihood_drives_weights_to_one() {
        let sigma_x = DMatrix::from_row_slice(2, 2, &[20.0, 0.0, 0.0, 20.0]);
        let ew = eigen_weights_from_prior(&reference_lambda0(), &sigma_x, 1e-8).unwrap();
        assert!(ew.lambdas().iter().all(|&l| l > 1.0 - 1e-6));
        // complements carry the accurate small values
        assert!(ew.complements().iter().all(|&c| c > 0.0 && c < 1e-6));
    }

    #[test]
    fn matches_dense_eigendecomposition_oracle() {
        // Brute force: eigenvalues of the full n×n Q at n=20, Σ_X = 20·I.
        let n = 20;
        let raw = DMatrix::<f64>::from_fn(n, 2, |i, j| ((i * 7 + j * 13 + 1) as f64).sin());
        let qr = raw.qr();
        let q_cols = qr.q(); // orthonormal n×2
        let x = q_cols * 20.0_f64.sqrt();
        let sigma_x = x.transpose() * &x;
        let sigma2 = 0.01;
        let lambda0 = reference_lambda0();
        let lambda_n = &lambda0 + &sigma_x / sigma2;

        let ew = eigen_weights(&lambda_n, &sigma_x, sigma2).unwrap();

        let lam_n_inv = lambda_n.try_inverse().unwrap();
        let qmat = (&x / sigma2.sqrt()) * lam_n_inv * (x.transpose() / sigma2.sqrt());
        let mut dense: Vec<f64> = qmat.symmetric_eigen().eigenvalues.iter().copied().collect();
        dense.sort_by(|a, b| b.partial_cmp(a).unwrap());

        for (got, want) in ew.lambdas().iter().zip(dense.iter().take(2)) {
            assert_relative_eq!(got, want, epsilon = 1e-8);
        }
        // remaining dense eigenvalues are numerically zero
        assert!(dense[2..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn determinant_identity() {
        // Π(1−λⱼ) = det(Λ₀)/det(Λ_n)
        let sigma_x = DMatrix::from_row_slice(2, 2, &[20.0, 2.0, 2.0, 18.0]);
        let lambda0 = reference_lambda0();
        let sigma2 = 0.04;
        let lambda_n = &lambda0 + &sigma_x / sigma2;
        let ew = eigen_weights(&lambda_n, &sigma_x, sigma2).unwrap();
        let prod: f64 = ew.complements().iter().product();
        let want = lambda0.determinant() / lambda_n.determinant();
        assert_relative_eq!(prod, want, max_relative = 1e-8);
    }

    #[test]
    fn inconsistent_inputs_flagged() {
        // Λ_n smaller than Σ_X/σ² cannot arise from any PD prior.
        let sigma_x = DMatrix::from_row_slice(2, 2, &[20.0, 0.0, 0.0, 20.0]);
        let lambda_n = DMatrix::from_row_slice(2, 2, &[10.0, 0.0, 0.0, 10.0]);
        let err = eigen_weights(&lambda_n, &sigma_x, 1.0).unwrap_err();
        assert!(matches!(err, QuadFormError::NumericalRange { .. }));
    }
}
