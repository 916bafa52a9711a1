//! Hierarchical-Bayes k-factor model with a half-Cauchy global shrinkage
//! scale.
//!
//! Model: rᵢ ~ N(Xθᵢ, σᵢ²I), θᵢ | Λ, τ², θ₀ ~ N(θ₀, τ²Λ⁻¹),
//! σᵢ² ~ InvGamma(ν₀/2, ν₀/2), Λ ~ Wishart((ρR)⁻¹, ρ),
//! θ₀ ~ N(μ₀, C), τ ~ C⁺(0,1). All blocks except τ are conjugate and
//! sampled exactly; τ gets a random-walk Metropolis-Hastings update on
//! log τ whose proposal scale is tuned during burn-in and frozen after.
//! Chains are deterministic given a seed.

use crate::factor::{ols_estimate, FactorDesign, FactorError, NullPoint, ReturnsPanel};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HbError {
    #[error(transparent)]
    Factor(#[from] FactorError),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("conditional precision not positive definite in {0}")]
    RankDeficient(&'static str),

    #[error("chain aborted at iteration {iteration}: {detail}")]
    ChainStep { iteration: usize, detail: String },

    #[error("need at least 100 retained draws for selection, got {0}")]
    InsufficientDraws(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Hyperparameters of the hierarchical model.
#[derive(Debug, Clone)]
pub struct HbPrior {
    /// Inverse-gamma seed ν₀ (shape and scale are both ν₀/2).
    pub nu0: f64,
    /// Wishart degrees of freedom ρ ≥ k+1.
    pub rho: f64,
    /// Wishart prior scale matrix R.
    pub r_scale: DMatrix<f64>,
    /// Prior covariance C of θ₀.
    pub c_cov: DMatrix<f64>,
    pub mu0: NullPoint,
}

impl HbPrior {
    /// Defaults: ν₀ = 1, ρ = k+3, R = I, C = 100·I.
    pub fn defaults(dim: usize) -> Self {
        Self {
            nu0: 1.0,
            rho: (dim + 2) as f64,
            r_scale: DMatrix::identity(dim, dim),
            c_cov: 100.0 * DMatrix::identity(dim, dim),
            mu0: NullPoint::for_dim(dim),
        }
    }

    pub fn validate(&self) -> Result<(), HbError> {
        let dim = self.mu0.dim();
        if self.r_scale.shape() != (dim, dim) || self.c_cov.shape() != (dim, dim) {
            return Err(HbError::InvalidPrior("R and C must be (k+1)×(k+1)".into()));
        }
        if self.nu0 <= 0.0 {
            return Err(HbError::InvalidPrior("ν₀ must be positive".into()));
        }
        if self.rho < dim as f64 {
            return Err(HbError::InvalidPrior(format!(
                "Wishart df ρ={} below dimension {}",
                self.rho, dim
            )));
        }
        if Cholesky::new(self.r_scale.clone()).is_none() || Cholesky::new(self.c_cov.clone()).is_none()
        {
            return Err(HbError::InvalidPrior("R and C must be positive definite".into()));
        }
        Ok(())
    }
}

/// Full parameter state of the sampler.
#[derive(Debug, Clone)]
pub struct HbState {
    /// θᵢ per asset.
    pub thetas: Vec<DVector<f64>>,
    /// σᵢ² per asset, all positive.
    pub sigma2s: Vec<f64>,
    /// Shared precision shape Λ, positive definite.
    pub lambda: DMatrix<f64>,
    /// Hyper-mean θ₀.
    pub theta0: DVector<f64>,
    /// Global shrinkage τ² > 0.
    pub tau2: f64,
}

/// Retained post-burn-in states.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub states: Vec<HbState>,
    pub stride: usize,
    pub seed: u64,
    /// MH acceptance rate for τ over the post-burn-in phase.
    pub tau_acceptance: f64,
    /// Frozen proposal scale used after burn-in.
    pub proposal_scale: f64,
}

/// Draw from N(mean, P⁻¹) given precision P and rhs b with mean = P⁻¹b.
fn sample_mvn_precision<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    rhs: &DVector<f64>,
    rng: &mut R,
    what: &'static str,
) -> Result<DVector<f64>, HbError> {
    let chol = Cholesky::new(precision.clone()).ok_or(HbError::RankDeficient(what))?;
    let mean = chol.solve(rhs);
    let z = DVector::from_fn(rhs.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    // x = mean + L⁻ᵀ z has covariance (LLᵀ)⁻¹
    let l = chol.l();
    let shift = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(HbError::RankDeficient(what))?;
    Ok(mean + shift)
}

fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    // X ~ Gamma(shape, rate=scale) sampled as Gamma(shape, scale=1/scale);
    // 1/X ~ InvGamma(shape, scale).
    let g = Gamma::new(shape, 1.0 / scale).expect("valid gamma parameters");
    let draw: f64 = g.sample(rng).max(f64::MIN_POSITIVE);
    1.0 / draw
}

/// Bartlett sampler: W ~ Wishart(scale, df) where `scale_factor` is any C
/// with CCᵀ = scale.
fn sample_wishart_with_factor<R: Rng + ?Sized>(
    scale_factor: &DMatrix<f64>,
    df: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let dim = scale_factor.nrows();
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let chi2 = Gamma::new(0.5 * (df - i as f64), 2.0).expect("df above dimension");
        a[(i, i)] = chi2.sample(rng).max(f64::MIN_POSITIVE).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let ca = scale_factor * a;
    &ca * ca.transpose()
}

/// Conditional draw of θᵢ: N(mᵢ, Dᵢ) with Dᵢ = [Σ_X/σᵢ² + Λ/τ²]⁻¹ and
/// mᵢ = Dᵢ(Xᵀrᵢ/σᵢ² + (Λ/τ²)θ₀).
pub fn gibbs_theta_i<R: Rng + ?Sized>(
    state: &HbState,
    design: &FactorDesign,
    r_i: &DVector<f64>,
    i: usize,
    rng: &mut R,
) -> Result<DVector<f64>, HbError> {
    let xtr = design.x().transpose() * r_i;
    draw_theta(
        design.sigma_x(),
        &xtr,
        state.sigma2s[i],
        &state.lambda,
        state.tau2,
        &state.theta0,
        rng,
    )
}

fn draw_theta<R: Rng + ?Sized>(
    sigma_x: &DMatrix<f64>,
    xtr: &DVector<f64>,
    sigma2: f64,
    lambda: &DMatrix<f64>,
    tau2: f64,
    theta0: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, HbError> {
    let shrink = lambda / tau2;
    let precision = sigma_x / sigma2 + &shrink;
    let rhs = xtr / sigma2 + shrink * theta0;
    sample_mvn_precision(&precision, &rhs, rng, "theta_i")
}

/// Conditional draw of σᵢ²: InvGamma((ν₀+nᵢ)/2, (ν₀ + ‖rᵢ−Xθᵢ‖²)/2).
pub fn gibbs_sigma2_i<R: Rng + ?Sized>(
    state: &HbState,
    prior: &HbPrior,
    design: &FactorDesign,
    r_i: &DVector<f64>,
    i: usize,
    rng: &mut R,
) -> f64 {
    let resid = r_i - design.x() * &state.thetas[i];
    draw_sigma2(prior.nu0, r_i.len(), resid.norm_squared(), rng)
}

fn draw_sigma2<R: Rng + ?Sized>(nu0: f64, n: usize, rss: f64, rng: &mut R) -> f64 {
    sample_inv_gamma(0.5 * (nu0 + n as f64), 0.5 * (nu0 + rss), rng)
}

/// Conditional draw of Λ: Wishart((Σ(θᵢ−θ₀)(θᵢ−θ₀)ᵀ/τ² + ρR)⁻¹, P+ρ).
pub fn gibbs_lambda<R: Rng + ?Sized>(
    state: &HbState,
    prior: &HbPrior,
    rng: &mut R,
) -> Result<DMatrix<f64>, HbError> {
    let dim = state.theta0.len();
    let mut s = prior.rho * &prior.r_scale;
    for theta in &state.thetas {
        let d = theta - &state.theta0;
        s += &d * d.transpose() / state.tau2;
    }
    let chol = Cholesky::new(s).ok_or(HbError::RankDeficient("lambda scale"))?;
    // scale = S⁻¹ = M⁻ᵀM⁻¹ with S = MMᵀ, so C = M⁻ᵀ is a valid factor.
    let factor = chol
        .l()
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(dim, dim))
        .ok_or(HbError::RankDeficient("lambda scale"))?;
    let df = state.thetas.len() as f64 + prior.rho;
    Ok(sample_wishart_with_factor(&factor, df, rng))
}

/// Conditional draw of θ₀: N(V(PΛθ̄/τ² + C⁻¹μ₀), V), V = (PΛ/τ² + C⁻¹)⁻¹.
pub fn gibbs_theta0<R: Rng + ?Sized>(
    state: &HbState,
    prior: &HbPrior,
    rng: &mut R,
) -> Result<DVector<f64>, HbError> {
    let dim = state.theta0.len();
    let c_chol =
        Cholesky::new(prior.c_cov.clone()).ok_or(HbError::RankDeficient("theta0 prior"))?;
    let c_inv = c_chol.inverse();
    let p_count = state.thetas.len() as f64;
    let precision = p_count / state.tau2 * &state.lambda + &c_inv;
    let mut rhs = &c_inv * prior.mu0.as_vector();
    if !state.thetas.is_empty() {
        let mut theta_bar = DVector::zeros(dim);
        for theta in &state.thetas {
            theta_bar += theta;
        }
        theta_bar /= p_count;
        rhs += p_count / state.tau2 * &state.lambda * theta_bar;
    }
    sample_mvn_precision(&precision, &rhs, rng, "theta0")
}

/// Random-walk MH update of τ on the log scale with Jacobian correction.
/// Target ∝ half-Cauchy(τ) · Π N(θᵢ; θ₀, τ²Λ⁻¹). Returns the new τ² and
/// whether the proposal was accepted.
pub fn mh_tau<R: Rng + ?Sized>(
    state: &HbState,
    proposal_scale: f64,
    rng: &mut R,
) -> (f64, bool) {
    assert!(proposal_scale > 0.0, "proposal scale must be positive");
    let dim = state.theta0.len() as f64;
    let count = state.thetas.len() as f64;
    let ss: f64 = state
        .thetas
        .iter()
        .map(|t| {
            let d = t - &state.theta0;
            (d.transpose() * &state.lambda * &d)[(0, 0)]
        })
        .sum();
    // log target in log τ coordinates (half-Cauchy + Gaussian level + Jacobian)
    let log_target = |log_tau: f64| {
        let tau = log_tau.exp();
        -(tau * tau).ln_1p() - count * dim * log_tau - 0.5 * ss / (tau * tau) + log_tau
    };
    let current = 0.5 * state.tau2.ln();
    let proposed = current + proposal_scale * rng.sample::<f64, _>(StandardNormal);
    let log_ratio = log_target(proposed) - log_target(current);
    let u: f64 = rng.gen::<f64>();
    if u.ln() < log_ratio {
        ((2.0 * proposed).exp(), true)
    } else {
        (state.tau2, false)
    }
}

/// Chain settings. `iterations` counts total scans; states are retained
/// from `burn_in` on, every `stride`-th scan.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub stride: usize,
    pub seed: u64,
    /// Initial MH proposal scale on log τ; tuned toward ~0.4 acceptance
    /// during burn-in, then frozen.
    pub initial_proposal_scale: f64,
}

impl ChainConfig {
    pub fn new(iterations: usize, burn_in: usize, stride: usize, seed: u64) -> Self {
        Self {
            iterations,
            burn_in,
            stride,
            seed,
            initial_proposal_scale: 1.0,
        }
    }
}

/// Systematic-scan Gibbs sampler: θᵢ ∀i, σᵢ² ∀i, Λ, θ₀, MH-τ per scan.
pub fn run_chain(
    panel: &ReturnsPanel,
    design: &FactorDesign,
    prior: &HbPrior,
    cfg: &ChainConfig,
) -> Result<PosteriorDraws, HbError> {
    prior.validate()?;
    if cfg.iterations <= cfg.burn_in {
        return Err(HbError::InvalidInput(
            "iterations must exceed burn_in".into(),
        ));
    }
    if cfg.stride == 0 {
        return Err(HbError::InvalidInput("stride must be at least 1".into()));
    }
    if prior.mu0.dim() != design.dim() {
        return Err(HbError::InvalidPrior(format!(
            "prior dimension {} vs design dimension {}",
            prior.mu0.dim(),
            design.dim()
        )));
    }
    let p_count = panel.n_assets();
    let n = panel.n_days();
    if n != design.n() {
        return Err(HbError::InvalidInput(format!(
            "panel has {n} days, design has {}",
            design.n()
        )));
    }
    let dim = design.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Per-asset sufficient statistics are fixed across the chain.
    let mut xtrs = Vec::with_capacity(p_count);
    let mut rtrs = Vec::with_capacity(p_count);
    let mut state = HbState {
        thetas: Vec::with_capacity(p_count),
        sigma2s: Vec::with_capacity(p_count),
        lambda: Cholesky::new(prior.r_scale.clone())
            .ok_or(HbError::RankDeficient("R"))?
            .inverse(),
        theta0: prior.mu0.as_vector().clone(),
        tau2: 1.0,
    };
    for i in 0..p_count {
        let r_i = panel.asset_returns(i);
        let est = ols_estimate(design, &r_i)?;
        xtrs.push(design.x().transpose() * &r_i);
        rtrs.push(r_i.norm_squared());
        state.thetas.push(est.theta_hat);
        state.sigma2s.push(est.sigma2_hat.max(1e-12));
    }

    let mut states = Vec::new();
    let mut scale = cfg.initial_proposal_scale;
    let mut window_accepts = 0usize;
    let mut window_len = 0usize;
    let mut post_accepts = 0usize;
    let mut post_total = 0usize;

    for iter in 0..cfg.iterations {
        let step = |detail: HbError| HbError::ChainStep {
            iteration: iter,
            detail: detail.to_string(),
        };

        for i in 0..p_count {
            state.thetas[i] = draw_theta(
                design.sigma_x(),
                &xtrs[i],
                state.sigma2s[i],
                &state.lambda,
                state.tau2,
                &state.theta0,
                &mut rng,
            )
            .map_err(step)?;
        }
        for i in 0..p_count {
            // ‖r − Xθ‖² from cached sufficient statistics
            let th = &state.thetas[i];
            let rss = (rtrs[i] - 2.0 * th.dot(&xtrs[i])
                + (th.transpose() * design.sigma_x() * th)[(0, 0)])
            .max(0.0);
            state.sigma2s[i] = draw_sigma2(prior.nu0, n, rss, &mut rng);
        }
        state.lambda = gibbs_lambda(&state, prior, &mut rng).map_err(step)?;
        state.theta0 = gibbs_theta0(&state, prior, &mut rng).map_err(step)?;
        let (tau2, accepted) = mh_tau(&state, scale, &mut rng);
        state.tau2 = tau2;

        if iter < cfg.burn_in {
            window_accepts += usize::from(accepted);
            window_len += 1;
            if window_len == 50 {
                let rate = window_accepts as f64 / 50.0;
                scale = (scale * (rate - 0.4).exp()).clamp(1e-3, 10.0);
                window_accepts = 0;
                window_len = 0;
            }
        } else {
            post_accepts += usize::from(accepted);
            post_total += 1;
            if (iter - cfg.burn_in) % cfg.stride == 0 {
                states.push(state.clone());
            }
        }
        debug_assert!(state.tau2 > 0.0);
        debug_assert!(state.sigma2s.iter().all(|s| *s > 0.0));
        let _ = dim;
    }

    Ok(PosteriorDraws {
        states,
        stride: cfg.stride,
        seed: cfg.seed,
        tau_acceptance: if post_total > 0 {
            post_accepts as f64 / post_total as f64
        } else {
            0.0
        },
        proposal_scale: scale,
    })
}

/// Per-asset selection summary from a chain.
#[derive(Debug, Clone, Copy)]
pub struct SelectionScore {
    pub asset: usize,
    /// Posterior probability that the intercept is positive.
    pub prob_alpha_positive: f64,
    pub mean_alpha: f64,
}

/// Ranks assets by posterior P(α > 0), ties broken by posterior mean α
/// then asset index, and returns the top `p_tilde`.
pub fn hb_select(draws: &PosteriorDraws, p_tilde: usize) -> Result<Vec<SelectionScore>, HbError> {
    let retained = draws.states.len();
    if retained < 100 {
        return Err(HbError::InsufficientDraws(retained));
    }
    let p_count = draws.states[0].thetas.len();
    if p_tilde > p_count {
        return Err(HbError::InvalidInput(format!(
            "portfolio size {p_tilde} exceeds universe {p_count}"
        )));
    }
    let mut scores: Vec<SelectionScore> = (0..p_count)
        .map(|i| {
            let mut positive = 0usize;
            let mut sum = 0.0;
            for st in &draws.states {
                let a = st.thetas[i][0];
                positive += usize::from(a > 0.0);
                sum += a;
            }
            SelectionScore {
                asset: i,
                prob_alpha_positive: positive as f64 / retained as f64,
                mean_alpha: sum / retained as f64,
            }
        })
        .collect();
    scores.sort_by(|a, b| {
        b.prob_alpha_positive
            .partial_cmp(&a.prob_alpha_positive)
            .unwrap()
            .then(b.mean_alpha.partial_cmp(&a.mean_alpha).unwrap())
            .then(a.asset.cmp(&b.asset))
    });
    scores.truncate(p_tilde);
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use chrono::NaiveDate;
    use rand_distr::StandardNormal;

    fn random_design(n: usize, seed: u64) -> FactorDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let market: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        FactorDesign::build(&market, &[]).unwrap()
    }

    fn state_with(
        thetas: Vec<DVector<f64>>,
        sigma2s: Vec<f64>,
        lambda: DMatrix<f64>,
        theta0: DVector<f64>,
        tau2: f64,
    ) -> HbState {
        HbState {
            thetas,
            sigma2s,
            lambda,
            theta0,
            tau2,
        }
    }

    #[test]
    fn theta_total_shrinkage_limit() {
        // τ² → 0: the draw concentrates at θ₀.
        let design = random_design(30, 1);
        let theta0 = DVector::from_vec(vec![0.05, 1.2]);
        let state = state_with(
            vec![DVector::zeros(2)],
            vec![0.01],
            DMatrix::identity(2, 2),
            theta0.clone(),
            1e-10,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.1);
        let mut mean = DVector::zeros(2);
        for _ in 0..50 {
            mean += gibbs_theta_i(&state, &design, &r, 0, &mut rng).unwrap();
        }
        mean /= 50.0;
        assert!((mean - theta0).amax() < 1e-3);
    }

    #[test]
    fn theta_no_shrinkage_limit_recovers_ols() {
        // τ² → ∞: the conditional mean approaches the OLS estimate.
        let design = random_design(30, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.1);
        let est = ols_estimate(&design, &r).unwrap();
        let state = state_with(
            vec![DVector::zeros(2)],
            vec![0.01],
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![0.0, 1.0]),
            1e10,
        );
        let mut mean = DVector::zeros(2);
        let draws = 40_000;
        for _ in 0..draws {
            mean += gibbs_theta_i(&state, &design, &r, 0, &mut rng).unwrap();
        }
        mean /= draws as f64;
        // MC noise shrinks as 1/√draws; the systematic gap must be ≤ 1e-6,
        // so compare against the analytic conditional mean instead of the
        // noisy sample mean for the tight bound.
        let shrink = &state.lambda / state.tau2;
        let precision = design.sigma_x() / 0.01 + &shrink;
        let rhs = design.x().transpose() * &r / 0.01 + shrink * &state.theta0;
        let cond_mean = Cholesky::new(precision).unwrap().solve(&rhs);
        assert!((cond_mean.clone() - &est.theta_hat).amax() < 1e-6);
        assert!((mean - cond_mean).amax() < 5e-3);
    }

    #[test]
    fn theta_conditional_matches_analytic_moments() {
        let design = random_design(25, 5);
        let lambda = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.5]);
        let theta0 = DVector::from_vec(vec![0.1, 0.9]);
        let (sigma2, tau2) = (0.02, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = DVector::from_fn(25, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.15);
        let state = state_with(
            vec![DVector::zeros(2)],
            vec![sigma2],
            lambda.clone(),
            theta0.clone(),
            tau2,
        );

        let shrink = &lambda / tau2;
        let precision = design.sigma_x() / sigma2 + &shrink;
        let cov = precision.clone().try_inverse().unwrap();
        let rhs = design.x().transpose() * &r / sigma2 + shrink * &theta0;
        let analytic_mean = &cov * rhs;

        let draws = 100_000;
        let mut mean = DVector::zeros(2);
        let mut sq = DMatrix::zeros(2, 2);
        for _ in 0..draws {
            let t = gibbs_theta_i(&state, &design, &r, 0, &mut rng).unwrap();
            mean += &t;
            sq += &t * t.transpose();
        }
        mean /= draws as f64;
        let emp_cov = sq / draws as f64 - &mean * mean.transpose();
        for j in 0..2 {
            let se = (cov[(j, j)] / draws as f64).sqrt();
            assert!(
                (mean[j] - analytic_mean[j]).abs() < 3.0 * se,
                "coordinate {j}"
            );
            assert_relative_eq!(emp_cov[(j, j)], cov[(j, j)], max_relative = 0.05);
        }
    }

    #[test]
    fn sigma2_inverse_gamma_mean() {
        // ν₀ = 1, n = 2, zero residuals → InvGamma(1.5, 0.5), mean 1.0.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            sum += draw_sigma2(1.0, 2, 0.0, &mut rng);
        }
        let mean = sum / draws as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn sigma2_stochastically_increasing_in_residuals() {
        let mut medians = Vec::new();
        for (idx, rss) in [0.5, 5.0, 50.0].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(8 + idx as u64);
            let mut draws: Vec<f64> = (0..20_001).map(|_| draw_sigma2(1.0, 20, *rss, &mut rng)).collect();
            draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(draws[10_000]);
        }
        assert!(medians[0] < medians[1] && medians[1] < medians[2]);
    }

    #[test]
    fn sigma2_reproducible_given_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(draw_sigma2(1.0, 10, 0.3, &mut a), draw_sigma2(1.0, 10, 0.3, &mut b));
    }

    #[test]
    fn lambda_wishart_mean_at_degenerate_thetas() {
        // All θᵢ = θ₀ → scale (ρR)⁻¹, df P+ρ, mean (P+ρ)(ρR)⁻¹.
        let dim = 2;
        let prior = HbPrior::defaults(dim);
        let theta0 = DVector::from_vec(vec![0.0, 1.0]);
        let p_count = 5;
        let state = state_with(
            vec![theta0.clone(); p_count],
            vec![0.01; p_count],
            DMatrix::identity(dim, dim),
            theta0,
            0.7,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let draws = 100_000;
        let mut mean = DMatrix::zeros(dim, dim);
        for _ in 0..draws {
            mean += gibbs_lambda(&state, &prior, &mut rng).unwrap();
        }
        mean /= draws as f64;
        let want = (p_count as f64 + prior.rho)
            * (prior.rho * &prior.r_scale).try_inverse().unwrap();
        for i in 0..dim {
            for j in 0..dim {
                assert!(
                    (mean[(i, j)] - want[(i, j)]).abs() <= 0.02 * want.amax(),
                    "entry ({i},{j}): got {} want {}",
                    mean[(i, j)],
                    want[(i, j)]
                );
            }
        }
    }

    #[test]
    fn lambda_prior_recovery_with_no_assets() {
        let dim = 2;
        let prior = HbPrior::defaults(dim);
        let state = state_with(
            vec![],
            vec![],
            DMatrix::identity(dim, dim),
            DVector::from_vec(vec![0.0, 1.0]),
            1.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut mean = DMatrix::zeros(dim, dim);
        for _ in 0..draws {
            mean += gibbs_lambda(&state, &prior, &mut rng).unwrap();
        }
        mean /= draws as f64;
        // prior Wishart((ρR)⁻¹, ρ) has mean ρ(ρR)⁻¹ = R⁻¹
        let want = prior.r_scale.clone().try_inverse().unwrap();
        assert!((mean - want).amax() < 0.02);
    }

    #[test]
    fn lambda_draws_always_positive_definite() {
        let dim = 3;
        let mut prior = HbPrior::defaults(dim);
        prior.r_scale = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.2, 0.1, 0.2, 0.8, 0.05, 0.1, 0.05, 1.2],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let thetas: Vec<DVector<f64>> = (0..4)
            .map(|_| DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let state = state_with(
            thetas,
            vec![0.01; 4],
            DMatrix::identity(dim, dim),
            DVector::from_vec(vec![0.0, 1.0, 0.0]),
            0.3,
        );
        for _ in 0..10_000 {
            let w = gibbs_lambda(&state, &prior, &mut rng).unwrap();
            assert!(Cholesky::new(w).is_some());
        }
    }

    #[test]
    fn theta0_prior_recovery_with_no_assets() {
        let dim = 2;
        let prior = HbPrior::defaults(dim);
        let state = state_with(
            vec![],
            vec![],
            DMatrix::identity(dim, dim),
            DVector::zeros(dim),
            1.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let draws = 200_000;
        let mut mean = DVector::zeros(dim);
        let mut sq = DVector::zeros(dim);
        for _ in 0..draws {
            let t = gibbs_theta0(&state, &prior, &mut rng).unwrap();
            sq += t.component_mul(&t);
            mean += t;
        }
        mean /= draws as f64;
        sq /= draws as f64;
        let mu0 = prior.mu0.as_vector();
        for j in 0..dim {
            let var = sq[j] - mean[j] * mean[j];
            let se = (prior.c_cov[(j, j)] / draws as f64).sqrt();
            assert!((mean[j] - mu0[j]).abs() < 3.0 * se);
            // variance should match C's diagonal (100)
            assert_relative_eq!(var, prior.c_cov[(j, j)], max_relative = 0.05);
        }
    }

    #[test]
    fn theta0_flat_prior_tracks_theta_bar() {
        let dim = 2;
        let mut prior = HbPrior::defaults(dim);
        prior.c_cov = 1e8 * DMatrix::identity(dim, dim);
        let thetas = vec![
            DVector::from_vec(vec![0.1, 1.1]),
            DVector::from_vec(vec![-0.3, 0.9]),
            DVector::from_vec(vec![0.2, 1.0]),
        ];
        let mut bar = DVector::zeros(dim);
        for t in &thetas {
            bar += t;
        }
        bar /= 3.0;
        let state = state_with(
            thetas,
            vec![0.01; 3],
            DMatrix::identity(dim, dim),
            DVector::zeros(dim),
            0.01, // strong coupling: conditional variance τ²/(PΛ) is tiny
        );
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let draws = 20_000;
        let mut mean = DVector::zeros(dim);
        for _ in 0..draws {
            mean += gibbs_theta0(&state, &prior, &mut rng).unwrap();
        }
        mean /= draws as f64;
        assert!((mean - bar).amax() < 1e-3);
    }

    #[test]
    fn mh_tau_accepts_identity_proposal() {
        let state = state_with(
            vec![DVector::from_vec(vec![0.1, 1.0])],
            vec![0.01],
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![0.0, 1.0]),
            0.8,
        );
        // A vanishing proposal scale makes every proposal the current
        // state; the ratio is 1 and acceptance certain.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let (tau2, accepted) = mh_tau(&state, 1e-300, &mut rng);
            assert!(accepted);
            assert_relative_eq!(tau2, 0.8, max_relative = 1e-6);
        }
    }

    #[test]
    fn mh_tau_prior_only_reproduces_half_cauchy_median() {
        // P = 0: the target is the half-Cauchy prior itself; its median is 1.
        let state = state_with(
            vec![],
            vec![],
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![0.0, 1.0]),
            1.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut st = state;
        let mut taus: Vec<f64> = Vec::with_capacity(200_000);
        for _ in 0..200_000 {
            let (tau2, _) = mh_tau(&st, 2.0, &mut rng);
            st.tau2 = tau2;
            taus.push(tau2.sqrt());
        }
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = taus[taus.len() / 2];
        assert!((median - 1.0).abs() < 0.05, "median {median}");
    }

    fn synthetic_panel(
        p_count: usize,
        n: usize,
        planted: &[(usize, f64)],
        sigma: f64,
        seed: u64,
    ) -> (ReturnsPanel, FactorDesign) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let design = random_design(n, seed ^ 0xabcd);
        let mut excess = DMatrix::zeros(n, p_count);
        for i in 0..p_count {
            let alpha = planted
                .iter()
                .find(|(idx, _)| *idx == i)
                .map(|(_, a)| *a)
                .unwrap_or(0.0);
            let theta = DVector::from_vec(vec![alpha, 1.0]);
            let r = design.x() * theta
                + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * sigma);
            excess.set_column(i, &r);
        }
        let panel = ReturnsPanel::new(
            (0..n)
                .map(|i| NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(i as i64))
                .collect(),
            (0..p_count).map(|i| format!("A{i}")).collect(),
            excess,
        )
        .unwrap();
        (panel, design)
    }

    #[test]
    fn chain_single_retained_draw() {
        let (panel, design) = synthetic_panel(3, 25, &[], 0.05, 17);
        let prior = HbPrior::defaults(2);
        let cfg = ChainConfig::new(11, 10, 1, 18);
        let draws = run_chain(&panel, &design, &prior, &cfg).unwrap();
        assert_eq!(draws.states.len(), 1);
    }

    #[test]
    fn chain_deterministic_given_seed() {
        let (panel, design) = synthetic_panel(4, 25, &[(0, 0.05)], 0.05, 19);
        let prior = HbPrior::defaults(2);
        let cfg = ChainConfig::new(60, 20, 2, 20);
        let a = run_chain(&panel, &design, &prior, &cfg).unwrap();
        let b = run_chain(&panel, &design, &prior, &cfg).unwrap();
        assert_eq!(a.states.len(), b.states.len());
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_eq!(sa.tau2.to_bits(), sb.tau2.to_bits());
            for (ta, tb) in sa.thetas.iter().zip(&sb.thetas) {
                assert_eq!(ta[0].to_bits(), tb[0].to_bits());
                assert_eq!(ta[1].to_bits(), tb[1].to_bits());
            }
        }
    }

    #[test]
    fn chain_states_satisfy_invariants() {
        let (panel, design) = synthetic_panel(5, 30, &[(1, 0.08)], 0.05, 21);
        let prior = HbPrior::defaults(2);
        let cfg = ChainConfig::new(150, 50, 1, 22);
        let draws = run_chain(&panel, &design, &prior, &cfg).unwrap();
        for st in &draws.states {
            assert!(st.tau2 > 0.0);
            assert!(st.sigma2s.iter().all(|s| *s > 0.0));
            assert!(Cholesky::new(st.lambda.clone()).is_some());
        }
    }

    #[test]
    fn sparse_data_concentrates_tau_near_zero() {
        // 2% planted signal: posterior τ mass sits below the prior median.
        let planted: Vec<(usize, f64)> = vec![(0, 0.1)];
        let (panel, design) = synthetic_panel(50, 50, &planted, 0.05, 23);
        let prior = HbPrior::defaults(2);
        let cfg = ChainConfig::new(600, 200, 1, 24);
        let draws = run_chain(&panel, &design, &prior, &cfg).unwrap();
        let mut taus: Vec<f64> = draws.states.iter().map(|s| s.tau2.sqrt()).collect();
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = taus[taus.len() / 2];
        assert!(median < 1.0, "posterior median τ = {median}");
    }

    #[test]
    fn coverage_on_synthetic_panel() {
        // Known θᵢ at n=200: the posterior mean lands within 3 posterior SD
        // of the truth for nearly every coordinate.
        let p_count = 20;
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let design = random_design(n, 26);
        let mut truths = Vec::with_capacity(p_count);
        let mut excess = DMatrix::zeros(n, p_count);
        for i in 0..p_count {
            let theta = DVector::from_vec(vec![
                0.05 * rng.sample::<f64, _>(StandardNormal),
                1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal),
            ]);
            let r = design.x() * &theta
                + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.05);
            excess.set_column(i, &r);
            truths.push(theta);
        }
        let panel = ReturnsPanel::new(
            (0..n)
                .map(|i| NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + chrono::Duration::days(i as i64))
                .collect(),
            (0..p_count).map(|i| format!("A{i}")).collect(),
            excess,
        )
        .unwrap();
        let prior = HbPrior::defaults(2);
        let cfg = ChainConfig::new(900, 300, 1, 27);
        let draws = run_chain(&panel, &design, &prior, &cfg).unwrap();

        let m = draws.states.len() as f64;
        let mut covered = 0;
        let total = p_count * 2;
        for i in 0..p_count {
            for j in 0..2 {
                let vals: Vec<f64> = draws.states.iter().map(|s| s.thetas[i][j]).collect();
                let mean = vals.iter().sum::<f64>() / m;
                let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
                if (mean - truths[i][j]).abs() <= 3.0 * sd {
                    covered += 1;
                }
            }
        }
        assert!(
            covered as f64 >= 0.95 * total as f64,
            "covered {covered}/{total}"
        );
    }

    #[test]
    fn select_ranks_planted_asset_first() {
        let (panel, design) = synthetic_panel(10, 100, &[(7, 0.1)], 0.03, 28);
        let prior = HbPrior::defaults(2);
        let cfg = ChainConfig::new(500, 200, 1, 29);
        let draws = run_chain(&panel, &design, &prior, &cfg).unwrap();
        let ranked = hb_select(&draws, 10).unwrap();
        assert_eq!(ranked[0].asset, 7);
        assert_eq!(ranked.len(), 10);
        // p_tilde = P returns everything in rank order
        let all = hb_select(&draws, 10).unwrap();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn select_requires_enough_draws() {
        let (panel, design) = synthetic_panel(3, 25, &[], 0.05, 30);
        let prior = HbPrior::defaults(2);
        let cfg = ChainConfig::new(60, 10, 1, 31);
        let draws = run_chain(&panel, &design, &prior, &cfg).unwrap();
        let err = hb_select(&draws, 2).unwrap_err();
        assert!(matches!(err, HbError::InsufficientDraws(_)));
    }

    #[test]
    fn mh_acceptance_in_sane_band_after_tuning() {
        let (panel, design) = synthetic_panel(20, 50, &[(0, 0.1)], 0.05, 32);
        let prior = HbPrior::defaults(2);
        let cfg = ChainConfig::new(1200, 600, 1, 33);
        let draws = run_chain(&panel, &design, &prior, &cfg).unwrap();
        assert!(
            draws.tau_acceptance > 0.1 && draws.tau_acceptance < 0.7,
            "acceptance {}",
            draws.tau_acceptance
        );
    }
}
