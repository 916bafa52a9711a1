//! The spike-and-slab Bayes oracle multiple test.
//!
//! Each asset's pricing restriction is tested by mixing a point mass at
//! the null point μ₀ (prior weight 1−p) with a Gaussian slab
//! N(μ₀, Λ₀⁻¹) (weight p). The posterior-based statistic
//! `S = (μ_n − μ₀)ᵀ Λ_n (μ_n − μ₀)` is compared against the loss-optimal
//! threshold `c² = −log Π(1−λⱼ) + 2·log(fδ)`; an alternative statistic
//! `S̃` projects the standardized residual-from-null onto the factor span
//! and does not depend on Λ₀. Error probabilities of both follow weighted
//! chi-square laws from [`crate::quadform`], which also power the
//! BFDR-calibrated thresholds and the asymptotic-optimality diagnostics.

use crate::factor::{ols_estimate, AssetEstimate, FactorDesign, FactorError, NullPoint, ReturnsPanel};
use crate::quadform::{self, eigen_weights_from_prior, EigenWeights, QuadFormError};
use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Factor(#[from] FactorError),

    #[error(transparent)]
    QuadForm(#[from] QuadFormError),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    /// The target BFDR is unattainable at this sparsity (r_α/f ≥ 1).
    #[error("BFDR target {alpha} infeasible at sparsity p={p}")]
    Infeasible { alpha: f64, p: f64 },
}

/// Spike-and-slab prior: weight 1−p on δ_{μ₀}, weight p on N(μ₀, Λ₀⁻¹).
#[derive(Debug, Clone)]
pub struct SpikeSlabPrior {
    p: f64,
    lambda0: DMatrix<f64>,
    mu0: NullPoint,
}

impl SpikeSlabPrior {
    pub fn new(p: f64, lambda0: DMatrix<f64>) -> Result<Self, OracleError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(OracleError::InvalidPrior(format!(
                "sparsity p must lie in (0,1), got {p}"
            )));
        }
        let dim = lambda0.nrows();
        if lambda0.ncols() != dim || dim < 2 {
            return Err(OracleError::InvalidPrior(
                "Λ₀ must be square with dimension k+1 ≥ 2".into(),
            ));
        }
        if Cholesky::new(lambda0.clone()).is_none() {
            return Err(OracleError::InvalidPrior(
                "Λ₀ must be symmetric positive definite".into(),
            ));
        }
        Ok(Self {
            p,
            lambda0,
            mu0: NullPoint::for_dim(dim),
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Prior odds of the null, f = (1−p)/p.
    pub fn f(&self) -> f64 {
        (1.0 - self.p) / self.p
    }

    pub fn lambda0(&self) -> &DMatrix<f64> {
        &self.lambda0
    }

    pub fn mu0(&self) -> &NullPoint {
        &self.mu0
    }
}

/// Losses attached to type-I and type-II errors.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    delta0: f64,
    delta_a: f64,
}

impl LossSpec {
    pub fn new(delta0: f64, delta_a: f64) -> Result<Self, OracleError> {
        if !(delta0 > 0.0 && delta_a > 0.0) {
            return Err(OracleError::InvalidPrior(
                "both losses must be positive".into(),
            ));
        }
        Ok(Self { delta0, delta_a })
    }

    pub fn delta0(&self) -> f64 {
        self.delta0
    }

    pub fn delta_a(&self) -> f64 {
        self.delta_a
    }

    /// Loss ratio δ = δ₀/δ_A.
    pub fn delta(&self) -> f64 {
        self.delta0 / self.delta_a
    }
}

impl Default for LossSpec {
    /// Symmetric loss (δ = 1), matching the π̃ > 1/2 rule.
    fn default() -> Self {
        Self {
            delta0: 1.0,
            delta_a: 1.0,
        }
    }
}

/// Conditional posterior of θ under the slab.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mu_n: DVector<f64>,
    pub lambda_n: DMatrix<f64>,
}

/// Λ_n = Λ₀ + Σ_X/σ², μ_n = Λ_n⁻¹(Λ₀μ₀ + (Σ_X/σ²)θ̂) for an explicit σ².
pub fn posterior_update_with_sigma2(
    prior: &SpikeSlabPrior,
    design: &FactorDesign,
    theta_hat: &DVector<f64>,
    sigma2: f64,
) -> Result<Posterior, OracleError> {
    if !(sigma2 > 0.0) {
        return Err(OracleError::InvalidPrior(format!(
            "residual variance must be positive, got {sigma2}"
        )));
    }
    let g = design.sigma_x() / sigma2;
    let lambda_n = prior.lambda0() + &g;
    let chol = Cholesky::new(lambda_n.clone()).ok_or_else(|| {
        OracleError::InvalidPrior("Λ_n not invertible; inputs inconsistent".into())
    })?;
    let rhs = prior.lambda0() * prior.mu0().as_vector() + &g * theta_hat;
    let mu_n = chol.solve(&rhs);
    Ok(Posterior { mu_n, lambda_n })
}

/// Posterior update with the plug-in residual variance from the OLS fit.
pub fn posterior_update(
    prior: &SpikeSlabPrior,
    design: &FactorDesign,
    est: &AssetEstimate,
) -> Result<Posterior, OracleError> {
    posterior_update_with_sigma2(prior, design, &est.theta_hat, est.sigma2_hat)
}

/// S = (μ_n − μ₀)ᵀ Λ_n (μ_n − μ₀).
pub fn statistic_s(posterior: &Posterior, mu0: &NullPoint) -> f64 {
    let d = &posterior.mu_n - mu0.as_vector();
    (d.transpose() * &posterior.lambda_n * &d)[(0, 0)].max(0.0)
}

/// S̃ = zᵀ X(XᵀX)⁻¹Xᵀ z with z = (r − Xμ₀)/σ: the squared norm of the
/// projection of z onto the factor span. Does not depend on Λ₀.
pub fn statistic_s_tilde(
    design: &FactorDesign,
    r_i: &DVector<f64>,
    sigma: f64,
    mu0: &NullPoint,
) -> Result<f64, OracleError> {
    if !(sigma > 0.0) {
        return Err(OracleError::InvalidPrior(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let z = (r_i - design.x() * mu0.as_vector()) / sigma;
    let w = design.x().transpose() * &z;
    let y = design.solve_sigma_x(&w);
    Ok(w.dot(&y).max(0.0))
}

/// Loss-optimal rejection threshold c² = −log Π(1−λⱼ) + 2·log(fδ).
///
/// May be negative in dense regimes (fδ < Π(1−λ)); it is returned as-is,
/// so the rejection region then contains the whole support.
pub fn threshold_c2(prior: &SpikeSlabPrior, loss: &LossSpec, weights: &EigenWeights) -> f64 {
    -weights.log_det_complement() + 2.0 * (prior.f() * loss.delta()).ln()
}

/// Posterior inclusion probability π̃ = (1 + f·exp(−s/2))⁻¹.
///
/// This is the display form used for reporting and ranking: it exceeds 1/2
/// exactly when s > 2·log f. The exact mixture posterior, which also
/// carries the Bayes-factor determinant and reproduces the c² decision
/// boundary, is [`posterior_alt_prob`].
pub fn posterior_inclusion(s: f64, p: f64) -> f64 {
    let f = (1.0 - p) / p;
    1.0 / (1.0 + f * (-0.5 * s).exp())
}

/// Exact posterior probability of the slab under symmetric loss:
/// (1 + f/BF)⁻¹ with BF = √Π(1−λⱼ)·exp(s/2). Exceeds 1/2 exactly when
/// s ≥ c² at δ = 1.
pub fn posterior_alt_prob(s: f64, p: f64, weights: &EigenWeights) -> f64 {
    posterior_inclusion(s + weights.log_det_complement(), p)
}

/// Log Bayes factor of slab vs spike: ½·log Π(1−λⱼ) + s/2.
pub fn log_bayes_factor(s: f64, weights: &EigenWeights) -> f64 {
    0.5 * weights.log_det_complement() + 0.5 * s
}

/// Exact error probabilities of a threshold rule at c².
#[derive(Debug, Clone, Copy)]
pub struct ErrorProfile {
    /// P(reject | null): upper tail of Σ λⱼ χ²₁ at c².
    pub t1: f64,
    /// P(accept | slab): lower tail of Σ (λⱼ/(1−λⱼ)) χ²₁ at c².
    pub t2: f64,
    /// Bayesian false discovery rate (1−p)t1 / ((1−p)t1 + p(1−t2)).
    pub bfdr: f64,
    /// This asset's Bayes-risk contribution (1−p)δ₀t1 + pδ_At2.
    pub risk: f64,
}

/// Evaluates type-I/type-II probabilities, BFDR and the risk contribution
/// for a single asset's eigenweights at threshold c².
pub fn error_probs(
    weights: &EigenWeights,
    c2: f64,
    prior: &SpikeSlabPrior,
    loss: &LossSpec,
) -> Result<ErrorProfile, OracleError> {
    let t1 = (1.0 - quadform::qf_cdf(&weights.null_dist()?, c2)?).max(0.0);
    let t2 = quadform::qf_cdf(&weights.alt_dist()?, c2)?;
    let p = prior.p();
    let denom = (1.0 - p) * t1 + p * (1.0 - t2);
    let bfdr = if denom > 0.0 {
        (1.0 - p) * t1 / denom
    } else {
        0.0
    };
    let risk = (1.0 - p) * loss.delta0() * t1 + p * loss.delta_a() * t2;
    Ok(ErrorProfile { t1, t2, bfdr, risk })
}

/// Total Bayes risk R = (1−p)δ₀ Σt1ᵢ + pδ_A Σt2ᵢ over a panel of assets.
pub fn bayes_risk(profiles: &[ErrorProfile], prior: &SpikeSlabPrior, loss: &LossSpec) -> f64 {
    let p = prior.p();
    profiles
        .iter()
        .map(|pr| (1.0 - p) * loss.delta0() * pr.t1 + p * loss.delta_a() * pr.t2)
        .sum()
}

/// Model BFDR of the fixed-threshold rule at c²:
/// (1−p)e^{−c²/2} / ((1−p)e^{−c²/2} + p·e^{−(c²/2)·√Π(1−λⱼ)}).
pub fn bfdr_at(prior: &SpikeSlabPrior, weights: &EigenWeights, c2: f64) -> f64 {
    let p = prior.p();
    let null_log = (1.0 - p).ln() - 0.5 * c2;
    let alt_log = p.ln() - 0.5 * c2 * weights.sqrt_prod_complement();
    1.0 / (1.0 + (alt_log - null_log).exp())
}

/// Threshold whose model BFDR equals α:
/// c² = −2·log(r_α/f) / (1 − √Π(1−λⱼ)) with r_α = α/(1−α).
pub fn bfdr_threshold(
    prior: &SpikeSlabPrior,
    weights: &EigenWeights,
    alpha: f64,
) -> Result<f64, OracleError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(OracleError::Infeasible {
            alpha,
            p: prior.p(),
        });
    }
    let r_alpha = alpha / (1.0 - alpha);
    let ratio = r_alpha / prior.f();
    if ratio >= 1.0 {
        return Err(OracleError::Infeasible {
            alpha,
            p: prior.p(),
        });
    }
    Ok(-2.0 * ratio.ln() / (1.0 - weights.sqrt_prod_complement()))
}

/// One step of a parameter sequence fed to [`abos_diagnostic`].
#[derive(Debug, Clone)]
pub struct AbosPoint {
    pub p: f64,
    pub lambda0: DMatrix<f64>,
    pub sigma: f64,
    pub delta: f64,
}

/// Diagnostics emitted per sequence step so the asymptotic limits can be
/// inspected numerically.
#[derive(Debug, Clone, Copy)]
pub struct AbosDiagnosticRow {
    /// v = det(I−Q)·f·δ; must diverge along an admissible sequence.
    pub v: f64,
    /// √Π(1−λⱼ), the contraction factor.
    pub sqrt_prod_complement: f64,
    /// √Π(1−λⱼ)·c², whose limit sets the type-II plateau.
    pub scaled_threshold: f64,
    pub c2: f64,
    pub t1: f64,
    pub t2: f64,
}

/// Exact error probabilities along a (p_t, Λ₀t, σ_t, δ_t) sequence on a
/// fixed design. Under the admissibility conditions (p → 0, σ²Λ₀ → 0,
/// v → ∞ with √Π(1−λ)·c² convergent) t1 vanishes and t2 plateaus at the
/// chi-square CDF of the scaled-threshold limit.
pub fn abos_diagnostic(
    sequence: &[AbosPoint],
    design: &FactorDesign,
) -> Result<Vec<AbosDiagnosticRow>, OracleError> {
    let mut rows = Vec::with_capacity(sequence.len());
    for pt in sequence {
        let prior = SpikeSlabPrior::new(pt.p, pt.lambda0.clone())?;
        let loss = LossSpec::new(pt.delta, 1.0)?;
        let ew = eigen_weights_from_prior(&pt.lambda0, design.sigma_x(), pt.sigma * pt.sigma)?;
        let c2 = threshold_c2(&prior, &loss, &ew);
        let profile = error_probs(&ew, c2, &prior, &loss)?;
        let sqrt_prod = ew.sqrt_prod_complement();
        rows.push(AbosDiagnosticRow {
            v: ew.log_det_complement().exp() * prior.f() * loss.delta(),
            sqrt_prod_complement: sqrt_prod,
            scaled_threshold: sqrt_prod * c2,
            c2,
            t1: profile.t1,
            t2: profile.t2,
        });
    }
    Ok(rows)
}

/// Diffuse-prior baseline: joint F-test of θ = μ₀.
#[derive(Debug, Clone, Copy)]
pub struct FTestOutcome {
    /// ((θ̂−μ₀)ᵀΣ_X(θ̂−μ₀)/(k+1)) / σ̂², or infinity on the degenerate
    /// noise-free branch with θ̂ ≠ μ₀.
    pub statistic: f64,
    pub reject: bool,
    /// rss was numerically zero; the decision fell back to exact equality.
    pub degenerate: bool,
}

/// Rejects H₀: θ = μ₀ when the F statistic exceeds the upper-significance
/// quantile of F(k+1, n−k−1). Noise-free data (rss = 0) decides by
/// equality of θ̂ with μ₀.
pub fn f_test_baseline(
    design: &FactorDesign,
    est: &AssetEstimate,
    significance: f64,
) -> Result<FTestOutcome, OracleError> {
    assert!(
        significance > 0.0 && significance < 1.0,
        "significance must lie in (0,1)"
    );
    let mu0 = design.null_point();
    let d = &est.theta_hat - mu0.as_vector();
    let quad = (d.transpose() * design.sigma_x() * &d)[(0, 0)].max(0.0);
    let dim = design.dim() as f64;
    let scale = quad.max(1.0);
    if est.rss <= 1e-20 * scale {
        let equal = d.amax() <= 1e-10;
        return Ok(FTestOutcome {
            statistic: if equal { 0.0 } else { f64::INFINITY },
            reject: !equal,
            degenerate: true,
        });
    }
    let statistic = (quad / dim) / est.sigma2_hat;
    let df2 = (est.n - design.dim()) as f64;
    let dist = FisherSnedecor::new(dim, df2)
        .map_err(|e| OracleError::InvalidPrior(format!("F distribution: {e}")))?;
    let critical = dist.inverse_cdf(1.0 - significance);
    Ok(FTestOutcome {
        statistic,
        reject: statistic > critical,
        degenerate: false,
    })
}

/// Which statistic drives the reject decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionStatistic {
    /// S, the posterior quadratic form.
    Posterior,
    /// S̃, the Λ₀-free projection statistic.
    Projection,
}

/// How σᵢ enters the statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    /// σ² known (simulation/oracle setting).
    Known(f64),
    /// Plug in σ̂ᵢ² = rssᵢ/(n−k−1) from the OLS fit.
    PlugIn,
}

/// Per-asset outcome of the oracle test.
#[derive(Debug, Clone)]
pub struct OracleTestResult {
    pub asset: usize,
    pub s: f64,
    pub s_tilde: f64,
    pub c2: f64,
    /// π̃ of the decision statistic.
    pub pip: f64,
    /// Eigenweights λⱼ, descending.
    pub lambdas: Vec<f64>,
    /// Decision of the configured statistic against c².
    pub reject: bool,
    pub mu_n: DVector<f64>,
    pub lambda_n: DMatrix<f64>,
    /// σ² actually used for this asset.
    pub sigma2: f64,
    /// Estimated intercept α̂ from the OLS fit.
    pub alpha_hat: f64,
}

/// Configured test harness binding a prior, loss, design and σ mode.
pub struct OracleTest<'a> {
    prior: &'a SpikeSlabPrior,
    loss: LossSpec,
    design: &'a FactorDesign,
    sigma_mode: SigmaMode,
    decision: DecisionStatistic,
}

struct TestContext {
    eigen: EigenWeights,
    c2: f64,
    sigma2: f64,
}

impl<'a> OracleTest<'a> {
    pub fn new(
        prior: &'a SpikeSlabPrior,
        loss: LossSpec,
        design: &'a FactorDesign,
        sigma_mode: SigmaMode,
        decision: DecisionStatistic,
    ) -> Result<Self, OracleError> {
        if prior.lambda0().nrows() != design.dim() {
            return Err(OracleError::InvalidPrior(format!(
                "prior dimension {} does not match design dimension {}",
                prior.lambda0().nrows(),
                design.dim()
            )));
        }
        Ok(Self {
            prior,
            loss,
            design,
            sigma_mode,
            decision,
        })
    }

    fn context(&self, sigma2: f64) -> Result<TestContext, OracleError> {
        let eigen =
            eigen_weights_from_prior(self.prior.lambda0(), self.design.sigma_x(), sigma2)?;
        let c2 = threshold_c2(self.prior, &self.loss, &eigen);
        Ok(TestContext { eigen, c2, sigma2 })
    }

    fn test_with_context(
        &self,
        asset: usize,
        r_i: &DVector<f64>,
        est: &AssetEstimate,
        ctx: &TestContext,
    ) -> Result<OracleTestResult, OracleError> {
        let posterior =
            posterior_update_with_sigma2(self.prior, self.design, &est.theta_hat, ctx.sigma2)?;
        let mu0 = self.design.null_point();
        let s = statistic_s(&posterior, &mu0);
        let s_tilde = statistic_s_tilde(self.design, r_i, ctx.sigma2.sqrt(), &mu0)?;
        let stat = match self.decision {
            DecisionStatistic::Posterior => s,
            DecisionStatistic::Projection => s_tilde,
        };
        Ok(OracleTestResult {
            asset,
            s,
            s_tilde,
            c2: ctx.c2,
            pip: posterior_inclusion(stat, self.prior.p()),
            lambdas: ctx.eigen.lambdas().to_vec(),
            reject: stat >= ctx.c2,
            mu_n: posterior.mu_n,
            lambda_n: posterior.lambda_n,
            sigma2: ctx.sigma2,
            alpha_hat: est.theta_hat[0],
        })
    }

    /// Tests a single asset's return vector.
    pub fn test_asset(
        &self,
        asset: usize,
        r_i: &DVector<f64>,
    ) -> Result<OracleTestResult, OracleError> {
        let est = ols_estimate(self.design, r_i)?;
        let sigma2 = match self.sigma_mode {
            SigmaMode::Known(s2) => s2,
            SigmaMode::PlugIn => est.sigma2_hat,
        };
        let ctx = self.context(sigma2)?;
        self.test_with_context(asset, r_i, &est, &ctx)
    }

    /// Tests every asset in the panel. With a known σ the eigenweights and
    /// threshold are shared across assets and computed once.
    pub fn run_panel(&self, panel: &ReturnsPanel) -> Result<Vec<OracleTestResult>, OracleError> {
        let shared = match self.sigma_mode {
            SigmaMode::Known(s2) => Some(self.context(s2)?),
            SigmaMode::PlugIn => None,
        };
        let mut out = Vec::with_capacity(panel.n_assets());
        for i in 0..panel.n_assets() {
            let r_i = panel.asset_returns(i);
            let est = ols_estimate(self.design, &r_i)?;
            let result = match &shared {
                Some(ctx) => self.test_with_context(i, &r_i, &est, ctx)?,
                None => {
                    let ctx = self.context(est.sigma2_hat)?;
                    self.test_with_context(i, &r_i, &est, &ctx)?
                }
            };
            out.push(result);
        }
        Ok(out)
    }
}
