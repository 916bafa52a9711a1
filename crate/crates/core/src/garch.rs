//! GARCH(1,1) volatility estimation by Gaussian quasi-maximum likelihood.
//!
//! Model: r_t = μ + ε_t, h_t = ω + a·ε²_{t−1} + b·h_{t−1}, with h₁ set to
//! the sample variance. The likelihood is maximized over an unconstrained
//! reparameterization that enforces ω > 0, a ≥ 0, b ≥ 0, a+b < 1, using
//! multi-start Nelder-Mead.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GarchError {
    #[error("need at least {required} observations, got {actual}")]
    TooFewObservations { required: usize, actual: usize },

    /// No start converged to a stationary optimum (degenerate input, for
    /// example constant returns). Callers fall back to the sample variance.
    #[error("GARCH(1,1) likelihood maximization did not converge")]
    NonConvergence,
}

/// Fitted GARCH(1,1) parameters and conditional variance path.
#[derive(Debug, Clone)]
pub struct GarchFit {
    pub omega: f64,
    pub a: f64,
    pub b: f64,
    /// Fitted mean return μ.
    pub mean: f64,
    /// Conditional variance h_t per observation.
    pub cond_var: Vec<f64>,
    pub log_likelihood: f64,
}

impl GarchFit {
    /// Unconditional variance ω/(1−a−b).
    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.a - self.b)
    }
}

const MIN_OBS: usize = 50;

/// Persistence cap keeping the optimizer off the degenerate b → 1, ω → 0
/// ridge that ties the iid likelihood.
const PERSISTENCE_MAX: f64 = 0.999;

/// Negative Gaussian quasi-log-likelihood and the h path for natural
/// parameters. Returns `None` outside the stationarity region.
fn neg_loglik(returns: &[f64], mu: f64, omega: f64, a: f64, b: f64) -> Option<(f64, Vec<f64>)> {
    if !(omega > 0.0) || a < 0.0 || b < 0.0 || a + b >= PERSISTENCE_MAX {
        return None;
    }
    let n = returns.len();
    let mean0 = returns.iter().sum::<f64>() / n as f64;
    let h1 = returns.iter().map(|r| (r - mean0).powi(2)).sum::<f64>() / n as f64;
    if h1 <= 0.0 {
        return None;
    }
    let mut h = vec![0.0; n];
    h[0] = h1;
    let mut nll = 0.0;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    for t in 0..n {
        if t > 0 {
            let eps_prev = returns[t - 1] - mu;
            h[t] = (omega + a * eps_prev * eps_prev + b * h[t - 1]).max(1e-300);
        }
        let eps = returns[t] - mu;
        nll += 0.5 * (ln2pi + h[t].ln() + eps * eps / h[t]);
    }
    if !nll.is_finite() {
        return None;
    }
    Some((nll, h))
}

/// Unconstrained coordinates: (μ, log ω, u, v) with
/// a = e^u/(1+e^u+e^v), b = e^v/(1+e^u+e^v).
fn to_natural(x: &[f64; 4]) -> (f64, f64, f64, f64) {
    let eu = x[2].exp();
    let ev = x[3].exp();
    let denom = 1.0 + eu + ev;
    (x[0], x[1].exp(), eu / denom, ev / denom)
}

fn from_natural(mu: f64, omega: f64, a: f64, b: f64) -> [f64; 4] {
    let rest = (1.0 - a - b).max(1e-12);
    [mu, omega.ln(), (a.max(1e-12) / rest).ln(), (b.max(1e-12) / rest).ln()]
}

fn objective(returns: &[f64], x: &[f64; 4]) -> f64 {
    let (mu, omega, a, b) = to_natural(x);
    match neg_loglik(returns, mu, omega, a, b) {
        Some((nll, _)) => nll,
        None => 1e300,
    }
}

/// Compact Nelder-Mead on four coordinates.
fn nelder_mead(returns: &[f64], start: [f64; 4], max_iter: usize) -> ([f64; 4], f64) {
    let dim = 4;
    let mut simplex: Vec<([f64; 4], f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start, objective(returns, &start)));
    for i in 0..dim {
        let mut v = start;
        v[i] += if v[i].abs() > 1.0 { 0.1 * v[i].abs() } else { 0.25 };
        simplex.push((v, objective(returns, &v)));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..max_iter {
        simplex.sort_by(|p, q| p.1.partial_cmp(&q.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if (worst - best).abs() <= 1e-10 * (1.0 + best.abs()) {
            break;
        }
        let mut centroid = [0.0; 4];
        for point in &simplex[..dim] {
            for j in 0..dim {
                centroid[j] += point.0[j] / dim as f64;
            }
        }
        let mut reflected = [0.0; 4];
        for j in 0..dim {
            reflected[j] = centroid[j] + alpha * (centroid[j] - simplex[dim].0[j]);
        }
        let fr = objective(returns, &reflected);
        if fr < simplex[0].1 {
            let mut expanded = [0.0; 4];
            for j in 0..dim {
                expanded[j] = centroid[j] + gamma * (reflected[j] - centroid[j]);
            }
            let fe = objective(returns, &expanded);
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
            continue;
        }
        let mut contracted = [0.0; 4];
        for j in 0..dim {
            contracted[j] = centroid[j] + rho * (simplex[dim].0[j] - centroid[j]);
        }
        let fc = objective(returns, &contracted);
        if fc < simplex[dim].1 {
            simplex[dim] = (contracted, fc);
            continue;
        }
        let anchor = simplex[0].0;
        for point in simplex.iter_mut().skip(1) {
            for j in 0..dim {
                point.0[j] = anchor[j] + sigma * (point.0[j] - anchor[j]);
            }
            point.1 = objective(returns, &point.0);
        }
    }
    simplex.sort_by(|p, q| p.1.partial_cmp(&q.1).unwrap());
    (simplex[0].0, simplex[0].1)
}

/// Fits GARCH(1,1) by QMLE with multiple starts. Requires ≥ 50
/// observations; degenerate inputs yield [`GarchError::NonConvergence`].
pub fn garch_fit(returns: &[f64]) -> Result<GarchFit, GarchError> {
    let n = returns.len();
    if n < MIN_OBS {
        return Err(GarchError::TooFewObservations {
            required: MIN_OBS,
            actual: n,
        });
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let variance = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    if !(variance > 1e-18) || returns.iter().any(|r| !r.is_finite()) {
        return Err(GarchError::NonConvergence);
    }

    let starts = [
        (0.05, 0.90),
        (0.10, 0.80),
        (0.05, 0.50),
        (0.02, 0.10),
        (0.20, 0.60),
    ];
    let mut best: Option<([f64; 4], f64)> = None;
    for (a0, b0) in starts {
        let omega0 = variance * (1.0 - a0 - b0);
        let start = from_natural(mean, omega0, a0, b0);
        let (x, f) = nelder_mead(returns, start, 2000);
        if f < 1e299 && best.as_ref().map_or(true, |(_, fb)| f < *fb) {
            best = Some((x, f));
        }
    }
    let (x, f) = best.ok_or(GarchError::NonConvergence)?;
    let (mu, omega, a, b) = to_natural(&x);
    let (_, cond_var) = neg_loglik(returns, mu, omega, a, b).ok_or(GarchError::NonConvergence)?;
    Ok(GarchFit {
        omega,
        a,
        b,
        mean: mu,
        cond_var,
        log_likelihood: -f,
    })
}

/// Asymptotic standard errors of (ω, a, b) from the numerical Hessian of
/// the negative log-likelihood at the optimum. `None` when the information
/// matrix is not invertible.
pub fn qmle_std_errors(returns: &[f64], fit: &GarchFit) -> Option<[f64; 3]> {
    let theta = [fit.mean, fit.omega, fit.a, fit.b];
    let f = |p: &[f64; 4]| {
        neg_loglik(returns, p[0], p[1], p[2], p[3])
            .map(|(nll, _)| nll)
            .unwrap_or(1e300)
    };
    let mut hessian = nalgebra::DMatrix::zeros(4, 4);
    let step: Vec<f64> = theta
        .iter()
        .map(|t| 1e-4 * t.abs().max(1e-7))
        .collect();
    let f0 = f(&theta);
    if f0 >= 1e299 {
        return None;
    }
    for i in 0..4 {
        for j in i..4 {
            let mut pp = theta;
            pp[i] += step[i];
            pp[j] += step[j];
            let mut pm = theta;
            pm[i] += step[i];
            pm[j] -= step[j];
            let mut mp = theta;
            mp[i] -= step[i];
            mp[j] += step[j];
            let mut mm = theta;
            mm[i] -= step[i];
            mm[j] -= step[j];
            let val = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * step[i] * step[j]);
            hessian[(i, j)] = val;
            hessian[(j, i)] = val;
        }
    }
    let cov = hessian.try_inverse()?;
    let se = |k: usize| {
        let v: f64 = cov[(k, k)];
        if v > 0.0 {
            Some(v.sqrt())
        } else {
            None
        }
    };
    Some([se(1)?, se(2)?, se(3)?])
}

/// Simulates a GARCH(1,1) path with standard-normal innovations;
/// deterministic given the seed. Used by recovery tests.
pub fn simulate_garch(omega: f64, a: f64, b: f64, n: usize, seed: u64) -> Vec<f64> {
    assert!(omega > 0.0 && a >= 0.0 && b >= 0.0 && a + b < 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = omega / (1.0 - a - b);
    let mut out = Vec::with_capacity(n);
    let mut eps_prev = 0.0;
    for t in 0..n {
        if t > 0 {
            h = omega + a * eps_prev * eps_prev + b * h;
        }
        let z: f64 = rng.sample(StandardNormal);
        eps_prev = h.sqrt() * z;
        out.push(eps_prev);
    }
    out
}
