//! Tweedie distribution mathematics in the compound Poisson-Gamma regime.
//!
//! For `1 < p < 2` a Tweedie variable with mean `mu`, dispersion `phi` and
//! power `p` is a Poisson(`lambda`) sum of Gamma(`alpha`, `rate`) variates:
//!
//! ```text
//! lambda = mu^(2-p) / (phi (2-p))
//! alpha  = (2-p) / (p-1)
//! 1/rate = phi (p-1) mu^(p-1)
//! ```
//!
//! The canonical form is `exp{(y theta - kappa)/phi + c(y, phi, p)}` with
//! `theta = mu^(1-p)/(1-p)` and `kappa = mu^(2-p)/(2-p)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Largest number of series terms evaluated by [`log_density`].
pub const MAX_SERIES_TERMS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TweedieError {
    #[error("power p = {0} is outside the compound Poisson-Gamma range (1, 2)")]
    PowerOutOfRange(f64),
    #[error("mean must be positive and finite, got {0}")]
    InvalidMean(f64),
    #[error("dispersion must be positive and finite, got {0}")]
    InvalidDispersion(f64),
    #[error("response must be non-negative and finite, got {0}")]
    InvalidResponse(f64),
    #[error("series for c(y, phi, p) did not converge within {terms} terms (y = {y})")]
    SeriesNotConverged { y: f64, terms: usize },
}

/// Checks `1 < p < 2`.
pub fn check_power(p: f64) -> Result<(), TweedieError> {
    if p > 1.0 && p < 2.0 {
        Ok(())
    } else {
        Err(TweedieError::PowerOutOfRange(p))
    }
}

/// Mean, dispersion and power of one Tweedie cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TweedieParams {
    pub mu: f64,
    pub phi: f64,
    pub p: f64,
}

/// Compound Poisson-Gamma image of a [`TweedieParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpgParams {
    pub lambda: f64,
    pub alpha: f64,
    /// Gamma rate (inverse scale).
    pub rate: f64,
}

/// Canonical parameter and cumulant value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaturalParams {
    pub theta: f64,
    pub kappa: f64,
}

impl TweedieParams {
    /// Validated constructor for the compound Poisson-Gamma regime.
    pub fn new(mu: f64, phi: f64, p: f64) -> Result<Self, TweedieError> {
        let tp = Self { mu, phi, p };
        tp.validate()?;
        Ok(tp)
    }

    pub fn validate(&self) -> Result<(), TweedieError> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(TweedieError::InvalidMean(self.mu));
        }
        if !(self.phi.is_finite() && self.phi > 0.0) {
            return Err(TweedieError::InvalidDispersion(self.phi));
        }
        check_power(self.p)
    }

    pub fn variance(&self) -> f64 {
        self.phi * self.mu.powf(self.p)
    }

    pub fn natural(&self) -> NaturalParams {
        NaturalParams {
            theta: self.mu.powf(1.0 - self.p) / (1.0 - self.p),
            kappa: self.mu.powf(2.0 - self.p) / (2.0 - self.p),
        }
    }
}

impl CpgParams {
    /// Inverse map back to `(mu, phi, p)`.
    ///
    /// Uses `p = (alpha + 2)/(alpha + 1)`, `mu = lambda alpha / rate` and
    /// `phi = mu^(2-p) / (lambda (2-p))`.
    pub fn to_tweedie(&self) -> TweedieParams {
        let p = (self.alpha + 2.0) / (self.alpha + 1.0);
        let mu = self.lambda * self.alpha / self.rate;
        let phi = mu.powf(2.0 - p) / (self.lambda * (2.0 - p));
        TweedieParams { mu, phi, p }
    }

    pub fn mean(&self) -> f64 {
        self.lambda * self.alpha / self.rate
    }
}

impl NaturalParams {
    /// Recovers `mu` from `theta`: `mu = ((1-p) theta)^(1/(1-p))`.
    pub fn mean(theta: f64, p: f64) -> f64 {
        ((1.0 - p) * theta).powf(1.0 / (1.0 - p))
    }

    /// `kappa(theta) = ((1-p) theta)^((2-p)/(1-p)) / (2-p)`.
    pub fn cumulant(theta: f64, p: f64) -> f64 {
        ((1.0 - p) * theta).powf((2.0 - p) / (1.0 - p)) / (2.0 - p)
    }
}

/// Converts Tweedie parameters to their compound Poisson-Gamma form.
pub fn to_cpg(tp: TweedieParams) -> Result<CpgParams, TweedieError> {
    tp.validate()?;
    let TweedieParams { mu, phi, p } = tp;
    Ok(CpgParams {
        lambda: mu.powf(2.0 - p) / (phi * (2.0 - p)),
        alpha: (2.0 - p) / (p - 1.0),
        rate: 1.0 / (phi * (p - 1.0) * mu.powf(p - 1.0)),
    })
}

/// `Pr[Y = 0] = exp(-lambda)`.
pub fn zero_probability(tp: TweedieParams) -> Result<f64, TweedieError> {
    Ok((-to_cpg(tp)?.lambda).exp())
}

/// Per-cell training loss `-(y theta - kappa)` with `mu = exp(eta)`.
///
/// Written in terms of `eta` so it stays finite for any finite `eta` below
/// the overflow threshold of `exp`.
pub fn cell_loss(y: f64, eta: f64, p: f64) -> Result<f64, TweedieError> {
    if !(y.is_finite() && y >= 0.0) {
        return Err(TweedieError::InvalidResponse(y));
    }
    check_power(p)?;
    Ok(cell_loss_unchecked(y, eta, p))
}

#[inline]
pub(crate) fn cell_loss_unchecked(y: f64, eta: f64, p: f64) -> f64 {
    let kappa = ((2.0 - p) * eta).exp() / (2.0 - p);
    if y == 0.0 {
        kappa
    } else {
        -y * ((1.0 - p) * eta).exp() / (1.0 - p) + kappa
    }
}

/// Derivative of [`cell_loss`] with respect to `eta`: `-(y - mu) mu^(1-p)`.
pub fn cell_loss_grad(y: f64, eta: f64, p: f64) -> f64 {
    let mu = eta.exp();
    -(y - mu) * ((1.0 - p) * eta).exp()
}

/// Log of the compound Poisson-Gamma density (or mass at zero).
///
/// For `y > 0` the series `c(y, phi, p)` is summed in log space around its
/// largest term and truncated in each direction once a term drops below
/// `tol` relative to that maximum.
pub fn log_density(y: f64, tp: TweedieParams, tol: f64) -> Result<f64, TweedieError> {
    if !(y.is_finite() && y >= 0.0) {
        return Err(TweedieError::InvalidResponse(y));
    }
    let cpg = to_cpg(tp)?;
    if y == 0.0 {
        return Ok(-cpg.lambda);
    }
    Ok(-cpg.rate * y - cpg.lambda + log_series(y, &cpg, tol)?)
}

/// `log sum_{k>=1} rate^(k alpha) y^(k alpha - 1) lambda^k / (Gamma(k alpha) k!)`.
fn log_series(y: f64, cpg: &CpgParams, tol: f64) -> Result<f64, TweedieError> {
    let CpgParams {
        lambda,
        alpha,
        rate,
    } = *cpg;
    let ln_ry = (rate * y).ln();
    let ln_y = y.ln();
    let ln_lambda = lambda.ln();
    let log_term =
        |k: f64| k * alpha * ln_ry - ln_y + k * ln_lambda - ln_gamma(k * alpha) - ln_gamma(k + 1.0);

    // Stationary point of the Stirling-approximated log term, k treated as continuous.
    let k_star = ((alpha * (ln_ry - alpha.ln()) + ln_lambda) / (alpha + 1.0)).exp();
    let k_peak = if k_star.is_finite() {
        k_star.round().clamp(1.0, 1e15)
    } else {
        1.0
    };
    // The continuous estimate can be off by one or two; walk uphill to the true peak.
    let mut k_max = k_peak;
    let mut best = log_term(k_max);
    loop {
        let up = log_term(k_max + 1.0);
        if up > best {
            k_max += 1.0;
            best = up;
            continue;
        }
        if k_max > 1.0 {
            let down = log_term(k_max - 1.0);
            if down > best {
                k_max -= 1.0;
                best = down;
                continue;
            }
        }
        break;
    }

    let cutoff = best + tol.ln();
    let mut sum = 1.0; // term at k_max relative to itself
    let mut terms = 1usize;

    let mut k = k_max + 1.0;
    loop {
        let lt = log_term(k);
        if lt < cutoff {
            break;
        }
        sum += (lt - best).exp();
        terms += 1;
        if terms > MAX_SERIES_TERMS {
            return Err(TweedieError::SeriesNotConverged { y, terms });
        }
        k += 1.0;
    }
    let mut k = k_max - 1.0;
    while k >= 1.0 {
        let lt = log_term(k);
        if lt < cutoff {
            break;
        }
        sum += (lt - best).exp();
        terms += 1;
        if terms > MAX_SERIES_TERMS {
            return Err(TweedieError::SeriesNotConverged { y, terms });
        }
        k -= 1.0;
    }
    Ok(best + sum.ln())
}

/// One exact compound Poisson-Gamma draw.
///
/// Draws `N ~ Poisson(lambda)` and, when `N > 0`, a single
/// `Gamma(N alpha, rate)` variate, which has the law of the sum of `N`
/// independent `Gamma(alpha, rate)` variates.
pub fn sample_cpg<R: Rng + ?Sized>(tp: TweedieParams, rng: &mut R) -> Result<f64, TweedieError> {
    let cpg = to_cpg(tp)?;
    Ok(sample_from_cpg(&cpg, rng))
}

pub(crate) fn sample_from_cpg<R: Rng + ?Sized>(cpg: &CpgParams, rng: &mut R) -> f64 {
    let n = if cpg.lambda > 0.0 {
        Poisson::new(cpg.lambda)
            .map(|d| d.sample(rng))
            .unwrap_or(0.0)
    } else {
        0.0
    };
    if n == 0.0 {
        return 0.0;
    }
    Gamma::new(n * cpg.alpha, 1.0 / cpg.rate)
        .map(|g| g.sample(rng))
        .unwrap_or(0.0)
}
