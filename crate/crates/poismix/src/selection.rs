//! Penalty selection along a decreasing alpha path.
//!
//! Three rules choose the Lasso penalty from the same warm-started path:
//!
//! * `OPT` — oracle: minimizes the relative density error against the true
//!   density, so it is available only in simulations;
//! * `DD_l2` — minimizes the relative error between observed and predicted
//!   count frequencies;
//! * `DD_like` — maximizes the multinomial log-likelihood
//!   `sum_l nu_l log nu_hat_l` over observed counts.
//!
//! Ties break toward larger alpha (the sparser model).

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::estimator::{
    fit_with_init, predicted_frequencies, EstimatorConfig, MixingDensityEstimate,
};
use crate::dictionary::{GammaDictionary, GramMatrix, GramRangeFilter};
use crate::operator::InverseImageSet;
use crate::sample::CountSample;
use crate::simulation::{self, TestDensity};

/// Penalty-selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    Opt,
    DdL2,
    DdLike,
}

impl SelectionMethod {
    /// Table-style label.
    pub fn label(&self) -> &'static str {
        match self {
            Self::Opt => "OPT",
            Self::DdL2 => "DD_l2",
            Self::DdLike => "DD_like",
        }
    }
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Opt => "opt",
            Self::DdL2 => "dd-l2",
            Self::DdLike => "dd-like",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opt" => Ok(Self::Opt),
            "dd-l2" => Ok(Self::DdL2),
            "dd-like" => Ok(Self::DdLike),
            other => Err(Error::Config(format!(
                "unknown selection method '{other}' (expected opt, dd-l2 or dd-like)"
            ))),
        }
    }
}

/// Logarithmically spaced penalty candidates from `alpha_max` down to
/// `1e-4 * alpha_max`. A zero `alpha_max` collapses to the single candidate 0.
pub fn alpha_grid(alpha_max: f64, size: usize) -> Result<Vec<f64>> {
    if !alpha_max.is_finite() || alpha_max < 0.0 {
        return Err(Error::Domain(format!("alpha_max must be >= 0, got {alpha_max}")));
    }
    if alpha_max == 0.0 {
        return Ok(vec![0.0]);
    }
    if size < 2 {
        return Err(Error::Config(format!("path size must be >= 2, got {size}")));
    }
    let hi = alpha_max.ln();
    let lo = (1e-4 * alpha_max).ln();
    Ok((0..size)
        .map(|i| (hi + (lo - hi) * i as f64 / (size - 1) as f64).exp())
        .collect())
}

/// A decreasing penalty path with one fit per candidate.
#[derive(Debug, Clone)]
pub struct AlphaPath {
    pub alphas: Vec<f64>,
    pub fits: Vec<MixingDensityEstimate>,
}

impl AlphaPath {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Relative frequency errors, one per candidate, over `l = 0..max(Y)`.
    pub fn delta_nu_scores(&self, sample: &CountSample) -> Result<Vec<f64>> {
        let observed = sample.frequencies();
        self.fits
            .iter()
            .map(|fit| {
                let predicted = predicted_frequencies(fit, observed.len());
                simulation::delta_nu(observed, &predicted)
            })
            .collect()
    }

    /// Log-likelihood scores `sum_{nu_l > 0} nu_l log nu_hat_l`; candidates
    /// with a nonpositive predicted frequency at an observed count score
    /// negative infinity.
    pub fn log_like_scores(&self, sample: &CountSample) -> Vec<f64> {
        let observed = sample.frequencies();
        self.fits
            .iter()
            .map(|fit| {
                let predicted = predicted_frequencies(fit, observed.len());
                let mut score = 0.0;
                for (nu, nu_hat) in observed.iter().zip(predicted.iter()) {
                    if *nu > 0.0 {
                        if *nu_hat <= 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        score += nu * nu_hat.ln();
                    }
                }
                score
            })
            .collect()
    }

    /// Relative density errors against a known truth, one per candidate.
    pub fn delta_g_scores(
        &self,
        truth: &TestDensity,
        h: f64,
        lambda_max: f64,
    ) -> Result<Vec<f64>> {
        self.fits
            .iter()
            .map(|fit| simulation::delta_g(truth, fit, h, lambda_max))
            .collect()
    }
}

/// Fit every candidate, warm-starting each solve from the previous solution.
pub fn fit_path(
    sample: &CountSample,
    dict: &GammaDictionary,
    gram: &GramMatrix,
    filter: Option<&GramRangeFilter>,
    images: &InverseImageSet,
    base: &EstimatorConfig,
    alphas: &[f64],
) -> Result<AlphaPath> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha path must be nonempty".into()));
    }
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::Config("alpha candidates must be >= 0".into()));
    }
    if alphas.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config("alpha candidates must be strictly decreasing".into()));
    }
    let mut fits = Vec::with_capacity(alphas.len());
    let mut warm: Option<DVector<f64>> = None;
    for &alpha in alphas {
        let mut config = base.clone();
        config.alpha = alpha;
        let est = fit_with_init(sample, dict, gram, filter, images, &config, warm.as_ref())?;
        warm = Some(est.theta.clone());
        fits.push(est);
    }
    Ok(AlphaPath { alphas: alphas.to_vec(), fits })
}

/// Outcome of a selection rule.
#[derive(Debug, Clone, Copy)]
pub struct Selected {
    /// Index into the path.
    pub index: usize,
    /// The criterion value at the chosen candidate.
    pub score: f64,
    /// Set when `DD_like` had no usable candidate and fell back to `DD_l2`.
    pub fallback: bool,
}

fn argmin_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// Choose the candidate minimizing the frequency error.
pub fn select_dd_l2(path: &AlphaPath, sample: &CountSample) -> Result<Selected> {
    if path.is_empty() {
        return Err(Error::Config("cannot select from an empty path".into()));
    }
    let scores = path.delta_nu_scores(sample)?;
    let index = argmin_first(&scores);
    Ok(Selected { index, score: scores[index], fallback: false })
}

/// Choose the candidate maximizing the frequency log-likelihood. Falls back
/// to [`select_dd_l2`] when every candidate is infeasible.
pub fn select_dd_like(path: &AlphaPath, sample: &CountSample) -> Result<Selected> {
    if path.is_empty() {
        return Err(Error::Config("cannot select from an empty path".into()));
    }
    let scores = path.log_like_scores(sample);
    if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
        let fallback = select_dd_l2(path, sample)?;
        return Ok(Selected { fallback: true, ..fallback });
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(Selected { index: best, score: scores[best], fallback: false })
}

/// Oracle choice: minimize the relative density error against the truth.
pub fn select_opt(
    path: &AlphaPath,
    truth: &TestDensity,
    h: f64,
    lambda_max: f64,
) -> Result<Selected> {
    if path.is_empty() {
        return Err(Error::Config("cannot select from an empty path".into()));
    }
    let scores = path.delta_g_scores(truth, h, lambda_max)?;
    let index = argmin_first(&scores);
    Ok(Selected { index, score: scores[index], fallback: false })
}
