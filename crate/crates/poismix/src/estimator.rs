//! The two-step fit: point mass at zero and dictionary coefficients.
//!
//! With inverse images in hand, the coefficient vector solves the weighted
//! Lasso with linear term `r = xi - pi0 * z`, and the point mass is
//! `pi0 = max(0, nu_0 - theta' u)` where `u_k = U_k(0)`. When every
//! dictionary element vanishes at zero (`z = 0`) the linear term does not
//! depend on `pi0` and a single Lasso solve suffices; otherwise the two
//! updates alternate until the point mass hits zero, the coefficients stop
//! moving in the `Phi` norm, or the iteration cap is reached.
//!
//! The estimate is deliberately not renormalized: nothing constrains the
//! coefficient mass or sign, so total mass and negativity are reported as
//! diagnostics instead.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dictionary::{
    gamma_pdf, mixture_weight, z_vector, GammaDictionary, GramMatrix, GramRangeFilter,
};
use crate::error::{Error, Result};
use crate::lasso::{self, LassoProblem};
use crate::operator::InverseImageSet;
use crate::sample::CountSample;

/// Supported serialization schema.
pub const ESTIMATE_SCHEMA_VERSION: u32 = 1;

/// `min(1, max(0, nu_0 - theta' u0))`. The upper clamp keeps the probability
/// interpretation under pathological coefficient vectors.
pub fn estimate_pi0(theta: &DVector<f64>, nu0: f64, u0: &DVector<f64>) -> f64 {
    (nu0 - theta.dot(u0)).clamp(0.0, 1.0)
}

/// Iteration controls for [`fit`].
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// Lasso penalty level.
    pub alpha: f64,
    /// Tolerance on `(theta_j - theta_{j-1})' Phi (theta_j - theta_{j-1})`.
    pub tol: f64,
    /// Cap on alternating steps.
    pub j_max: usize,
    /// Run the alternating loop even when `z = 0`.
    pub force_iterative: bool,
    pub lasso_tol: f64,
    pub lasso_max_iter: usize,
}

impl EstimatorConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            tol: 1e-8,
            j_max: 50,
            force_iterative: false,
            lasso_tol: lasso::DEFAULT_TOL,
            lasso_max_iter: lasso::DEFAULT_MAX_ITER,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.j_max == 0 {
            return Err(Error::Config("j_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// Why the fit stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoppingReason {
    /// `z = 0`: one Lasso solve, no iteration.
    Direct,
    /// The point mass reached zero.
    PointMassZero,
    /// Coefficient change fell below tolerance in the `Phi` norm.
    CoefficientsConverged,
    /// Iteration cap reached.
    MaxIterations,
}

impl std::fmt::Display for StoppingReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Direct => "direct",
            Self::PointMassZero => "point-mass-zero",
            Self::CoefficientsConverged => "coefficients-converged",
            Self::MaxIterations => "max-iterations",
        };
        f.write_str(s)
    }
}

/// Fit diagnostics carried by the estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// `sum_k theta_k`; each element integrates to one, so this is the mass
    /// of the continuous part.
    pub total_mass: f64,
    /// Fraction of grid points where the continuous part is negative.
    pub negativity_index: f64,
    /// Alternating steps used (1 on the direct path).
    pub iterations: usize,
    pub stopping: StoppingReason,
    pub lasso_converged: bool,
    pub lasso_kkt_residual: f64,
    pub lasso_iterations: usize,
}

/// The fitted mixing density: point mass, coefficients, and the dictionary
/// parameters needed to evaluate or serialize it without the original
/// dictionary object.
#[derive(Debug, Clone)]
pub struct MixingDensityEstimate {
    pub pi0: f64,
    pub theta: DVector<f64>,
    pub params: Vec<(f64, f64)>,
    pub grid_h: f64,
    pub grid_lambda_max: f64,
    pub diagnostics: FitDiagnostics,
}

/// Fit from scratch (zero initial coefficients).
pub fn fit(
    sample: &CountSample,
    dict: &GammaDictionary,
    gram: &GramMatrix,
    filter: Option<&GramRangeFilter>,
    images: &InverseImageSet,
    config: &EstimatorConfig,
) -> Result<MixingDensityEstimate> {
    fit_with_init(sample, dict, gram, filter, images, config, None)
}

/// Fit with warm-started coefficients (used along a penalty path).
///
/// When a range filter is supplied the Lasso linear term is passed through
/// it, matching the Moore-Penrose construction of the prediction vector for
/// rank-deficient dictionaries.
pub fn fit_with_init(
    sample: &CountSample,
    dict: &GammaDictionary,
    gram: &GramMatrix,
    filter: Option<&GramRangeFilter>,
    images: &InverseImageSet,
    config: &EstimatorConfig,
    init: Option<&DVector<f64>>,
) -> Result<MixingDensityEstimate> {
    config.validate()?;
    let p = dict.p();
    if images.len() != p || gram.p() != p {
        return Err(Error::Config(format!(
            "dimension mismatch: dictionary {p}, images {}, gram {}",
            images.len(),
            gram.p()
        )));
    }
    let xi = images.xi_vector();
    let sigma = images.sigma_vector();
    let z = z_vector(dict);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(
            "dictionary has elements with unbounded value at zero (shape < 1)".into(),
        ));
    }
    let u0 = DVector::from_iterator(
        p,
        dict.params().iter().map(|&(a, b)| mixture_weight(a, b, 0)),
    );
    let nu0 = sample.nu0();
    let z_is_zero = z.iter().all(|&v| v == 0.0);

    let solve = |r: DVector<f64>, warm: Option<&DVector<f64>>| -> Result<lasso::LassoSolution> {
        let r = match filter {
            Some(f) => f.apply(&r),
            None => r,
        };
        let problem = LassoProblem::new(gram, r, sigma.clone(), config.alpha)?;
        lasso::solve(&problem, warm, config.lasso_tol, config.lasso_max_iter)
    };

    if z_is_zero && !config.force_iterative {
        let sol = solve(xi, init)?;
        let pi0 = estimate_pi0(&sol.theta, nu0, &u0);
        return assemble(dict, pi0, sol, 1, StoppingReason::Direct);
    }

    // Alternating path: pi0^(0) = nu0, then update coefficients and point
    // mass in turn. Re-solving is skipped when the linear term is unchanged,
    // which also makes the z = 0 detour bit-identical to the direct path.
    let mut pi0 = nu0;
    let mut linear = &xi - pi0 * &z;
    let mut sol = solve(linear.clone(), init)?;
    let mut iterations = 1;
    let mut stopping = StoppingReason::MaxIterations;
    for _ in 1..=config.j_max {
        let pi0_next = estimate_pi0(&sol.theta, nu0, &u0);
        let linear_next = &xi - pi0_next * &z;
        let theta_prev = sol.theta.clone();
        if linear_next != linear {
            sol = solve(linear_next.clone(), Some(&theta_prev))?;
            linear = linear_next;
        }
        pi0 = pi0_next;
        iterations += 1;
        if pi0 == 0.0 {
            stopping = StoppingReason::PointMassZero;
            break;
        }
        let diff = &sol.theta - &theta_prev;
        if gram.quadratic_form(&diff) < config.tol {
            stopping = StoppingReason::CoefficientsConverged;
            break;
        }
    }
    assemble(dict, pi0, sol, iterations, stopping)
}

fn assemble(
    dict: &GammaDictionary,
    pi0: f64,
    sol: lasso::LassoSolution,
    iterations: usize,
    stopping: StoppingReason,
) -> Result<MixingDensityEstimate> {
    if sol.theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical("fitted coefficients are not finite".into()));
    }
    let on_grid = dict.evaluate_combination(&sol.theta);
    let negativity_index = if on_grid.is_empty() {
        0.0
    } else {
        on_grid.iter().filter(|&&v| v < 0.0).count() as f64 / on_grid.len() as f64
    };
    Ok(MixingDensityEstimate {
        pi0,
        theta: sol.theta.clone(),
        params: dict.params().to_vec(),
        grid_h: dict.h(),
        grid_lambda_max: dict.lambda_max(),
        diagnostics: FitDiagnostics {
            total_mass: sol.theta.sum(),
            negativity_index,
            iterations,
            stopping,
            lasso_converged: sol.converged,
            lasso_kkt_residual: sol.kkt_residual,
            lasso_iterations: sol.iterations,
        },
    })
}

/// Continuous part `sum_k theta_k phi_k(lambda)` on the given points. The
/// point mass is reported separately (`est.pi0`), never folded into values.
pub fn evaluate_density(est: &MixingDensityEstimate, grid: &[f64]) -> Result<Vec<f64>> {
    let active: Vec<(f64, f64, f64)> = est
        .theta
        .iter()
        .zip(est.params.iter())
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, &(a, b))| (*t, a, b))
        .collect();
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut v = 0.0;
        for &(t, a, b) in &active {
            v += t * gamma_pdf(lambda, a, b)?;
        }
        out.push(v);
    }
    Ok(out)
}

/// Predicted count frequencies
/// `nu_hat_0 = pi0 + sum_k theta_k U_k(0)`, `nu_hat_l = sum_k theta_k U_k(l)`
/// for `l >= 1`.
pub fn predicted_frequencies(est: &MixingDensityEstimate, l_max: usize) -> Vec<f64> {
    assert!(l_max >= 1, "truncation level must be >= 1");
    let mut out = vec![0.0; l_max];
    out[0] = est.pi0;
    for (t, &(a, b)) in est.theta.iter().zip(est.params.iter()) {
        if *t != 0.0 {
            for (l, slot) in out.iter_mut().enumerate() {
                *slot += t * mixture_weight(a, b, l);
            }
        }
    }
    out
}

/// Theoretical penalty level `alpha_0 = (2 sqrt((tau + 1) log p) + 1) / sqrt(n)`.
pub fn theory_alpha0(n: usize, p: f64, tau: f64) -> f64 {
    (2.0 * ((tau + 1.0) * p.ln()).sqrt() + 1.0) / (n as f64).sqrt()
}

/// Sample-size diagnostics from the concentration bound behind the penalty
/// level: the minimal `n` is
/// `N0 = (16 / 9) (tau + 1) log p * max_k ||psi_k||_inf^2 / sigma_k^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryDiagnostics {
    pub alpha0: f64,
    pub n_required: f64,
    pub sample_size_ok: bool,
}

pub fn theory_diagnostics(images: &InverseImageSet, n: usize, tau: f64) -> TheoryDiagnostics {
    let p = images.len() as f64;
    let worst_ratio = images
        .images
        .iter()
        .map(|im| {
            let sup = im.psi.amax();
            if im.sigma > 0.0 {
                (sup / im.sigma).powi(2)
            } else if sup == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    let n_required = 16.0 / 9.0 * (tau + 1.0) * p.ln() * worst_ratio;
    TheoryDiagnostics {
        alpha0: theory_alpha0(n, p, tau),
        n_required,
        sample_size_ok: (n as f64) >= n_required,
    }
}

#[derive(Serialize, Deserialize)]
struct GridSpec {
    h: f64,
    lambda_max: f64,
}

#[derive(Serialize, Deserialize)]
struct EstimateDoc {
    schema_version: u32,
    pi0: f64,
    params: Vec<(f64, f64)>,
    /// Sparse coefficients as (index, value) pairs.
    theta: Vec<(usize, f64)>,
    grid: GridSpec,
    diagnostics: FitDiagnostics,
}

impl MixingDensityEstimate {
    /// Versioned JSON document with sparse coefficients.
    pub fn to_json(&self) -> String {
        let doc = EstimateDoc {
            schema_version: ESTIMATE_SCHEMA_VERSION,
            pi0: self.pi0,
            params: self.params.clone(),
            theta: self
                .theta
                .iter()
                .enumerate()
                .filter(|(_, t)| **t != 0.0)
                .map(|(k, t)| (k, *t))
                .collect(),
            grid: GridSpec { h: self.grid_h, lambda_max: self.grid_lambda_max },
            diagnostics: self.diagnostics.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("estimate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EstimateDoc = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid estimate document: {e}")))?;
        if doc.schema_version != ESTIMATE_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported estimate schema version {} (expected {})",
                doc.schema_version, ESTIMATE_SCHEMA_VERSION
            )));
        }
        let p = doc.params.len();
        let mut theta = DVector::zeros(p);
        for (k, t) in doc.theta {
            if k >= p {
                return Err(Error::Config(format!("coefficient index {k} out of range")));
            }
            theta[k] = t;
        }
        Ok(Self {
            pi0: doc.pi0,
            theta,
            params: doc.params,
            grid_h: doc.grid.h,
            grid_lambda_max: doc.grid.lambda_max,
            diagnostics: doc.diagnostics,
        })
    }
}
