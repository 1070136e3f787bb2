//! Test densities, error metrics and the Monte-Carlo study harness.
//!
//! Nine benchmark mixing densities cover mass near zero, mass far from
//! zero, bimodal mixtures and delta-contaminated variants. For each
//! (case, run) the harness draws intensities, draws counts, runs the whole
//! pipeline, applies the requested selection rules and records the density
//! error `Delta_g` and the frequency error `Delta_nu`. Runs are independent
//! with per-run RNG substreams, so a study is reproducible bit for bit from
//! its seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::ContinuousCDF;

use crate::dictionary::{
    gamma_pdf, gram_matrix_from_params, GammaDictionary, GramMatrix, GramRangeFilter,
};
use crate::error::{Error, Result};
use crate::estimator::{predicted_frequencies, EstimatorConfig, MixingDensityEstimate};
use crate::lasso::LassoProblem;
use crate::operator::{build_kernels, inverse_image_set, ZetaGrid};
use crate::sample::CountSample;
use crate::selection::{
    alpha_grid, fit_path, select_dd_l2, select_dd_like, select_opt, SelectionMethod,
};

/// One continuous mixture component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentDist {
    Gamma { shape: f64, scale: f64 },
    Normal { mean: f64, sd: f64 },
    Weibull { shape: f64, scale: f64 },
}

impl ComponentDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Gamma { shape, scale } => shape > 0.0 && scale > 0.0,
            Self::Normal { mean, sd } => mean.is_finite() && sd > 0.0,
            Self::Weibull { shape, scale } => shape > 0.0 && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid component parameters: {self:?}")))
        }
    }

    /// Density at `x >= 0`. Normal components use the plain normal pdf; the
    /// mass they put below zero is negligible for all benchmark cases.
    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            Self::Gamma { shape, scale } => gamma_pdf(x, shape, scale).unwrap_or(0.0),
            Self::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            Self::Weibull { shape, scale } => {
                if x < 0.0 {
                    0.0
                } else if x == 0.0 {
                    if shape > 1.0 {
                        0.0
                    } else if shape == 1.0 {
                        1.0 / scale
                    } else {
                        f64::INFINITY
                    }
                } else {
                    let t = x / scale;
                    shape / scale * t.powf(shape - 1.0) * (-t.powf(shape)).exp()
                }
            }
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        match *self {
            Self::Gamma { shape, scale } => statrs::distribution::Gamma::new(shape, 1.0 / scale)
                .map(|d| d.cdf(x))
                .unwrap_or(0.0),
            Self::Normal { mean, sd } => statrs::distribution::Normal::new(mean, sd)
                .map(|d| d.cdf(x))
                .unwrap_or(0.0),
            Self::Weibull { shape, scale } => statrs::distribution::Weibull::new(shape, scale)
                .map(|d| d.cdf(x))
                .unwrap_or(0.0),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Gamma { shape, scale } => {
                rand_distr::Gamma::new(shape, scale).expect("validated").sample(rng)
            }
            Self::Normal { mean, sd } => {
                // Negative intensities are rejected and redrawn.
                let dist = rand_distr::Normal::new(mean, sd).expect("validated");
                loop {
                    let x = dist.sample(rng);
                    if x >= 0.0 {
                        return x;
                    }
                }
            }
            Self::Weibull { shape, scale } => {
                rand_distr::Weibull::new(scale, shape).expect("validated").sample(rng)
            }
        }
    }
}

/// A benchmark mixing density: optional point mass at zero plus a weighted
/// continuous mixture. Component weights are absolute, so they sum with the
/// point mass to one.
#[derive(Debug, Clone)]
pub struct TestDensity {
    point_mass: f64,
    components: Vec<(f64, ComponentDist)>,
}

impl TestDensity {
    pub fn new(point_mass: f64, components: Vec<(f64, ComponentDist)>) -> Result<Self> {
        if !(0.0..1.0).contains(&point_mass) {
            return Err(Error::Config(format!(
                "point mass must be in [0, 1), got {point_mass}"
            )));
        }
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let mut total = point_mass;
        for (w, dist) in &components {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::Config(format!("component weight must be >= 0, got {w}")));
            }
            dist.validate()?;
            total += w;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "weights and point mass must sum to 1, got {total}"
            )));
        }
        Ok(Self { point_mass, components })
    }

    /// The nine benchmark densities, numbered 1 through 9.
    pub fn case(id: u8) -> Result<Self> {
        use ComponentDist::*;
        match id {
            1 => Self::new(0.0, vec![(1.0, Gamma { shape: 3.0, scale: 1.0 })]),
            2 => Self::new(
                0.0,
                vec![
                    (0.3, Gamma { shape: 3.0, scale: 0.25 }),
                    (0.7, Gamma { shape: 10.0, scale: 0.6 }),
                ],
            ),
            3 => Self::new(0.0, vec![(1.0, Gamma { shape: 1.0, scale: 2.0 })]),
            4 => Self::new(0.0, vec![(1.0, Weibull { shape: 3.0, scale: 2.0 })]),
            5 => Self::new(0.0, vec![(1.0, Normal { mean: 80.0, sd: 1.0 })]),
            6 => Self::new(
                0.0,
                vec![
                    (0.3, Gamma { shape: 2.0, scale: 0.3 }),
                    (0.7, Gamma { shape: 40.0, scale: 1.0 }),
                ],
            ),
            7 => Self::new(0.3, vec![(0.7, Gamma { shape: 40.0, scale: 1.0 })]),
            8 => Self::new(0.2, vec![(0.8, Normal { mean: 80.0, sd: 8.0 })]),
            9 => Self::new(0.2, vec![(0.8, Normal { mean: 20.0, sd: 4.0 })]),
            other => Err(Error::Config(format!(
                "unknown test case {other} (valid cases: 1-9)"
            ))),
        }
    }

    pub fn point_mass(&self) -> f64 {
        self.point_mass
    }

    pub fn components(&self) -> &[(f64, ComponentDist)] {
        &self.components
    }

    /// Value of the continuous part (the point mass excluded) at `lambda`.
    pub fn continuous_value(&self, lambda: f64) -> f64 {
        self.components.iter().map(|(w, d)| w * d.pdf(lambda)).sum()
    }

    /// Continuous mass beyond `lambda_max`; reported as a grid-coverage
    /// diagnostic.
    pub fn tail_mass_beyond(&self, lambda_max: f64) -> f64 {
        self.components
            .iter()
            .map(|(w, d)| w * (1.0 - d.cdf(lambda_max)))
            .sum()
    }
}

/// Draw `n` intensities: zero with the point-mass probability, otherwise
/// from the continuous mixture.
pub fn sample_lambda<R: Rng + ?Sized>(density: &TestDensity, n: usize, rng: &mut R) -> Vec<f64> {
    let continuous_weight: f64 = density.components.iter().map(|(w, _)| w).sum();
    (0..n)
        .map(|_| {
            if density.point_mass > 0.0 && rng.gen_bool(density.point_mass) {
                return 0.0;
            }
            let mut u = rng.gen::<f64>() * continuous_weight;
            for (w, dist) in &density.components {
                if u < *w {
                    return dist.sample(rng);
                }
                u -= w;
            }
            density.components.last().expect("nonempty").1.sample(rng)
        })
        .collect()
}

/// Conditionally independent Poisson draws; a zero intensity yields a zero
/// count.
pub fn sample_counts<R: Rng + ?Sized>(lambdas: &[f64], rng: &mut R) -> Result<Vec<u64>> {
    lambdas
        .iter()
        .map(|&lam| {
            if !lam.is_finite() || lam < 0.0 {
                return Err(Error::Domain(format!("intensity must be >= 0, got {lam}")));
            }
            if lam == 0.0 {
                return Ok(0);
            }
            let draw: f64 = rand_distr::Poisson::new(lam)
                .map_err(|e| Error::Domain(format!("Poisson({lam}): {e}")))?
                .sample(rng);
            Ok(draw as u64)
        })
        .collect()
}

/// `||t - e||^2 / ||t||^2` over aligned values; scale-free in its arguments.
pub fn relative_l2_error(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::Config(format!(
            "length mismatch: {} vs {}",
            truth.len(),
            estimate.len()
        )));
    }
    let denom: f64 = truth.iter().map(|t| t * t).sum();
    if denom == 0.0 {
        return Err(Error::Domain("reference vector is identically zero".into()));
    }
    let num: f64 = truth
        .iter()
        .zip(estimate.iter())
        .map(|(t, e)| (t - e) * (t - e))
        .sum();
    Ok(num / denom)
}

/// Relative integrated density error on the grid `x_i = i h`, `x_i <=
/// lambda_max`. The origin is included only when both the true and the
/// estimated point mass are zero; the point-mass discrepancy itself is not
/// part of the metric.
pub fn delta_g(
    truth: &TestDensity,
    est: &MixingDensityEstimate,
    h: f64,
    lambda_max: f64,
) -> Result<f64> {
    if !(h > 0.0) || !(lambda_max >= h) {
        return Err(Error::Config(format!("invalid grid: h = {h}, lambda_max = {lambda_max}")));
    }
    let start = if est.pi0 == 0.0 && truth.point_mass() == 0.0 { 0 } else { 1 };
    let count = (lambda_max / h).floor() as usize;
    let grid: Vec<f64> = (start..=count).map(|i| i as f64 * h).collect();
    let true_values: Vec<f64> = grid.iter().map(|&x| truth.continuous_value(x)).collect();
    let est_values = crate::estimator::evaluate_density(est, &grid)?;
    relative_l2_error(&true_values, &est_values)
}

/// Relative error between observed and predicted frequencies over
/// `l = 0..max(Y)`.
pub fn delta_nu(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    relative_l2_error(observed, predicted)
}

/// Everything a Monte-Carlo study needs.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub cases: Vec<u8>,
    pub n: usize,
    pub runs: usize,
    pub methods: Vec<SelectionMethod>,
    pub seed: u64,
    /// Dictionary shape grid.
    pub a_values: Vec<f64>,
    /// Dictionary scale grid.
    pub b_values: Vec<f64>,
    /// Evaluation grid step.
    pub h: f64,
    pub path_size: usize,
    pub zeta: ZetaGrid,
    /// Bypass path selection and fit a single penalty level.
    pub fixed_alpha: Option<f64>,
}

impl StudyConfig {
    /// Desk-scale defaults: the full dictionary (`a = 2..150`,
    /// `b = 0.1..0.95` by 0.05), grid step 0.5, all three selection rules.
    pub fn desk(cases: Vec<u8>, n: usize, runs: usize, seed: u64) -> Self {
        Self {
            cases,
            n,
            runs,
            methods: vec![SelectionMethod::Opt, SelectionMethod::DdL2, SelectionMethod::DdLike],
            seed,
            a_values: crate::dictionary::arange(2.0, 150.0, 1.0),
            b_values: crate::dictionary::arange(0.1, 0.95, 0.05),
            h: 0.5,
            path_size: 50,
            zeta: ZetaGrid::default(),
            fixed_alpha: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.cases.is_empty() {
            return Err(Error::Config("case list must be nonempty".into()));
        }
        for &c in &self.cases {
            TestDensity::case(c)?;
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("sample size must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list must be nonempty".into()));
        }
        if self.path_size < 2 {
            return Err(Error::Config("path size must be >= 2".into()));
        }
        Ok(())
    }

    fn params(&self) -> Result<Vec<(f64, f64)>> {
        // Same validation and enumeration order as a built dictionary.
        let config = crate::dictionary::DictionaryConfig::new(
            self.a_values.clone(),
            self.b_values.clone(),
            self.h.max(1.0),
            self.h,
        )?;
        let mut params = Vec::with_capacity(config.p());
        for &a in &config.a_values {
            for &b in &config.b_values {
                params.push((a, b));
            }
        }
        Ok(params)
    }
}

/// One (case, run, method) outcome.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub case_id: u8,
    pub run: usize,
    pub method: SelectionMethod,
    pub alpha: f64,
    pub delta_g: f64,
    pub delta_nu: f64,
    pub pi0_hat: f64,
    pub pi0_true: f64,
    /// Continuous mass of the truth beyond the evaluation grid.
    pub coverage_tail: f64,
}

/// A run that failed; excluded from the aggregates.
#[derive(Debug, Clone)]
pub struct RunFailure {
    pub case_id: u8,
    pub run: usize,
    pub message: String,
}

/// Mean / standard deviation of both metrics for one (case, method) cell.
#[derive(Debug, Clone)]
pub struct CellStats {
    pub case_id: u8,
    pub method: SelectionMethod,
    pub mean_delta_g: f64,
    pub sd_delta_g: f64,
    pub mean_delta_nu: f64,
    pub sd_delta_nu: f64,
    pub mean_abs_pi0_error: f64,
    pub runs_used: usize,
}

/// Aggregated study output.
#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
    pub cases: Vec<u8>,
    pub methods: Vec<SelectionMethod>,
    pub cells: Vec<CellStats>,
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn run_one(
    config: &StudyConfig,
    params: &[(f64, f64)],
    gram: &GramMatrix,
    filter: &GramRangeFilter,
    density: &TestDensity,
    case_id: u8,
    run: usize,
) -> Result<Vec<RunRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(((case_id as u64) << 32) | run as u64);
    let lambdas = sample_lambda(density, config.n, &mut rng);
    let counts = sample_counts(&lambdas, &mut rng)?;
    let sample = CountSample::new(counts)?;

    let l_max = sample.default_truncation();
    let lambda_max = sample.default_lambda_max();
    let dict = GammaDictionary::from_params(params.to_vec(), lambda_max, config.h)?;
    let kernels = build_kernels(&dict, l_max)?;
    let images = inverse_image_set(&kernels, &config.zeta, &sample)?;

    let alphas = match config.fixed_alpha {
        Some(alpha) => vec![alpha],
        None => {
            let probe =
                LassoProblem::new(gram, images.xi_vector(), images.sigma_vector(), 0.0)?;
            alpha_grid(probe.alpha_max(), config.path_size)?
        }
    };
    let base = EstimatorConfig::new(0.0);
    let path = fit_path(&sample, &dict, gram, Some(filter), &images, &base, &alphas)?;

    let coverage_tail = density.tail_mass_beyond(dict.lambda_max());
    let observed = sample.frequencies();
    let mut records = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let selected = match method {
            SelectionMethod::Opt => select_opt(&path, density, config.h, dict.lambda_max())?,
            SelectionMethod::DdL2 => select_dd_l2(&path, &sample)?,
            SelectionMethod::DdLike => select_dd_like(&path, &sample)?,
        };
        let fit = &path.fits[selected.index];
        let predicted = predicted_frequencies(fit, observed.len());
        records.push(RunRecord {
            case_id,
            run,
            method,
            alpha: path.alphas[selected.index],
            delta_g: delta_g(density, fit, config.h, dict.lambda_max())?,
            delta_nu: delta_nu(observed, &predicted)?,
            pi0_hat: fit.pi0,
            pi0_true: density.point_mass(),
            coverage_tail,
        });
    }
    Ok(records)
}

/// Run the full study. Monte-Carlo runs execute in parallel; per-run RNG
/// substreams and ordered aggregation make the report deterministic for a
/// fixed seed.
pub fn run_study(config: &StudyConfig) -> Result<SimulationReport> {
    config.validate()?;
    let params = config.params()?;
    let gram = gram_matrix_from_params(&params)?;
    let filter = GramRangeFilter::new(&gram, GramRangeFilter::DEFAULT_DELTA_REL)?;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &case_id in &config.cases {
        let density = TestDensity::case(case_id)?;
        let outcomes: Vec<std::result::Result<Vec<RunRecord>, String>> = (0..config.runs)
            .into_par_iter()
            .map(|run| {
                run_one(config, &params, &gram, &filter, &density, case_id, run)
                    .map_err(|e| e.to_string())
            })
            .collect();
        for (run, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(mut r) => records.append(&mut r),
                Err(message) => failures.push(RunFailure { case_id, run, message }),
            }
        }
    }

    let mut cells = Vec::new();
    for &case_id in &config.cases {
        for &method in &config.methods {
            let cell: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.case_id == case_id && r.method == method)
                .collect();
            if cell.is_empty() {
                continue;
            }
            let dg: Vec<f64> = cell.iter().map(|r| r.delta_g).collect();
            let dnu: Vec<f64> = cell.iter().map(|r| r.delta_nu).collect();
            let pi_err: Vec<f64> =
                cell.iter().map(|r| (r.pi0_hat - r.pi0_true).abs()).collect();
            let (mean_delta_g, sd_delta_g) = mean_sd(&dg);
            let (mean_delta_nu, sd_delta_nu) = mean_sd(&dnu);
            let (mean_abs_pi0_error, _) = mean_sd(&pi_err);
            cells.push(CellStats {
                case_id,
                method,
                mean_delta_g,
                sd_delta_g,
                mean_delta_nu,
                sd_delta_nu,
                mean_abs_pi0_error,
                runs_used: cell.len(),
            });
        }
    }

    Ok(SimulationReport {
        n: config.n,
        runs: config.runs,
        seed: config.seed,
        cases: config.cases.clone(),
        methods: config.methods.clone(),
        cells,
        records,
        failures,
    })
}

impl SimulationReport {
    /// Summary CSV: one row per (case, method).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,method,mean_dg,sd_dg,mean_dnu,sd_dnu\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                cell.case_id,
                cell.method,
                cell.mean_delta_g,
                cell.sd_delta_g,
                cell.mean_delta_nu,
                cell.sd_delta_nu
            ));
        }
        out
    }

    /// Per-run CSV with one row per (case, run, method).
    pub fn runs_csv(&self) -> String {
        let mut out = String::from(
            "case,run,method,alpha,delta_g,delta_nu,pi0_hat,pi0_true,coverage_tail\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.case_id,
                r.run,
                r.method,
                r.alpha,
                r.delta_g,
                r.delta_nu,
                r.pi0_hat,
                r.pi0_true,
                r.coverage_tail
            ));
        }
        out
    }

    /// Two fixed-width tables (density error, then frequency error) with one
    /// row per case and one column per method, as `mean (sd)`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (title, pick) in [
            ("Delta_g", true),
            ("Delta_nu", false),
        ] {
            out.push_str(&format!(
                "Average {title} over {} runs, n = {} (sd in parentheses)\n",
                self.runs, self.n
            ));
            out.push_str(&format!("{:<8}", "case"));
            for m in &self.methods {
                out.push_str(&format!("{:<20}", m.label()));
            }
            out.push('\n');
            for &case_id in &self.cases {
                out.push_str(&format!("{:<8}", format!("case{case_id}")));
                for &method in &self.methods {
                    let cell = self
                        .cells
                        .iter()
                        .find(|c| c.case_id == case_id && c.method == method);
                    match cell {
                        Some(c) => {
                            let (m, s) = if pick {
                                (c.mean_delta_g, c.sd_delta_g)
                            } else {
                                (c.mean_delta_nu, c.sd_delta_nu)
                            };
                            out.push_str(&format!("{:<20}", format!("{m:.4} ({s:.4})")));
                        }
                        None => out.push_str(&format!("{:<20}", "-")),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        if !self.failures.is_empty() {
            out.push_str(&format!("excluded runs: {}\n", self.failures.len()));
            for f in &self.failures {
                out.push_str(&format!("  case{} run {}: {}\n", f.case_id, f.run, f.message));
            }
        }
        out
    }
}
