//! Inversion of dictionary elements through the Poisson count operator.
//!
//! The count operator `Q` maps an intensity density to its count pmf,
//! `(Q g)(l) = integral exp(-lambda) lambda^l / l! g(lambda) d lambda`.
//! The composition `Q Q*` acts on count sequences with the closed-form
//! kernel `(Q Q*)_{jl} = C(j + l, l) 2^{-(j + l + 1)}`, and the image of a
//! dictionary element is exactly the mixture-weight row,
//! `(Q phi_k)(l) = U_k(l)`.
//!
//! For each element we solve the Tikhonov system
//! `(Q Q* + zeta I) psi = U_k` over a grid of regularization levels and pick
//! the level where the variance contribution `Var[psi(Y)] / n` balances a
//! plug-in estimate of the squared bias. Since `E psi(Y) ~ <g, phi_k>` at the
//! smallest grid level, the squared bias at level `zeta` is estimated by
//! `(nu' psi_zeta - nu' psi_ref)^2` with `psi_ref` taken at the smallest grid
//! value.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::dictionary::{mixture_weights, GammaDictionary};
use crate::error::{Error, Result};
use crate::sample::CountSample;

/// Grid of candidate regularization levels, stored in ascending order.
#[derive(Debug, Clone)]
pub struct ZetaGrid {
    values: Vec<f64>,
}

impl ZetaGrid {
    /// Accepts a strictly increasing or strictly decreasing list of positive
    /// values; stores it ascending.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("zeta grid must be nonempty".into()));
        }
        if values.iter().any(|&z| !z.is_finite() || z <= 0.0) {
            return Err(Error::Config("zeta grid values must be positive".into()));
        }
        let increasing = values.windows(2).all(|w| w[0] < w[1]);
        let decreasing = values.windows(2).all(|w| w[0] > w[1]);
        if values.len() > 1 && !increasing && !decreasing {
            return Err(Error::Config("zeta grid must be strictly monotone".into()));
        }
        let mut values = values;
        if decreasing {
            values.reverse();
        }
        Ok(Self { values })
    }

    /// `count` logarithmically spaced values from `lo` to `hi`.
    pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && count >= 2) {
            return Err(Error::Config(format!(
                "log-spaced grid needs 0 < lo < hi and count >= 2, got ({lo}, {hi}, {count})"
            )));
        }
        let (llo, lhi) = (lo.ln(), hi.ln());
        let values = (0..count)
            .map(|i| (llo + (lhi - llo) * i as f64 / (count - 1) as f64).exp())
            .collect();
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn smallest(&self) -> f64 {
        self.values[0]
    }

    pub fn largest(&self) -> f64 {
        *self.values.last().expect("nonempty")
    }
}

impl Default for ZetaGrid {
    /// 40 log-spaced levels spanning near-unregularized to fully damped for
    /// a kernel with spectrum in (0, 1].
    fn default() -> Self {
        Self::log_spaced(1e-8, 10.0, 40).expect("valid default grid")
    }
}

/// Closed-form operator kernels for a dictionary at truncation level `L`:
/// the `L x L` matrix `Q Q*`, its spectral decomposition, and the `p x L`
/// right-hand sides `U_k`.
#[derive(Debug, Clone)]
pub struct OperatorKernels {
    qqstar: DMatrix<f64>,
    rhs: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

/// Build the kernels. `Q Q*` entries are evaluated through `ln_gamma` so
/// large binomial coefficients never overflow.
pub fn build_kernels(dict: &GammaDictionary, l_max: usize) -> Result<OperatorKernels> {
    if l_max == 0 {
        return Err(Error::Config("count truncation level must be >= 1".into()));
    }
    let mut qqstar = DMatrix::zeros(l_max, l_max);
    let ln2 = std::f64::consts::LN_2;
    for j in 0..l_max {
        for l in j..l_max {
            let (jf, lf) = (j as f64, l as f64);
            let log = ln_gamma(jf + lf + 1.0)
                - ln_gamma(jf + 1.0)
                - ln_gamma(lf + 1.0)
                - (jf + lf + 1.0) * ln2;
            let v = log.exp();
            qqstar[(j, l)] = v;
            qqstar[(l, j)] = v;
        }
    }
    let rhs = mixture_weights(dict, l_max)?;
    let eig = qqstar.clone().symmetric_eigen();
    Ok(OperatorKernels {
        qqstar,
        rhs,
        eigvecs: eig.eigenvectors,
        eigvals: eig.eigenvalues,
    })
}

impl OperatorKernels {
    pub fn l_max(&self) -> usize {
        self.qqstar.nrows()
    }

    pub fn qqstar(&self) -> &DMatrix<f64> {
        &self.qqstar
    }

    /// `p x L` matrix whose row `k` is the image `(Q phi_k)(l) = U_k(l)`.
    pub fn rhs(&self) -> &DMatrix<f64> {
        &self.rhs
    }

    pub fn u_row(&self, k: usize) -> DVector<f64> {
        self.rhs.row(k).transpose()
    }

    /// Solve `(Q Q* + zeta I) psi = U_k` through the cached spectral
    /// decomposition.
    pub fn tikhonov_solve(&self, k: usize, zeta: f64) -> Result<DVector<f64>> {
        if !zeta.is_finite() || zeta <= 0.0 {
            return Err(Error::Domain(format!("zeta must be > 0, got {zeta}")));
        }
        let w = self.rotate(&self.u_row(k));
        let psi = self.solve_rotated(&w, zeta);
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite Tikhonov solution at k = {k}, zeta = {zeta}"
            )));
        }
        Ok(psi)
    }

    /// `V^T v`.
    fn rotate(&self, v: &DVector<f64>) -> DVector<f64> {
        self.eigvecs.tr_mul(v)
    }

    /// `V diag(1 / (d + zeta)) w` for rotated coordinates `w`.
    fn solve_rotated(&self, w: &DVector<f64>, zeta: f64) -> DVector<f64> {
        let scaled = DVector::from_iterator(
            w.len(),
            w.iter().zip(self.eigvals.iter()).map(|(wi, di)| wi / (di + zeta)),
        );
        &self.eigvecs * scaled
    }
}

/// Regularized inverse image of one dictionary element: the count sequence
/// `psi_k`, the chosen level, and the sample moments of `psi_k(Y)`.
#[derive(Debug, Clone)]
pub struct InverseImage {
    /// `psi_k(l)` for `l = 0..L-1`.
    pub psi: DVector<f64>,
    /// Chosen regularization level.
    pub zeta: f64,
    /// Sample standard deviation of `psi_k(Y)`.
    pub sigma: f64,
    /// Sample mean `xi_k = n^{-1} sum_i psi_k(Y_i)`.
    pub xi: f64,
    /// Set when the sample variance vanished at every grid level.
    pub degenerate: bool,
}

/// Inverse images for every dictionary element plus shared diagnostics.
#[derive(Debug, Clone)]
pub struct InverseImageSet {
    pub images: Vec<InverseImage>,
    /// Observations with counts `>= L` whose `psi` values were clamped to the
    /// last entry.
    pub clamped_observations: usize,
}

impl InverseImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Vector of sample means `xi_k`.
    pub fn xi_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.images.len(), self.images.iter().map(|im| im.xi))
    }

    /// Vector of sample standard deviations `sigma_k` (unfloored).
    pub fn sigma_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.images.len(), self.images.iter().map(|im| im.sigma))
    }
}

/// Select the regularization level for element `k` by balancing
/// `Var[psi(Y)] / n` against the plug-in squared bias, then return the
/// resulting inverse image.
///
/// Counts at or beyond the truncation level contribute through the last
/// `psi` entry. When the sample variance is zero at every level (all counts
/// equal, or a single observation) the image is flagged degenerate and the
/// largest grid level is returned.
pub fn select_zeta(
    kernels: &OperatorKernels,
    k: usize,
    grid: &ZetaGrid,
    sample: &CountSample,
) -> Result<InverseImage> {
    let l_max = kernels.l_max();
    let (nu, _) = sample.clamped_frequencies(l_max);
    select_zeta_with_frequencies(kernels, k, grid, &nu, sample.n())
}

fn select_zeta_with_frequencies(
    kernels: &OperatorKernels,
    k: usize,
    grid: &ZetaGrid,
    nu: &DVector<f64>,
    n: usize,
) -> Result<InverseImage> {
    let w = kernels.rotate(&kernels.u_row(k));
    let nf = n as f64;
    // Bessel-corrected sample variance; zero by convention when n < 2.
    let var_scale = if n >= 2 { nf / (nf - 1.0) } else { 0.0 };

    let mut means = Vec::with_capacity(grid.values().len());
    let mut variances = Vec::with_capacity(grid.values().len());
    for &zeta in grid.values() {
        let psi = kernels.solve_rotated(&w, zeta);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (v, f) in psi.iter().zip(nu.iter()) {
            m1 += f * v;
            m2 += f * v * v;
        }
        if !m1.is_finite() || !m2.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite moments at k = {k}, zeta = {zeta}"
            )));
        }
        means.push(m1);
        variances.push(var_scale * (m2 - m1 * m1).max(0.0));
    }

    let degenerate = variances.iter().all(|&v| v == 0.0);
    let chosen = if degenerate {
        grid.values().len() - 1
    } else {
        let mean_ref = means[0];
        let mut best = 0;
        let mut best_obj = f64::INFINITY;
        for (i, (&m, &v)) in means.iter().zip(variances.iter()).enumerate() {
            let bias_sq = (m - mean_ref) * (m - mean_ref);
            let obj = (v / nf - bias_sq).abs();
            if obj < best_obj {
                best_obj = obj;
                best = i;
            }
        }
        best
    };

    let zeta = grid.values()[chosen];
    let psi = kernels.solve_rotated(&w, zeta);
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite inverse image at k = {k}, zeta = {zeta}"
        )));
    }
    Ok(InverseImage {
        psi,
        zeta,
        sigma: variances[chosen].sqrt(),
        xi: means[chosen],
        degenerate,
    })
}

/// Apply [`select_zeta`] to every dictionary element. Elements are processed
/// in parallel; the result is deterministic for fixed data and grid.
pub fn inverse_image_set(
    kernels: &OperatorKernels,
    grid: &ZetaGrid,
    sample: &CountSample,
) -> Result<InverseImageSet> {
    let (nu, clamped_observations) = sample.clamped_frequencies(kernels.l_max());
    let p = kernels.rhs().nrows();
    let images: Result<Vec<InverseImage>> = (0..p)
        .into_par_iter()
        .map(|k| select_zeta_with_frequencies(kernels, k, grid, &nu, sample.n()))
        .collect();
    Ok(InverseImageSet { images: images?, clamped_observations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::DictionaryConfig;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_dict() -> GammaDictionary {
        let config =
            DictionaryConfig::new(vec![2.0, 3.0, 8.0], vec![0.5, 1.0], 40.0, 0.5).unwrap();
        GammaDictionary::build(&config).unwrap()
    }

    #[test]
    fn kernel_entries_match_closed_form() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 30).unwrap();
        assert_relative_eq!(kernels.qqstar()[(0, 0)], 0.5, max_relative = 1e-12);
        // C(2,1) 2^{-3} = 0.25, and the quadrature oracle for the same entry.
        assert_relative_eq!(kernels.qqstar()[(1, 1)], 0.25, max_relative = 1e-12);
        let h = 0.001;
        let q: f64 = h * (1..200_000)
            .map(|i| {
                let x = i as f64 * h;
                (-2.0 * x).exp() * x * x
            })
            .sum::<f64>();
        assert_relative_eq!(kernels.qqstar()[(1, 1)], q, max_relative = 1e-3);
    }

    #[test]
    fn kernel_row_zero_sums_to_one_in_the_limit() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 60).unwrap();
        let s: f64 = kernels.qqstar().row(0).iter().sum();
        // sum_l 2^{-(l+1)} = 1 - 2^{-L}
        assert!((s - 1.0).abs() < 1e-15 + 2.0f64.powi(-59));
    }

    #[test]
    fn kernel_positive_semidefinite() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 60).unwrap();
        let min = kernels.eigvals.min();
        let trace = kernels.qqstar().trace();
        assert!(min >= -1e-10 * trace, "min eigenvalue {min}");
    }

    #[test]
    fn scalar_system_closed_form() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 1).unwrap();
        let u0 = kernels.rhs()[(0, 0)];
        for zeta in [1e-4, 0.1, 2.0] {
            let psi = kernels.tikhonov_solve(0, zeta).unwrap();
            assert_relative_eq!(psi[0], u0 / (0.5 + zeta), max_relative = 1e-12);
        }
    }

    #[test]
    fn large_zeta_damps_solution() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 40).unwrap();
        for k in 0..dict.p() {
            let zeta = 1e6;
            let psi = kernels.tikhonov_solve(k, zeta).unwrap();
            let bound = kernels.u_row(k).norm() / zeta;
            assert!(psi.norm() <= bound * (1.0 + 1e-10));
        }
    }

    #[test]
    fn solver_residual_is_tiny() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 40).unwrap();
        for k in [0, 3, 5] {
            let zeta = 1e-3;
            let psi = kernels.tikhonov_solve(k, zeta).unwrap();
            let lhs = kernels.qqstar() * &psi + zeta * &psi;
            let u = kernels.u_row(k);
            assert!((lhs - &u).norm() <= 1e-8 * u.norm());
        }
    }

    #[test]
    fn norm_shrinks_and_residual_grows_along_grid() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 40).unwrap();
        let grid = ZetaGrid::default();
        for k in 0..dict.p() {
            let mut last_norm = f64::INFINITY;
            let mut last_res = 0.0;
            for &zeta in grid.values() {
                let psi = kernels.tikhonov_solve(k, zeta).unwrap();
                let norm = psi.norm();
                assert!(norm < last_norm, "norm not strictly decreasing at k={k}");
                let res = (kernels.qqstar() * &psi - kernels.u_row(k)).norm();
                assert!(
                    res >= last_res - 1e-14,
                    "residual decreased at k={k}, zeta={zeta}"
                );
                last_norm = norm;
                last_res = res;
            }
        }
    }

    #[test]
    fn zeta_grid_validation() {
        assert!(ZetaGrid::new(vec![]).is_err());
        assert!(ZetaGrid::new(vec![1.0, 1.0]).is_err());
        assert!(ZetaGrid::new(vec![1.0, 0.5, 2.0]).is_err());
        assert!(ZetaGrid::new(vec![0.0, 1.0]).is_err());
        let descending = ZetaGrid::new(vec![1.0, 0.1, 0.01]).unwrap();
        assert_eq!(descending.values(), &[0.01, 0.1, 1.0]);
        assert_eq!(ZetaGrid::default().values().len(), 40);
    }

    #[test]
    fn singleton_grid_forces_choice() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 20).unwrap();
        let grid = ZetaGrid::new(vec![0.37]).unwrap();
        let sample = CountSample::new(vec![0, 1, 2, 3, 4, 2, 1]).unwrap();
        let image = select_zeta(&kernels, 0, &grid, &sample).unwrap();
        assert_eq!(image.zeta, 0.37);
        assert!(!image.degenerate);
    }

    #[test]
    fn constant_data_is_degenerate() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 20).unwrap();
        let grid = ZetaGrid::default();
        let sample = CountSample::new(vec![3; 50]).unwrap();
        let image = select_zeta(&kernels, 1, &grid, &sample).unwrap();
        assert!(image.degenerate);
        assert_eq!(image.zeta, grid.largest());
        assert_eq!(image.sigma, 0.0);
    }

    #[test]
    fn single_observation_takes_degenerate_path() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 20).unwrap();
        let grid = ZetaGrid::default();
        let sample = CountSample::new(vec![7]).unwrap();
        let image = select_zeta(&kernels, 0, &grid, &sample).unwrap();
        assert!(image.degenerate);
    }

    #[test]
    fn permuting_data_leaves_images_unchanged() {
        let dict = small_dict();
        let kernels = build_kernels(&dict, 25).unwrap();
        let grid = ZetaGrid::default();
        let counts = vec![0, 4, 2, 2, 9, 1, 0, 3, 5, 2, 1, 1];
        let mut shuffled = counts.clone();
        shuffled.reverse();
        shuffled.swap(0, 5);
        let a = inverse_image_set(&kernels, &grid, &CountSample::new(counts).unwrap()).unwrap();
        let b = inverse_image_set(&kernels, &grid, &CountSample::new(shuffled).unwrap()).unwrap();
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(x.zeta, y.zeta);
            assert_eq!(x.sigma, y.sigma);
            assert_eq!(x.xi, y.xi);
        }
    }

    #[test]
    fn doubling_sample_size_halves_variance_share() {
        // V(zeta)/n at fixed zeta should shrink by roughly half when n doubles.
        let dict = small_dict();
        let kernels = build_kernels(&dict, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 4000;
        let draw = |rng: &mut ChaCha8Rng| -> u64 {
            // counts from a gamma(3, 1) mixture of Poissons
            let lam: f64 = rand_distr::Gamma::new(3.0, 1.0).unwrap().sample(rng);
            rand_distr::Poisson::new(lam.max(1e-12)).unwrap().sample(rng) as u64
        };
        let first: Vec<u64> = (0..n).map(|_| draw(&mut rng)).collect();
        let mut doubled = first.clone();
        doubled.extend((0..n).map(|_| draw(&mut rng)));

        let zeta = 1e-3;
        let grid = ZetaGrid::new(vec![zeta]).unwrap();
        let im1 = select_zeta(&kernels, 2, &grid, &CountSample::new(first).unwrap()).unwrap();
        let im2 = select_zeta(&kernels, 2, &grid, &CountSample::new(doubled).unwrap()).unwrap();
        let share1 = im1.sigma * im1.sigma / n as f64;
        let share2 = im2.sigma * im2.sigma / (2 * n) as f64;
        let ratio = share1 / share2;
        assert!((1.4..=2.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn balance_objective_is_roughly_unimodal() {
        // Sweep the balance objective on gamma(3, 1) data and check it does
        // not oscillate: at most a few sign changes of the filtered slope.
        let dict = small_dict();
        let kernels = build_kernels(&dict, 30).unwrap();
        let grid = ZetaGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lam_dist = rand_distr::Gamma::new(3.0, 1.0).unwrap();
        let counts: Vec<u64> = (0..5000)
            .map(|_| {
                let lam: f64 = lam_dist.sample(&mut rng);
                rand_distr::Poisson::new(lam.max(1e-12)).unwrap().sample(&mut rng) as u64
            })
            .collect();
        let sample = CountSample::new(counts).unwrap();
        let n = sample.n() as f64;
        let (nu, _) = sample.clamped_frequencies(kernels.l_max());

        for k in 0..dict.p() {
            let w = kernels.rotate(&kernels.u_row(k));
            let mut objective = Vec::new();
            let mut mean_ref = None;
            for &zeta in grid.values() {
                let psi = kernels.solve_rotated(&w, zeta);
                let m1: f64 = psi.iter().zip(nu.iter()).map(|(v, f)| f * v).sum();
                let m2: f64 = psi.iter().zip(nu.iter()).map(|(v, f)| f * v * v).sum();
                let var = n / (n - 1.0) * (m2 - m1 * m1).max(0.0);
                let mref = *mean_ref.get_or_insert(m1);
                objective.push((var / n - (m1 - mref) * (m1 - mref)).abs());
            }
            let scale = objective.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
            let mut signs = Vec::new();
            for pair in objective.windows(2) {
                let d = pair[1] - pair[0];
                if d.abs() > 1e-3 * scale {
                    signs.push(d > 0.0);
                }
            }
            let changes = signs.windows(2).filter(|s| s[0] != s[1]).count();
            assert!(changes <= 3, "objective oscillates for k = {k}: {changes} changes");
        }
    }

    #[test]
    fn discrete_kernel_consistency_away_from_origin() {
        // h * (Q_disc Q_disc^T) approximates the closed-form kernel. Entries
        // with j + l >= 1 carry O(h^2) quadrature error and meet the stated
        // bounds; the (0, 0) integrand does not vanish at the excluded origin,
        // leaving the h * f(0) / 2 boundary term of the rectangle rule.
        for (h, tol) in [(0.5, 0.02), (0.1, 0.005)] {
            let l_top = 21usize;
            let n = (100.0 / h) as usize;
            let mut max_err = 0.0f64;
            for j in 0..l_top {
                for l in 0..l_top {
                    let mut s = 0.0;
                    for i in 1..=n {
                        let x = i as f64 * h;
                        let log = -2.0 * x + (j + l) as f64 * x.ln()
                            - ln_gamma(j as f64 + 1.0)
                            - ln_gamma(l as f64 + 1.0);
                        s += log.exp();
                    }
                    let disc = h * s;
                    let closed = (ln_gamma((j + l) as f64 + 1.0)
                        - ln_gamma(j as f64 + 1.0)
                        - ln_gamma(l as f64 + 1.0)
                        - ((j + l + 1) as f64) * std::f64::consts::LN_2)
                        .exp();
                    let err = (disc - closed).abs();
                    if j + l >= 1 {
                        max_err = max_err.max(err);
                    } else {
                        // Boundary term h * f(0) / 2 dominates at (0, 0).
                        assert!(
                            (err - h / 2.0).abs() <= 0.25 * (h / 2.0),
                            "unexpected (0,0) deviation {err} at h = {h}"
                        );
                    }
                }
            }
            assert!(max_err <= tol, "max error {max_err} exceeds {tol} at h = {h}");
        }
    }
}
