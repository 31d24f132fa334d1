//! HPS estimator, its baselines and empirical risk evaluation.
//!
//! For two tasks the HPS estimator at output-layer ratio `a` is
//! `beta(a) = (a^2 X1'X1 + X2'X2)^{-1} (a X1'Y1 + X2'Y2)`; `a = 0` is target OLS.

use crate::error::{Error, Result};
use crate::model::{CovarianceSpec, Dataset};
use crate::roots::golden_section;
use crate::scalar::{lit, Scalar};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Grid-then-refine search settings for the output-layer ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub lo: f64,
    pub hi: f64,
    pub grid_points: usize,
    pub width: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { lo: -10.0, hi: 10.0, grid_points: 201, width: 1e-6 }
    }
}

/// Result of fitting HPS with the ratio chosen by the training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct HpsSolution<T: Scalar> {
    pub a_hat: T,
    pub beta_hat: DVector<T>,
    pub objective_value: T,
}

/// Bias/variance summary for the target task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskReport<T: Scalar> {
    pub excess_risk: T,
    pub bias: T,
    pub variance: T,
    pub a: T,
    pub replicates: usize,
    /// Standard error of `excess_risk`; zero for a single replicate.
    pub stderr: T,
}

impl<T: Scalar> RiskReport<T> {
    /// Mean over replicates, with the standard error of the excess risk.
    pub fn aggregate(reports: &[RiskReport<T>]) -> Option<Self> {
        let first = reports.first()?;
        let k: T = lit(reports.len() as f64);
        let mean = |f: &dyn Fn(&RiskReport<T>) -> T| reports.iter().map(f).fold(T::zero(), |a, b| a + b) / k;
        let excess = mean(&|r| r.excess_risk);
        let stderr = if reports.len() > 1 {
            let ss = reports.iter().map(|r| (r.excess_risk - excess).powi(2)).fold(T::zero(), |a, b| a + b);
            (ss / (k - T::one()) / k).sqrt()
        } else {
            T::zero()
        };
        Some(RiskReport {
            excess_risk: excess,
            bias: mean(&|r| r.bias),
            variance: mean(&|r| r.variance),
            a: first.a,
            replicates: reports.iter().map(|r| r.replicates).sum(),
            stderr,
        })
    }
}

fn condition_estimate<T: Scalar>(m: &DMatrix<T>) -> f64 {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if lo <= T::zero() {
        f64::INFINITY
    } else {
        (hi / lo).as_f64()
    }
}

/// Cholesky factor of an SPD matrix, or a singularity error with a condition estimate.
pub fn spd_factor<T: Scalar>(m: &DMatrix<T>, context: &'static str) -> Result<Cholesky<T, Dyn>> {
    match Cholesky::new(m.clone()) {
        Some(c) => {
            let d = c.l_dirty().diagonal();
            let (lo, hi) = (d.min(), d.max());
            if lo <= hi * lit(1e-7) {
                Err(Error::Singular { context, condition: (hi / lo).as_f64().powi(2) })
            } else {
                Ok(c)
            }
        }
        None => Err(Error::Singular { context, condition: condition_estimate(m) }),
    }
}

/// Ordinary least squares.
pub fn fit_ols<T: Scalar>(d: &Dataset<T>) -> Result<DVector<T>> {
    let gram = d.x.tr_mul(&d.x);
    let chol = spd_factor(&gram, "ordinary least squares")?;
    Ok(chol.solve(&d.x.tr_mul(&d.y)))
}

/// Weighted Gram matrix `a^2 X1'X1 + X2'X2`, checked to be numerically SPD.
pub fn sigma_hat<T: Scalar>(a: T, d1: &Dataset<T>, d2: &Dataset<T>) -> Result<DMatrix<T>> {
    check_pair(d1, d2)?;
    let gram = d1.x.tr_mul(&d1.x) * (a * a) + d2.x.tr_mul(&d2.x);
    spd_factor(&gram, "weighted Gram matrix")?;
    Ok(gram)
}

/// Ridge regression minimising `|X b - y|^2 + k |b|^2`.
pub fn fit_ridge<T: Scalar>(d: &Dataset<T>, k: T) -> Result<DVector<T>> {
    if !(k >= T::zero()) {
        return Err(Error::InvalidInput(format!("ridge penalty must be non-negative, got {k}")));
    }
    let mut gram = d.x.tr_mul(&d.x);
    for i in 0..gram.nrows() {
        gram[(i, i)] += k;
    }
    let chol = spd_factor(&gram, "ridge regression")?;
    Ok(chol.solve(&d.x.tr_mul(&d.y)))
}

/// Weighted average `b * source + (1 - b) * target` of two OLS fits.
pub fn fit_avg<T: Scalar>(source_ols: &DVector<T>, target_ols: &DVector<T>, b: T) -> DVector<T> {
    source_ols * b + target_ols * (T::one() - b)
}

/// Picks the candidate with the smallest validation MSE.
/// Ties go to the smaller hyperparameter. Returns `(index, mse)`.
pub fn select_hyperparam<T: Scalar>(candidates: &[(T, DVector<T>)], validation: &Dataset<T>) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, (param, beta)) in candidates.iter().enumerate() {
        let mse = validation.mse(beta);
        best = match best {
            None => Some((i, mse)),
            Some((j, m)) if mse < m || (mse == m && *param < candidates[j].0) => Some((i, mse)),
            keep => keep,
        };
    }
    best
}

/// Excess risk `(b - beta)' Sigma (b - beta)` on the target distribution.
pub fn excess_risk<T: Scalar>(beta_hat: &DVector<T>, beta: &DVector<T>, cov: &CovarianceSpec<T>) -> T {
    cov.quad_form(&(beta_hat - beta))
}

/// HPS estimate at a fixed ratio `a`, through one Cholesky solve of `a^2 X1'X1 + X2'X2`.
pub fn fit_hps_fixed_a<T: Scalar>(d1: &Dataset<T>, d2: &Dataset<T>, a: T) -> Result<HpsSolution<T>> {
    check_pair(d1, d2)?;
    let gram = d1.x.tr_mul(&d1.x) * (a * a) + d2.x.tr_mul(&d2.x);
    let rhs = d1.x.tr_mul(&d1.y) * a + d2.x.tr_mul(&d2.y);
    let beta_hat = spd_factor(&gram, "HPS normal equations")?.solve(&rhs);
    let objective_value = (&d1.x * &beta_hat * a - &d1.y).norm_squared() + (&d2.x * &beta_hat - &d2.y).norm_squared();
    Ok(HpsSolution { a_hat: a, beta_hat, objective_value })
}

fn check_pair<T: Scalar>(d1: &Dataset<T>, d2: &Dataset<T>) -> Result<()> {
    if d1.p() != d2.p() {
        return Err(Error::DimensionMismatch { context: "task dimensions", expected: d2.p(), found: d1.p() });
    }
    if d2.n() <= d2.p() {
        return Err(Error::InvalidInput(format!("target task needs n2 > p (n2 = {}, p = {})", d2.n(), d2.p())));
    }
    Ok(())
}

/// Sufficient statistics of a task pair, jointly diagonalised so that the HPS
/// estimate, training objective and variance trace cost `O(p)` or `O(p^2)` per ratio.
///
/// With `W' X2'X2 W = I` and `W' X1'X1 W = diag(lam)`,
/// `(a^2 X1'X1 + X2'X2)^{-1} = W diag(1 / (a^2 lam + 1)) W'`.
#[derive(Debug, Clone)]
pub struct HpsProfile<T: Scalar> {
    pub gram1: DMatrix<T>,
    w: DMatrix<T>,
    lam: DVector<T>,
    u1: DVector<T>,
    u2: DVector<T>,
    yy: T,
}

impl<T: Scalar> HpsProfile<T> {
    pub fn new(d1: &Dataset<T>, d2: &Dataset<T>) -> Result<Self> {
        check_pair(d1, d2)?;
        let gram1 = d1.x.tr_mul(&d1.x);
        let gram2 = d2.x.tr_mul(&d2.x);
        let l = spd_factor(&gram2, "target Gram matrix")?.l();
        let half = l.solve_lower_triangular(&gram1).ok_or(Error::Singular { context: "joint diagonalisation", condition: f64::INFINITY })?;
        let full = l.solve_lower_triangular(&half.transpose()).ok_or(Error::Singular { context: "joint diagonalisation", condition: f64::INFINITY })?;
        let sym = (&full + full.transpose()) * lit::<T>(0.5);
        let eig = SymmetricEigen::new(sym);
        let w =
            l.transpose().solve_upper_triangular(&eig.eigenvectors).ok_or(Error::Singular { context: "joint diagonalisation", condition: f64::INFINITY })?;
        let lam = eig.eigenvalues.map(|v| v.max(T::zero()));
        let u1 = w.tr_mul(&d1.x.tr_mul(&d1.y));
        let u2 = w.tr_mul(&d2.x.tr_mul(&d2.y));
        let yy = d1.y.norm_squared() + d2.y.norm_squared();
        Ok(HpsProfile { gram1, w, lam, u1, u2, yy })
    }

    fn weights(&self, a: T) -> DVector<T> {
        DVector::from_iterator(
            self.lam.len(),
            self.lam.iter().zip(self.u1.iter().zip(self.u2.iter())).map(|(l, (u1, u2))| (a * *u1 + *u2) / (a * a * *l + T::one())),
        )
    }

    /// `beta(a)`.
    pub fn beta(&self, a: T) -> DVector<T> {
        &self.w * self.weights(a)
    }

    /// Training objective `|a X1 beta(a) - Y1|^2 + |X2 beta(a) - Y2|^2`.
    pub fn objective(&self, a: T) -> T {
        let fit = self
            .lam
            .iter()
            .zip(self.u1.iter().zip(self.u2.iter()))
            .map(|(l, (u1, u2))| (a * *u1 + *u2).powi(2) / (a * a * *l + T::one()))
            .fold(T::zero(), |x, y| x + y);
        (self.yy - fit).max(T::zero())
    }

    /// Diagonal of `W' Sigma2 W`, the per-direction weights of the variance trace.
    pub fn variance_weights(&self, cov2: &CovarianceSpec<T>) -> DVector<T> {
        let s = cov2.to_matrix();
        let sw = &s * &self.w;
        DVector::from_iterator(self.w.ncols(), (0..self.w.ncols()).map(|k| self.w.column(k).dot(&sw.column(k))))
    }

    /// `tr[Sigma2 Sigma_hat(a)^{-1}]` given [`Self::variance_weights`].
    pub fn variance_trace(&self, weights: &DVector<T>, a: T) -> T {
        weights.iter().zip(self.lam.iter()).map(|(s, l)| *s / (a * a * *l + T::one())).fold(T::zero(), |x, y| x + y)
    }

    /// `|Sigma2^{1/2} Sigma_hat(a)^{-1} X1'X1 (a beta1 - a^2 beta2)|^2`.
    pub fn bias(&self, a: T, beta1: &DVector<T>, beta2: &DVector<T>, cov2: &CovarianceSpec<T>) -> T {
        let v = &self.gram1 * ((beta1 - beta2 * a) * a);
        let wv = self.w.tr_mul(&v);
        let scaled = DVector::from_iterator(wv.len(), wv.iter().zip(self.lam.iter()).map(|(x, l)| *x / (a * a * *l + T::one())));
        cov2.quad_form(&(&self.w * scaled))
    }

    /// Grid search over `[lo, hi]` followed by golden-section refinement around the best grid point.
    /// Ties on the grid resolve to the smallest `|a|`.
    pub fn search(&self, cfg: &SearchConfig) -> Result<(T, T)> {
        if cfg.grid_points < 2 || !(cfg.hi > cfg.lo) {
            return Err(Error::InvalidInput("search needs at least two grid points on a non-empty interval".into()));
        }
        let lo: T = lit(cfg.lo);
        let step: T = lit((cfg.hi - cfg.lo) / (cfg.grid_points - 1) as f64);
        let grid: Vec<(T, T)> = (0..cfg.grid_points)
            .map(|i| {
                let a = lo + step * lit(i as f64);
                (a, self.objective(a))
            })
            .collect();
        let gmin = grid.iter().map(|g| g.1).fold(T::max_value().unwrap(), |x, y| x.min(y));
        if !gmin.is_finite() {
            return Err(Error::NonFinite("HPS objective"));
        }
        let tie = gmin.abs() * lit(1e-12) + lit(1e-300f64.max(T::eps().as_f64() * 1e-100));
        let (mut best_a, mut best_g) = grid
            .iter()
            .filter(|g| g.1 <= gmin + tie)
            .copied()
            .min_by(|x, y| x.0.abs().partial_cmp(&y.0.abs()).unwrap().then(y.0.partial_cmp(&x.0).unwrap()))
            .unwrap();
        let left = (best_a - step).max(lo);
        let right = (best_a + step).min(lit(cfg.hi));
        let (a_ref, g_ref) = golden_section(|a| self.objective(a), left, right, lit(cfg.width));
        if g_ref < best_g - tie {
            best_a = a_ref;
            best_g = g_ref;
        }
        Ok((best_a, best_g))
    }
}

/// HPS with the ratio chosen by minimising the training objective.
pub fn fit_hps<T: Scalar>(d1: &Dataset<T>, d2: &Dataset<T>, cfg: &SearchConfig) -> Result<HpsSolution<T>> {
    let profile = HpsProfile::new(d1, d2)?;
    let (a_hat, objective_value) = profile.search(cfg)?;
    Ok(HpsSolution { a_hat, beta_hat: profile.beta(a_hat), objective_value })
}

/// Bias and variance of `beta(a)` given the designs: bias from the coefficient
/// gap, variance `sigma^2 tr[Sigma2 Sigma_hat(a)^{-1}]`. One factorisation serves both.
pub fn empirical_bias_variance<T: Scalar>(
    x1: &DMatrix<T>,
    x2: &DMatrix<T>,
    beta1: &DVector<T>,
    beta2: &DVector<T>,
    cov2: &CovarianceSpec<T>,
    a: T,
    sigma: T,
) -> Result<RiskReport<T>> {
    if x1.ncols() != x2.ncols() {
        return Err(Error::DimensionMismatch { context: "bias-variance designs", expected: x2.ncols(), found: x1.ncols() });
    }
    bias_variance_from_grams(&x1.tr_mul(x1), &x2.tr_mul(x2), beta1, beta2, cov2, a, sigma)
}

/// [`empirical_bias_variance`] from the Gram matrices `X1'X1` and `X2'X2`.
pub fn bias_variance_from_grams<T: Scalar>(
    g1: &DMatrix<T>,
    g2: &DMatrix<T>,
    beta1: &DVector<T>,
    beta2: &DVector<T>,
    cov2: &CovarianceSpec<T>,
    a: T,
    sigma: T,
) -> Result<RiskReport<T>> {
    let p = g2.nrows();
    if g1.nrows() != p || beta1.len() != p || beta2.len() != p || cov2.dim() != p {
        return Err(Error::DimensionMismatch { context: "bias-variance inputs", expected: p, found: beta1.len() });
    }
    let sigma_hat = g1 * (a * a) + g2;
    let chol = spd_factor(&sigma_hat, "HPS normal equations")?;
    let shift = chol.solve(&(g1 * ((beta1 - beta2 * a) * a)));
    let bias = cov2.quad_form(&shift);
    let inv = chol.inverse();
    let trace = match cov2 {
        CovarianceSpec::Identity(_) => inv.trace(),
        CovarianceSpec::Diagonal(d) => d.iter().zip(inv.diagonal().iter()).map(|(s, v)| *s * *v).fold(T::zero(), |x, y| x + y),
        CovarianceSpec::Dense(m) => m.component_mul(&inv).sum(),
    };
    let variance = sigma * sigma * trace;
    Ok(RiskReport { excess_risk: bias + variance, bias, variance, a, replicates: 1, stderr: T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_dataset, NoiseLaw, TaskSpec};
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn pair(seed: u64, n1: usize, n2: usize, p: usize) -> (Dataset<f64>, Dataset<f64>) {
        let b1 = DVector::from_fn(p, |i, _| (i as f64 * 0.37).sin());
        let b2 = DVector::from_fn(p, |i, _| (i as f64 * 0.37).sin() + 0.1 * (i as f64).cos());
        let t1 = TaskSpec::new(n1, CovarianceSpec::paired(p, 4.0, 0.25).unwrap(), b1, 0.5).unwrap();
        let t2 = TaskSpec::new(n2, CovarianceSpec::identity(p), b2, 0.5).unwrap();
        let mut rng = stream(seed, 0);
        (generate_dataset(&t1, NoiseLaw::Gaussian, &mut rng), generate_dataset(&t2, NoiseLaw::Gaussian, &mut rng))
    }

    /// Direct evaluation of the training objective from the definition.
    fn direct_objective(d1: &Dataset<f64>, d2: &Dataset<f64>, a: f64) -> f64 {
        let b = fit_hps_fixed_a(d1, d2, a).unwrap().beta_hat;
        (&d1.x * &b * a - &d1.y).norm_squared() + (&d2.x * &b - &d2.y).norm_squared()
    }

    #[test]
    fn zero_ratio_is_target_ols() {
        let (d1, d2) = pair(1, 40, 30, 8);
        let ols = fit_ols(&d2).unwrap();
        assert_relative_eq!(fit_hps_fixed_a(&d1, &d2, 0.0).unwrap().beta_hat, ols, epsilon = 1e-10);
        assert_relative_eq!(HpsProfile::new(&d1, &d2).unwrap().beta(0.0), ols, epsilon = 1e-10);
    }

    #[test]
    fn unit_ratio_is_pooled_ols() {
        let (d1, d2) = pair(2, 40, 30, 8);
        let pooled = Dataset::new(
            DMatrix::from_rows(&d1.x.row_iter().chain(d2.x.row_iter()).map(|r| r.into_owned()).collect::<Vec<_>>()),
            DVector::from_iterator(70, d1.y.iter().chain(d2.y.iter()).copied()),
        )
        .unwrap();
        assert_relative_eq!(fit_hps_fixed_a(&d1, &d2, 1.0).unwrap().beta_hat, fit_ols(&pooled).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn profile_matches_direct_route() {
        let (d1, d2) = pair(3, 12, 30, 8);
        let prof = HpsProfile::new(&d1, &d2).unwrap();
        let cov2 = CovarianceSpec::identity(8);
        let w = prof.variance_weights(&cov2);
        let b1 = DVector::from_element(8, 0.3);
        let b2 = DVector::from_element(8, -0.1);
        for a in [-2.0, -0.3, 0.5, 1.0, 3.7] {
            assert_relative_eq!(prof.beta(a), fit_hps_fixed_a(&d1, &d2, a).unwrap().beta_hat, epsilon = 1e-9);
            assert_relative_eq!(prof.objective(a), direct_objective(&d1, &d2, a), max_relative = 1e-9);
            let r = empirical_bias_variance(&d1.x, &d2.x, &b1, &b2, &cov2, a, 0.5).unwrap();
            assert_relative_eq!(0.25 * prof.variance_trace(&w, a), r.variance, max_relative = 1e-9);
            assert_relative_eq!(prof.bias(a, &b1, &b2, &cov2), r.bias, max_relative = 1e-8);
        }
    }

    #[test]
    fn search_beats_grid() {
        let (d1, d2) = pair(4, 50, 30, 6);
        let sol = fit_hps(&d1, &d2, &SearchConfig::default()).unwrap();
        for i in 0..=400 {
            let a = -10.0 + 0.05 * i as f64;
            assert!(sol.objective_value <= direct_objective(&d1, &d2, a) * (1.0 + 1e-9));
        }
        assert_relative_eq!(sol.beta_hat, fit_hps_fixed_a(&d1, &d2, sol.a_hat).unwrap().beta_hat, epsilon = 1e-9);
    }

    #[test]
    fn flat_objective_prefers_zero() {
        let (mut d1, d2) = pair(5, 20, 30, 4);
        d1.x.fill(0.0);
        let sol = fit_hps(&d1, &d2, &SearchConfig::default()).unwrap();
        assert_eq!(sol.a_hat, 0.0);
    }

    #[test]
    fn noiseless_identical_tasks_recover_truth() {
        let p = 5;
        let beta = DVector::from_fn(p, |i, _| 1.0 + i as f64);
        let t1 = TaskSpec::new(20, CovarianceSpec::identity(p), beta.clone(), 0.0).unwrap();
        let t2 = TaskSpec::new(20, CovarianceSpec::identity(p), beta.clone(), 0.0).unwrap();
        let mut rng = stream(6, 0);
        let d1 = generate_dataset(&t1, NoiseLaw::Gaussian, &mut rng);
        let d2 = generate_dataset(&t2, NoiseLaw::Gaussian, &mut rng);
        let sol = fit_hps(&d1, &d2, &SearchConfig::default()).unwrap();
        assert!(sol.objective_value < 1e-12);
        assert_relative_eq!(sol.beta_hat, beta, epsilon = 1e-8);
    }

    #[test]
    fn rank_deficient_target_is_singular() {
        let (d1, mut d2) = pair(7, 20, 30, 4);
        d2.x.column_mut(3).fill(0.0);
        match fit_hps_fixed_a(&d1, &Dataset::new(d2.x.clone(), d2.y.clone()).unwrap(), 0.0) {
            Err(Error::Singular { condition, .. }) => assert!(condition > 1e10),
            other => panic!("{other:?}"),
        }
        assert!(fit_ols(&d2).is_err());
    }

    #[test]
    fn ridge_and_avg_limits() {
        let (d1, d2) = pair(8, 40, 30, 6);
        let ols2 = fit_ols(&d2).unwrap();
        assert_relative_eq!(fit_ridge(&d2, 0.0).unwrap(), ols2, epsilon = 1e-10);
        assert!(fit_ridge(&d2, 1e9).unwrap().norm() < 1e-5);
        let ols1 = fit_ols(&d1).unwrap();
        assert_relative_eq!(fit_avg(&ols1, &ols2, 0.0), ols2);
        assert_relative_eq!(fit_avg(&ols1, &ols2, 1.0), ols1);
    }

    #[test]
    fn selection_prefers_smaller_on_ties() {
        let (_, d2) = pair(9, 10, 30, 3);
        let b = DVector::from_element(3, 0.1);
        let cands = vec![(0.5, b.clone()), (0.2, b.clone()), (0.9, DVector::from_element(3, 5.0))];
        assert_eq!(select_hyperparam(&cands, &d2).unwrap().0, 1);
    }

    #[test]
    fn weighted_gram() {
        let (d1, d2) = pair(3, 30, 30, 10);
        let g2 = d2.x.tr_mul(&d2.x);
        assert_eq!(sigma_hat(0.0, &d1, &d2).unwrap(), g2);
        assert_eq!(sigma_hat(1.0, &d1, &d2).unwrap(), sigma_hat(-1.0, &d1, &d2).unwrap());
        let eig = sigma_hat(0.7, &d1, &d2).unwrap().symmetric_eigenvalues();
        assert!(eig.iter().all(|v| *v > 0.0));
        let short = Dataset::new(d2.x.rows(0, 10).into_owned(), d2.y.rows(0, 10).into_owned()).unwrap();
        assert!(sigma_hat(1.0, &d1, &short).is_err());
    }

    #[test]
    fn aggregate_reports() {
        let mk = |e: f64| RiskReport { excess_risk: e, bias: e / 2.0, variance: e / 2.0, a: 1.0, replicates: 1, stderr: 0.0 };
        let agg = RiskReport::aggregate(&[mk(1.0), mk(3.0)]).unwrap();
        assert_eq!(agg.excess_risk, 2.0);
        assert_eq!(agg.replicates, 2);
        assert_relative_eq!(agg.stderr, 1.0);
    }
}
