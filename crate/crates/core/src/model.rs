//! Task specifications, covariance handling and data generation.
//!
//! A task draws `n` rows `x = Sigma^{1/2} z` with `z` having i.i.d. unit-variance
//! entries, and responses `y = x^T beta + eps` with Gaussian `eps` of scale `sigma`.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StudentT;
use serde::{Deserialize, Serialize};

/// Relative eigenvalue floor below which a matrix is treated as singular.
pub const SPD_FLOOR: f64 = 1e-12;

/// Distribution of the standardised design entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseLaw {
    #[default]
    Gaussian,
    /// Symmetric signs, `+1` or `-1` with equal probability.
    Rademacher,
    /// Student-t rescaled to unit variance. Needs `dof > 4` for a finite fourth moment.
    StudentT { dof: f64 },
}

impl NoiseLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseLaw::Gaussian | NoiseLaw::Rademacher => Ok(()),
            NoiseLaw::StudentT { dof } if dof > 4.0 && dof.is_finite() => Ok(()),
            NoiseLaw::StudentT { dof } => Err(Error::InvalidInput(format!("student_t needs dof > 4 for finite fourth moments, got {dof}"))),
        }
    }
}

/// Eigendecomposition of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SymmetricFactor<T: Scalar> {
    pub values: DVector<T>,
    pub vectors: DMatrix<T>,
}

impl<T: Scalar> SymmetricFactor<T> {
    /// Factorises `m`, rejecting asymmetric or non-SPD input.
    pub fn new(m: &DMatrix<T>) -> Result<Self> {
        check_symmetric(m)?;
        let eig = SymmetricEigen::new(m.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(max > T::zero()) || min <= max * lit(SPD_FLOOR) {
            let ratio = if max > T::zero() { (min / max).as_f64() } else { f64::NAN };
            return Err(Error::NotPositiveDefinite { ratio });
        }
        Ok(SymmetricFactor { values: eig.eigenvalues, vectors: eig.eigenvectors })
    }

    /// `V diag(values^e) V^T`.
    pub fn power(&self, e: T) -> DMatrix<T> {
        let d = self.values.map(|v| v.powf(e));
        let scaled = &self.vectors * DMatrix::from_diagonal(&d);
        &scaled * self.vectors.transpose()
    }
}

fn check_symmetric<T: Scalar>(m: &DMatrix<T>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { context: "square matrix", expected: m.nrows(), found: m.ncols() });
    }
    let scale = m.amax().max(T::one());
    let tol = lit::<T>(1e-10) * scale;
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::InvalidInput(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Population covariance of a task's features.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSpec<T: Scalar> {
    Identity(usize),
    Diagonal(DVector<T>),
    Dense(DMatrix<T>),
}

impl<T: Scalar> CovarianceSpec<T> {
    pub fn identity(p: usize) -> Self {
        CovarianceSpec::Identity(p)
    }

    pub fn diagonal(d: DVector<T>) -> Result<Self> {
        let max = d.max();
        if d.is_empty() || d.iter().any(|v| !v.is_finite() || *v <= max * lit(SPD_FLOOR)) {
            return Err(Error::NotPositiveDefinite { ratio: (d.min() / max).as_f64() });
        }
        Ok(CovarianceSpec::Diagonal(d))
    }

    /// Dense covariance; checked for symmetry and positive definiteness.
    pub fn dense(m: DMatrix<T>) -> Result<Self> {
        SymmetricFactor::new(&m)?;
        Ok(CovarianceSpec::Dense(m))
    }

    /// Diagonal covariance whose first `ceil(p/2)` eigenvalues are `high` and the rest `low`.
    pub fn paired(p: usize, high: T, low: T) -> Result<Self> {
        let half = p.div_ceil(2);
        Self::diagonal(DVector::from_fn(p, |i, _| if i < half { high } else { low }))
    }

    pub fn dim(&self) -> usize {
        match self {
            CovarianceSpec::Identity(p) => *p,
            CovarianceSpec::Diagonal(d) => d.len(),
            CovarianceSpec::Dense(m) => m.nrows(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, CovarianceSpec::Identity(_))
    }

    pub fn to_matrix(&self) -> DMatrix<T> {
        match self {
            CovarianceSpec::Identity(p) => DMatrix::identity(*p, *p),
            CovarianceSpec::Diagonal(d) => DMatrix::from_diagonal(d),
            CovarianceSpec::Dense(m) => m.clone(),
        }
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<T> {
        let mut v: Vec<T> = match self {
            CovarianceSpec::Identity(p) => vec![T::one(); *p],
            CovarianceSpec::Diagonal(d) => d.iter().copied().collect(),
            CovarianceSpec::Dense(m) => SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect(),
        };
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v
    }

    /// `Sigma^e` for a real exponent.
    pub fn power(&self, e: T) -> DMatrix<T> {
        match self {
            CovarianceSpec::Identity(p) => DMatrix::identity(*p, *p),
            CovarianceSpec::Diagonal(d) => DMatrix::from_diagonal(&d.map(|v| v.powf(e))),
            CovarianceSpec::Dense(m) => SymmetricFactor::new(m).expect("validated on construction").power(e),
        }
    }

    pub fn sqrt(&self) -> DMatrix<T> {
        self.power(lit(0.5))
    }

    pub fn trace(&self) -> T {
        match self {
            CovarianceSpec::Identity(p) => lit(*p as f64),
            CovarianceSpec::Diagonal(d) => d.sum(),
            CovarianceSpec::Dense(m) => m.trace(),
        }
    }

    /// `v^T Sigma v`.
    pub fn quad_form(&self, v: &DVector<T>) -> T {
        match self {
            CovarianceSpec::Identity(_) => v.norm_squared(),
            CovarianceSpec::Diagonal(d) => d.iter().zip(v.iter()).map(|(s, x)| *s * *x * *x).fold(T::zero(), |a, b| a + b),
            CovarianceSpec::Dense(m) => v.dot(&(m * v)),
        }
    }

    /// Right-multiplies a row-sample matrix by `Sigma^{1/2}`.
    pub fn color_rows(&self, z: DMatrix<T>) -> DMatrix<T> {
        match self {
            CovarianceSpec::Identity(_) => z,
            CovarianceSpec::Diagonal(d) => {
                let mut z = z;
                for (j, mut col) in z.column_iter_mut().enumerate() {
                    col *= d[j].sqrt();
                }
                z
            }
            CovarianceSpec::Dense(_) => &z * self.sqrt(),
        }
    }
}

/// One regression task: sample size, covariance, coefficients and noise scale.
#[derive(Debug, Clone)]
pub struct TaskSpec<T: Scalar> {
    pub n: usize,
    pub covariance: CovarianceSpec<T>,
    pub beta: DVector<T>,
    pub sigma: T,
}

impl<T: Scalar> TaskSpec<T> {
    pub fn new(n: usize, covariance: CovarianceSpec<T>, beta: DVector<T>, sigma: T) -> Result<Self> {
        if beta.len() != covariance.dim() {
            return Err(Error::DimensionMismatch { context: "task coefficients", expected: covariance.dim(), found: beta.len() });
        }
        if !(sigma >= T::zero()) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!("noise scale must be non-negative, got {sigma}")));
        }
        if n == 0 {
            return Err(Error::InvalidInput("task needs at least one sample".into()));
        }
        Ok(TaskSpec { n, covariance, beta, sigma })
    }

    pub fn p(&self) -> usize {
        self.covariance.dim()
    }
}

/// Checks the target dimension constraint `n >= (1 + tau) p`.
///
/// Returns `Ok(false)` when the constraint is violated but `strict` is off,
/// in which case the caller should warn.
pub fn check_target_ratio(p: usize, n: usize, tau: f64, strict: bool) -> Result<bool> {
    if n <= p {
        return Err(Error::InvalidInput(format!("target task needs n > p (n = {n}, p = {p})")));
    }
    if (n as f64) < (1.0 + tau) * p as f64 {
        let msg = format!("n = {n} is below (1 + {tau}) * p = {}", (1.0 + tau) * p as f64);
        if strict {
            return Err(Error::InvalidInput(msg));
        }
        log::warn!("{msg}");
        return Ok(false);
    }
    Ok(true)
}

/// A design matrix with its responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub x: DMatrix<T>,
    pub y: DVector<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: DMatrix<T>, y: DVector<T>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch { context: "dataset rows", expected: x.nrows(), found: y.len() });
        }
        Ok(Dataset { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows at the given indices, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Dataset { x: self.x.select_rows(rows), y: self.y.select_rows(rows) }
    }

    /// Mean squared prediction error of `beta` on this data.
    pub fn mse(&self, beta: &DVector<T>) -> T {
        let r = &self.x * beta - &self.y;
        r.norm_squared() / lit(self.n() as f64)
    }
}

/// Draws an `n x p` matrix with i.i.d. unit-variance entries from `law`, row by row.
pub fn sample_standard<T: Scalar, R: Rng + ?Sized>(n: usize, p: usize, law: NoiseLaw, rng: &mut R) -> DMatrix<T> {
    match law {
        NoiseLaw::Gaussian => DMatrix::from_row_iterator(n, p, (0..n * p).map(|_| T::standard_normal(rng))),
        NoiseLaw::Rademacher => DMatrix::from_row_iterator(n, p, (0..n * p).map(|_| if rng.random::<bool>() { T::one() } else { -T::one() })),
        NoiseLaw::StudentT { dof } => {
            let dist = StudentT::new(dof).expect("dof validated");
            DMatrix::from_row_iterator(n, p, (0..n * p).map(|_| T::unit_student_t(rng, &dist, dof)))
        }
    }
}

/// Draws a design `X = Z Sigma^{1/2}` with `n` rows.
pub fn sample_design<T: Scalar, R: Rng + ?Sized>(cov: &CovarianceSpec<T>, n: usize, law: NoiseLaw, rng: &mut R) -> DMatrix<T> {
    cov.color_rows(sample_standard(n, cov.dim(), law, rng))
}

/// Draws a dataset for `task`: design first, then Gaussian noise.
pub fn generate_dataset<T: Scalar, R: Rng + ?Sized>(task: &TaskSpec<T>, law: NoiseLaw, rng: &mut R) -> Dataset<T> {
    let x = sample_design(&task.covariance, task.n, law, rng);
    let noise = DVector::from_iterator(task.n, (0..task.n).map(|_| T::standard_normal(rng) * task.sigma));
    let y = &x * &task.beta + noise;
    Dataset { x, y }
}

/// Random-effect coefficients `beta_i = beta0 + (mu / sqrt(p)) g_i`.
#[derive(Debug, Clone)]
pub struct RandomEffectSpec<T: Scalar> {
    pub beta0: DVector<T>,
    pub mu: T,
}

impl<T: Scalar> RandomEffectSpec<T> {
    pub fn new(beta0: DVector<T>, mu: T) -> Result<Self> {
        if !(mu >= T::zero()) {
            return Err(Error::InvalidInput(format!("mu must be non-negative, got {mu}")));
        }
        Ok(RandomEffectSpec { beta0, mu })
    }

    pub fn p(&self) -> usize {
        self.beta0.len()
    }

    /// One task's coefficient vector.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        let p = self.p();
        let scale = self.mu / lit::<T>(p as f64).sqrt();
        DVector::from_iterator(p, self.beta0.iter().map(|b| *b + scale * T::standard_normal(rng)))
    }

    /// `t` task coefficient vectors as the columns of a `p x t` matrix.
    pub fn sample_matrix<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> DMatrix<T> {
        let cols: Vec<DVector<T>> = (0..t).map(|_| self.sample(rng)).collect();
        DMatrix::from_columns(&cols)
    }
}

/// Shared coefficient direction with i.i.d. `N(0, 1/p)` entries, rescaled to `norm`.
pub fn draw_beta0<T: Scalar, R: Rng + ?Sized>(p: usize, norm: T, rng: &mut R) -> DVector<T> {
    let g = DVector::from_iterator(p, (0..p).map(|_| T::standard_normal(rng)));
    let len = g.norm();
    g * (norm / len)
}

/// Singular values of `M = Sigma_1^{1/2} Sigma_2^{-1/2}`, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftMatrix<T: Scalar> {
    pub singular_values: Vec<T>,
}

impl<T: Scalar> ShiftMatrix<T> {
    /// Squared singular values.
    pub fn squared(&self) -> Vec<T> {
        self.singular_values.iter().map(|s| *s * *s).collect()
    }
}

/// Computes the covariate shift spectrum from the eigenvalues of
/// `Sigma_2^{-1/2} Sigma_1 Sigma_2^{-1/2}`.
pub fn shift_spectrum<T: Scalar>(cov1: &CovarianceSpec<T>, cov2: &CovarianceSpec<T>) -> Result<ShiftMatrix<T>> {
    if cov1.dim() != cov2.dim() {
        return Err(Error::DimensionMismatch { context: "shift spectrum", expected: cov1.dim(), found: cov2.dim() });
    }
    let sq: Vec<T> = match (cov1, cov2) {
        (c, CovarianceSpec::Identity(_)) => c.eigenvalues(),
        (CovarianceSpec::Identity(_), CovarianceSpec::Diagonal(d)) => d.iter().map(|v| T::one() / *v).collect(),
        (CovarianceSpec::Diagonal(a), CovarianceSpec::Diagonal(b)) => a.iter().zip(b.iter()).map(|(x, y)| *x / *y).collect(),
        _ => {
            let inv_half = cov2.power(lit(-0.5));
            let m = &inv_half * cov1.to_matrix() * &inv_half;
            let m = (&m + m.transpose()) * lit::<T>(0.5);
            SymmetricFactor::new(&m)?.values.iter().copied().collect()
        }
    };
    let max = sq.iter().copied().fold(T::zero(), |a, b| a.max(b));
    if sq.iter().any(|v| *v <= max * lit(SPD_FLOOR)) {
        return Err(Error::NotPositiveDefinite { ratio: f64::NAN });
    }
    let mut s: Vec<T> = sq.into_iter().map(|v| v.sqrt()).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(ShiftMatrix { singular_values: s })
}

/// Dimension and sample sizes as reals, so limits can be evaluated at
/// fractional sizes (root finding in `n1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSizes<T: Scalar> {
    pub p: T,
    pub n1: T,
    pub n2: T,
}

impl<T: Scalar> SampleSizes<T> {
    /// Requires `p > 0`, `n1 > 0` and `n2 > p`.
    pub fn new(p: T, n1: T, n2: T) -> Result<Self> {
        if !(p > T::zero()) || !(n1 > T::zero()) || !(n2 > p) || !n1.is_finite() || !n2.is_finite() {
            return Err(Error::InvalidInput(format!("need p > 0, n1 > 0 and n2 > p (p = {p}, n1 = {n1}, n2 = {n2})")));
        }
        Ok(SampleSizes { p, n1, n2 })
    }

    pub fn from_counts(p: usize, n1: usize, n2: usize) -> Result<Self> {
        Self::new(lit(p as f64), lit(n1 as f64), lit(n2 as f64))
    }

    pub fn total(&self) -> T {
        self.n1 + self.n2
    }

    /// `p / n1`.
    pub fn xi1(&self) -> T {
        self.p / self.n1
    }

    /// `p / n2`.
    pub fn xi2(&self) -> T {
        self.p / self.n2
    }
}
