//! Deterministic limits under covariate shift.
//!
//! With `n = n1 + n2` and `c_i = (a lambda_i)^2`, the pair `(alpha1, alpha2)` solves
//!
//! ```text
//! alpha1 + alpha2 = 1 - p/n
//! alpha1 + (1/n) sum_i c_i alpha1 / (c_i alpha1 + alpha2) = n1/n
//! ```
//!
//! and `(alpha3, alpha4)` solves the linear system obtained by differentiating
//! the resolvent equations in the spectral parameter at zero.

use crate::error::{Error, Result};
use crate::model::{CovarianceSpec, SampleSizes, SymmetricFactor};
use crate::roots::bisect;
use crate::scalar::{lit, Scalar};
use nalgebra::{DMatrix, DVector};

/// Ratios beyond this magnitude are clamped before solving.
pub const MAX_RATIO: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaPair<T: Scalar> {
    pub alpha1: T,
    pub alpha2: T,
    /// Largest absolute residual of the two defining equations.
    pub residual: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaDeriv<T: Scalar> {
    pub alpha3: T,
    pub alpha4: T,
    pub residual: T,
}

impl<T: Scalar> AlphaDeriv<T> {
    /// Whether both components are positive. Reported rather than enforced.
    pub fn in_positive_orthant(&self) -> bool {
        self.alpha3 > T::zero() && self.alpha4 > T::zero()
    }
}

fn clamp_ratio<T: Scalar>(a: T) -> Result<T> {
    if !a.is_finite() {
        return Err(Error::InvalidInput(format!("ratio must be finite, got {a}")));
    }
    let cap = lit::<T>(MAX_RATIO);
    if a.abs() > cap {
        log::warn!("output-layer ratio {a} clamped to magnitude {MAX_RATIO}");
        return Ok(cap * a.signum());
    }
    Ok(a)
}

fn weights<T: Scalar>(a: T, lambdas: &[T], sizes: &SampleSizes<T>) -> Result<Vec<T>> {
    if lambdas.len() as f64 != sizes.p.as_f64() {
        return Err(Error::DimensionMismatch { context: "shift spectrum", expected: sizes.p.as_f64() as usize, found: lambdas.len() });
    }
    if lambdas.iter().any(|l| !(*l > T::zero()) || !l.is_finite()) {
        return Err(Error::InvalidInput("singular values must be positive and finite".into()));
    }
    let a = clamp_ratio(a)?;
    Ok(lambdas.iter().map(|l| (a * *l).powi(2)).collect())
}

fn sum<T: Scalar>(it: impl Iterator<Item = T>) -> T {
    it.fold(T::zero(), |x, y| x + y)
}

/// Residuals of the `(alpha1, alpha2)` system at the given point.
pub fn alpha12_residual<T: Scalar>(c: &[T], sizes: &SampleSizes<T>, alpha1: T, alpha2: T) -> T {
    let n = sizes.total();
    let r1 = alpha1 + alpha2 - (T::one() - sizes.p / n);
    let r2 = alpha1 + sum(c.iter().map(|ci| *ci * alpha1 / (*ci * alpha1 + alpha2))) / n - sizes.n1 / n;
    r1.abs().max(r2.abs())
}

/// Solves for `(alpha1, alpha2)` by bisection on `alpha1` after eliminating `alpha2`.
pub fn solve_alpha12<T: Scalar>(a: T, lambdas: &[T], sizes: &SampleSizes<T>) -> Result<AlphaPair<T>> {
    let c = weights(a, lambdas, sizes)?;
    solve_alpha12_weights(&c, sizes)
}

fn solve_alpha12_weights<T: Scalar>(c: &[T], sizes: &SampleSizes<T>) -> Result<AlphaPair<T>> {
    let n = sizes.total();
    let total = T::one() - sizes.p / n;
    let target = sizes.n1 / n;
    let f = |alpha1: T| {
        let alpha2 = total - alpha1;
        alpha1 + sum(c.iter().map(|ci| *ci * alpha1 / (*ci * alpha1 + alpha2))) / n - target
    };
    let alpha1 = if c.iter().all(|ci| *ci == T::zero()) {
        target
    } else {
        let hi = total.min(target);
        // f(0) = -n1/n < 0; at `hi` it is non-negative, and f is increasing.
        let f_hi = f(hi);
        if f_hi < T::zero() {
            return Err(Error::Bracket { context: "alpha1 equation", detail: format!("f(hi) = {f_hi} < 0") });
        }
        bisect(f, T::zero(), hi, lit(1e-13), 200, "alpha1 equation")?.x
    };
    let alpha2 = total - alpha1;
    let residual = alpha12_residual(c, sizes, alpha1, alpha2);
    Ok(AlphaPair { alpha1, alpha2, residual })
}

/// `(sigma^2 / n) sum_i 1 / (alpha1 a^2 lambda_i^2 + alpha2)`, the limit of
/// `sigma^2 tr[Sigma2 Sigma_hat(a)^{-1}]`.
pub fn variance_limit<T: Scalar>(a: T, lambdas: &[T], sizes: &SampleSizes<T>, sigma: T) -> Result<T> {
    let c = weights(a, lambdas, sizes)?;
    let al = solve_alpha12_weights(&c, sizes)?;
    Ok(sigma * sigma / sizes.total() * sum(c.iter().map(|ci| T::one() / (al.alpha1 * *ci + al.alpha2))))
}

/// Residuals of the `(alpha3, alpha4)` system at the given point.
pub fn alpha34_residual<T: Scalar>(c: &[T], sizes: &SampleSizes<T>, al: &AlphaPair<T>, alpha3: T, alpha4: T) -> T {
    let n = sizes.total();
    let d: Vec<T> = c.iter().map(|ci| *ci * al.alpha1 + al.alpha2).collect();
    let s0 = sum(d.iter().map(|di| T::one() / *di)) / n;
    let r1 = alpha3 + alpha4 - s0;
    let lhs = alpha3 + sum(c.iter().zip(&d).map(|(ci, di)| *ci * (al.alpha2 * alpha3 - al.alpha1 * alpha4) / (*di * *di))) / n;
    let rhs = sum(c.iter().zip(&d).map(|(ci, di)| *ci * al.alpha1 / (*di * *di))) / n;
    r1.abs().max((lhs - rhs).abs())
}

/// Solves the linear `(alpha3, alpha4)` system given `(alpha1, alpha2)`.
pub fn solve_alpha34<T: Scalar>(a: T, lambdas: &[T], sizes: &SampleSizes<T>, al: &AlphaPair<T>) -> Result<AlphaDeriv<T>> {
    let c = weights(a, lambdas, sizes)?;
    solve_alpha34_weights(&c, sizes, al)
}

fn solve_alpha34_weights<T: Scalar>(c: &[T], sizes: &SampleSizes<T>, al: &AlphaPair<T>) -> Result<AlphaDeriv<T>> {
    let n = sizes.total();
    let d: Vec<T> = c.iter().map(|ci| *ci * al.alpha1 + al.alpha2).collect();
    let s0 = sum(d.iter().map(|di| T::one() / *di)) / n;
    let s1 = sum(c.iter().zip(&d).map(|(ci, di)| *ci / (*di * *di))) / n;
    let s2 = s1 * al.alpha1;
    // [1, 1; 1 + alpha2 s1, -alpha1 s1] (alpha3, alpha4)' = (s0, s2)'
    let (m11, m12, m21, m22) = (T::one(), T::one(), T::one() + al.alpha2 * s1, -al.alpha1 * s1);
    let det = m11 * m22 - m12 * m21;
    if det.abs() <= T::eps() * lit(16.0) * (m21.abs() + m22.abs()) {
        return Err(Error::Singular { context: "alpha3/alpha4 system", condition: f64::INFINITY });
    }
    let alpha3 = (s0 * m22 - m12 * s2) / det;
    let alpha4 = (m11 * s2 - m21 * s0) / det;
    let residual = alpha34_residual(c, sizes, al, alpha3, alpha4);
    Ok(AlphaDeriv { alpha3, alpha4, residual })
}

/// Deterministic bias estimate under combined covariate and model shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedBiasEstimate<T: Scalar> {
    /// `|Pi(a)^{1/2} Sigma1^{1/2} (beta1 - a beta2)|^2`.
    pub estimate: T,
    /// Half-width of the accompanying error band (leading term only).
    pub band: T,
    pub alpha: AlphaPair<T>,
    pub deriv: AlphaDeriv<T>,
}

/// Eigendecomposition of `M M' = Sigma1^{1/2} Sigma2^{-1} Sigma1^{1/2}`, where
/// `M = Sigma1^{1/2} Sigma2^{-1/2}`. Returns `(lambda_i^2, U)`.
fn shift_left_basis<T: Scalar>(cov1: &CovarianceSpec<T>, cov2: &CovarianceSpec<T>) -> Result<(Vec<T>, DMatrix<T>)> {
    let p = cov1.dim();
    match (cov1, cov2) {
        (CovarianceSpec::Dense(_), _) | (_, CovarianceSpec::Dense(_)) => {
            let h = cov1.sqrt();
            let m = &h * cov2.power(-T::one()) * &h;
            let f = SymmetricFactor::new(&((&m + m.transpose()) * lit::<T>(0.5)))?;
            Ok((f.values.iter().copied().collect(), f.vectors))
        }
        _ => {
            let d1 = cov1.to_matrix().diagonal();
            let d2 = cov2.to_matrix().diagonal();
            Ok(((0..p).map(|i| d1[i] / d2[i]).collect(), DMatrix::identity(p, p)))
        }
    }
}

/// Bias estimate `w' Pi(a) w` with `w = Sigma1^{1/2}(beta1 - a beta2)`, where
/// `Pi(a) = (n1 a / n)^2 M (alpha3 a^2 M'M + alpha4 + 1) (alpha1 a^2 M'M + alpha2)^{-2} M'`.
pub fn bias_estimate_pi<T: Scalar>(
    a: T,
    cov1: &CovarianceSpec<T>,
    cov2: &CovarianceSpec<T>,
    sizes: &SampleSizes<T>,
    beta1: &DVector<T>,
    beta2: &DVector<T>,
) -> Result<CombinedBiasEstimate<T>> {
    let p = cov1.dim();
    if cov2.dim() != p || beta1.len() != p || beta2.len() != p {
        return Err(Error::DimensionMismatch { context: "combined-shift bias", expected: p, found: beta1.len() });
    }
    let (sq, u) = shift_left_basis(cov1, cov2)?;
    let lambdas: Vec<T> = sq.iter().map(|v| v.sqrt()).collect();
    let c = weights(a, &lambdas, sizes)?;
    let a = clamp_ratio(a)?;
    let alpha = solve_alpha12_weights(&c, sizes)?;
    let deriv = solve_alpha34_weights(&c, sizes, &alpha)?;

    let w = cov1.sqrt() * (beta1 - beta2 * a);
    let coords = u.tr_mul(&w);
    let n = sizes.total();
    let pref = (sizes.n1 * a / n).powi(2);
    let estimate = pref
        * sum(sq.iter().zip(&c).zip(coords.iter()).map(|((l2, ci), x)| {
            let den = al_den(alpha, *ci);
            *l2 * (deriv.alpha3 * *ci + deriv.alpha4 + T::one()) / (den * den) * *x * *x
        }));

    let lmax = lambdas.iter().copied().fold(T::zero(), |x, y| x.max(y));
    let lmin = lambdas.iter().copied().fold(T::max_value().unwrap(), |x, y| x.min(y));
    let factor = (T::one() + (sizes.p / sizes.n1).sqrt()).powi(4) - T::one();
    let den = a * a * lmin * lmin * (sizes.n1.sqrt() - sizes.p.sqrt()).powi(2) + (sizes.n2.sqrt() - sizes.p.sqrt()).powi(2);
    let band = factor * a * a * lmax * lmax * sizes.n1 * sizes.n1 * w.norm_squared() / (den * den);
    Ok(CombinedBiasEstimate { estimate, band, alpha, deriv })
}

fn al_den<T: Scalar>(al: AlphaPair<T>, ci: T) -> T {
    al.alpha1 * ci + al.alpha2
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sizes(p: usize, n1: usize, n2: usize) -> SampleSizes<f64> {
        SampleSizes::from_counts(p, n1, n2).unwrap()
    }

    fn paired(p: usize, hi: f64) -> Vec<f64> {
        (0..p).map(|i| if i < p / 2 { hi } else { 1.0 / hi }).collect()
    }

    /// Damped joint fixed-point iteration on both unknowns.
    fn fixed_point_oracle(c: &[f64], s: &SampleSizes<f64>) -> (f64, f64) {
        let n = s.total();
        let (mut a1, mut a2) = (0.5 * s.n1 / n, 0.5 * (s.n2 - s.p) / n);
        for _ in 0..200_000 {
            let new1 = s.n1 / n - c.iter().map(|ci| ci * a1 / (ci * a1 + a2)).sum::<f64>() / n;
            let new2 = 1.0 - s.p / n - a1;
            let (o1, o2) = (a1, a2);
            a1 = 0.7 * a1 + 0.3 * new1;
            a2 = 0.7 * a2 + 0.3 * new2;
            if (a1 - o1).abs() + (a2 - o2).abs() < 1e-16 {
                break;
            }
        }
        (a1, a2)
    }

    /// Newton solve of the resolvent system at real spectral parameter `z`.
    fn z_system(c: &[f64], s: &SampleSizes<f64>, z: f64, start: (f64, f64)) -> (f64, f64) {
        let n = s.total();
        let eqs = |a1: f64, a2: f64| {
            let e1 = a1 + a2 - 1.0 + c.iter().map(|ci| (ci * a1 + a2) / (ci * a1 + a2 - z)).sum::<f64>() / n;
            let e2 = a1 + c.iter().map(|ci| ci * a1 / (ci * a1 + a2 - z)).sum::<f64>() / n - s.n1 / n;
            (e1, e2)
        };
        let (mut a1, mut a2) = start;
        for _ in 0..100 {
            let (e1, e2) = eqs(a1, a2);
            let h = 1e-7;
            let (e1a, e2a) = eqs(a1 + h, a2);
            let (e1b, e2b) = eqs(a1, a2 + h);
            let j = [[(e1a - e1) / h, (e1b - e1) / h], [(e2a - e2) / h, (e2b - e2) / h]];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            a1 -= (e1 * j[1][1] - e2 * j[0][1]) / det;
            a2 -= (j[0][0] * e2 - j[1][0] * e1) / det;
        }
        (a1, a2)
    }

    #[test]
    fn isotropic_closed_form() {
        let s = sizes(100, 300, 300);
        let al = solve_alpha12(1.0, &vec![1.0; 100], &s).unwrap();
        let expect = 0.5 * (1.0 - 100.0 / 600.0);
        assert_relative_eq!(al.alpha1, expect, epsilon = 1e-12);
        assert_relative_eq!(al.alpha2, expect, epsilon = 1e-12);
        assert!(al.residual < 1e-12);
    }

    #[test]
    fn matches_fixed_point_oracle() {
        let s = sizes(100, 100, 300);
        let lam = paired(100, 2.0);
        let al = solve_alpha12(1.0, &lam, &s).unwrap();
        assert!(al.residual < 1e-10);
        let c: Vec<f64> = lam.iter().map(|l| l * l).collect();
        let (o1, o2) = fixed_point_oracle(&c, &s);
        assert_relative_eq!(al.alpha1, o1, epsilon = 1e-8);
        assert_relative_eq!(al.alpha2, o2, epsilon = 1e-8);
    }

    #[test]
    fn small_source_limit() {
        let s = SampleSizes::new(100.0, 1e-6, 300.0).unwrap();
        let al = solve_alpha12(1.0, &paired(100, 2.0), &s).unwrap();
        assert!(al.alpha1 < 1e-8);
        assert_relative_eq!(al.alpha2, 200.0 / 300.0, epsilon = 1e-8);
    }

    #[test]
    fn variance_closed_forms() {
        let s = sizes(100, 300, 300);
        assert_relative_eq!(variance_limit(1.0, &vec![1.0; 100], &s, 0.5).unwrap(), 0.05, epsilon = 1e-12);
        let v0 = variance_limit(0.0, &paired(100, 4.0), &s, 0.5).unwrap();
        assert_relative_eq!(v0, 0.125, epsilon = 1e-12);
    }

    #[test]
    fn alpha34_symmetric_case() {
        let s = sizes(100, 300, 300);
        let lam = vec![1.0; 100];
        let al = solve_alpha12(1.0, &lam, &s).unwrap();
        let d = solve_alpha34(1.0, &lam, &s, &al).unwrap();
        let s0 = 100.0 / 600.0 / (al.alpha1 + al.alpha2);
        assert_relative_eq!(d.alpha3, s0 / 2.0, epsilon = 1e-12);
        assert_relative_eq!(d.alpha4, s0 / 2.0, epsilon = 1e-12);
        assert!(d.residual < 1e-12);
    }

    #[test]
    fn alpha34_at_zero_ratio() {
        let s = sizes(100, 200, 300);
        let lam = paired(100, 2.0);
        let al = solve_alpha12(0.0, &lam, &s).unwrap();
        let d = solve_alpha34(0.0, &lam, &s, &al).unwrap();
        assert_eq!(d.alpha3, 0.0);
        assert_relative_eq!(d.alpha4, 100.0 / 500.0 / al.alpha2, epsilon = 1e-14);
    }

    #[test]
    fn alpha34_is_spectral_derivative() {
        let s = sizes(100, 200, 300);
        let lam = paired(100, 2.0);
        let al = solve_alpha12(1.0, &lam, &s).unwrap();
        let d = solve_alpha34(1.0, &lam, &s, &al).unwrap();
        assert!(d.residual < 1e-10);
        let c: Vec<f64> = lam.iter().map(|l| l * l).collect();
        let h = 1e-5;
        let plus = z_system(&c, &s, h, (al.alpha1, al.alpha2));
        let minus = z_system(&c, &s, -h, (al.alpha1, al.alpha2));
        assert_relative_eq!(d.alpha3, -(plus.0 - minus.0) / (2.0 * h), epsilon = 1e-6);
        assert_relative_eq!(d.alpha4, -(plus.1 - minus.1) / (2.0 * h), epsilon = 1e-6);
        assert!(d.in_positive_orthant());
    }

    #[test]
    fn pi_estimate_trivial_cases() {
        let s = sizes(4, 40, 30);
        let c1 = CovarianceSpec::paired(4, 4.0, 0.25).unwrap();
        let c2 = CovarianceSpec::identity(4);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(bias_estimate_pi(0.5, &c1, &c2, &s, &(&b * 0.5), &b).unwrap().estimate, 0.0);
        assert_eq!(bias_estimate_pi(0.0, &c1, &c2, &s, &b, &(&b * 2.0)).unwrap().estimate, 0.0);
    }

    #[test]
    fn pi_dense_matches_diagonal() {
        let s = sizes(3, 40, 30);
        let d1 = DVector::from_vec(vec![2.0, 0.5, 1.5]);
        let d2 = DVector::from_vec(vec![1.0, 2.0, 0.7]);
        let b1 = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let b2 = DVector::from_vec(vec![0.1, 0.4, 0.2]);
        let diag = bias_estimate_pi(0.8, &CovarianceSpec::Diagonal(d1.clone()), &CovarianceSpec::Diagonal(d2.clone()), &s, &b1, &b2).unwrap();
        let dense = bias_estimate_pi(
            0.8,
            &CovarianceSpec::dense(DMatrix::from_diagonal(&d1)).unwrap(),
            &CovarianceSpec::dense(DMatrix::from_diagonal(&d2)).unwrap(),
            &s,
            &b1,
            &b2,
        )
        .unwrap();
        assert_relative_eq!(diag.estimate, dense.estimate, max_relative = 1e-10);
        assert_relative_eq!(diag.band, dense.band, max_relative = 1e-10);
    }

    #[test]
    fn dichotomy_grid() {
        for hi in [1.5, 2.0, 4.0] {
            for (n1, n2) in [(100usize, 300usize), (300, 300), (900, 300)] {
                let s = sizes(100, n1, n2);
                let vm = variance_limit(1.0, &paired(100, hi), &s, 1.0).unwrap();
                let vi = variance_limit(1.0, &vec![1.0; 100], &s, 1.0).unwrap();
                if n1 < n2 {
                    assert!(vm < vi, "{hi} {n1}");
                } else if n1 > n2 {
                    assert!(vm > vi, "{hi} {n1}");
                } else {
                    assert_relative_eq!(vm, vi, max_relative = 1e-10);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn residuals_small(p in 2usize..60, r1 in 0.2f64..8.0, r2 in 1.1f64..6.0, a in -5.0f64..5.0, seed in 0u64..1000) {
            let n1 = ((p as f64) * r1).ceil() as usize;
            let n2 = ((p as f64) * r2).ceil() as usize + 1;
            let s = sizes(p, n1, n2);
            let lam: Vec<f64> = (0..p).map(|i| 0.2 + ((i as u64 * 7919 + seed) % 97) as f64 / 20.0).collect();
            let al = solve_alpha12(a, &lam, &s).unwrap();
            prop_assert!(al.residual < 1e-10);
            prop_assert!(al.alpha1 >= 0.0 && al.alpha1 <= (1.0 - s.p / s.total()).min(s.n1 / s.total()));
            prop_assert!(al.alpha2 > 0.0);
            let d = solve_alpha34(a, &lam, &s, &al).unwrap();
            prop_assert!(d.residual < 1e-10);
        }

        #[test]
        fn depends_only_on_scaled_spectrum(p in 2usize..40, a in 0.05f64..6.0, seed in 0u64..1000) {
            let s = sizes(p, 2 * p, 3 * p);
            let lam: Vec<f64> = (0..p).map(|i| 0.3 + ((i as u64 * 31 + seed) % 53) as f64 / 13.0).collect();
            let scaled: Vec<f64> = lam.iter().map(|l| l * a).collect();
            let x = solve_alpha12(a, &lam, &s).unwrap();
            let y = solve_alpha12(1.0, &scaled, &s).unwrap();
            prop_assert!((x.alpha1 - y.alpha1).abs() < 1e-12);
        }

        #[test]
        fn isotropic_variance(p in 2usize..80, r1 in 0.1f64..6.0, r2 in 1.05f64..6.0) {
            let n1 = ((p as f64) * r1).ceil() as usize;
            let n2 = ((p as f64) * r2).ceil() as usize + 1;
            let s = sizes(p, n1, n2);
            let v = variance_limit(1.0, &vec![1.0; p], &s, 1.0).unwrap();
            prop_assert!((v - p as f64 / (n1 + n2 - p) as f64).abs() < 1e-10);
        }

        #[test]
        fn covariate_bound(half in 1usize..20, c in 0.1f64..0.9, n1 in 50usize..600, seed in 0u64..1000) {
            // det-1 spectra with values in [c, 1/c], paired as (l, 1/l).
            let p = 2 * half;
            let mut lam = Vec::with_capacity(p);
            for i in 0..half {
                let u = ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0;
                let l = c.powf(u);
                lam.push(1.0 / l);
                lam.push(l);
            }
            let n2 = 3 * p + 10;
            let s = sizes(p, n1.max(1), n2);
            let vm = variance_limit(1.0, &lam, &s, 1.0).unwrap();
            let vi = variance_limit(1.0, &vec![1.0; p], &s, 1.0).unwrap();
            prop_assert!(vi <= (1.0 + s.n2 / (c * c * s.n1)) * vm * (1.0 + 1e-12));
        }
    }
}
