//! Positive versus negative transfer: closed-form classifiers.

use crate::error::{Error, Result};
use crate::freeaddition::model_shift_limits;
use crate::model::SampleSizes;
use crate::roots::bisect;
use crate::scalar::{lit, Scalar};
use crate::selfconsistent::variance_limit;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    AlwaysPositive,
    Crossover,
    AlwaysNegative,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::AlwaysPositive => "always_positive",
            Regime::Crossover => "crossover",
            Regime::AlwaysNegative => "always_negative",
        })
    }
}

/// Transfer regime of pooled HPS (`a = 1`) against target-only OLS under the
/// random-effect model with identity covariances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeVerdict<T: Scalar> {
    pub regime: Regime,
    /// Crossover source size in units of `p`; present only for [`Regime::Crossover`].
    pub rho: Option<T>,
    /// `sigma^2 p / (2 (n2 - p))`.
    pub mu2_low: T,
    /// `sigma^2 n2 / (2 (n2 - p))`.
    pub mu2_high: T,
    /// `(C2, C1, C0)` of the sign polynomial in `n1`.
    pub coefficients: [T; 3],
    /// Range of `n1` (in units of `p`) on which transfer helps, when it is a
    /// bounded window rather than `(0, rho)`.
    pub positive_window: Option<(T, T)>,
    /// Set when `n2 < 3p`, where the classification rests on the polynomial alone.
    pub outside_proven_range: bool,
}

fn positive_roots<T: Scalar>(c2: T, c1: T, c0: T) -> Vec<T> {
    let mut roots = Vec::new();
    if c2 == T::zero() {
        if c1 != T::zero() {
            roots.push(-c0 / c1);
        }
    } else {
        let disc = c1 * c1 - lit::<T>(4.0) * c2 * c0;
        if disc >= T::zero() {
            let sign = if c1 >= T::zero() { T::one() } else { -T::one() };
            let q = -(c1 + sign * disc.sqrt()) * lit::<T>(0.5);
            if q != T::zero() {
                roots.push(q / c2);
                roots.push(c0 / q);
            } else {
                roots.push(T::zero());
            }
        }
    }
    let mut r: Vec<T> = roots.into_iter().filter(|x| *x > T::zero() && x.is_finite()).collect();
    r.sort_by(|a, b| a.partial_cmp(b).unwrap());
    r.dedup();
    r
}

/// Classifies the transfer regime from the sign of
/// `h(n1) = C2 n1^2 + C1 n1 + C0`: HPS beats OLS exactly where `h < 0`.
pub fn classify_model_shift<T: Scalar>(mu: T, sigma: T, p: T, n2: T) -> Result<RegimeVerdict<T>> {
    if !(n2 > p) || !(p > T::zero()) {
        return Err(Error::InvalidInput(format!("need n2 > p > 0 (p = {p}, n2 = {n2})")));
    }
    if !(mu >= T::zero()) || !(sigma >= T::zero()) {
        return Err(Error::InvalidInput("mu and sigma must be non-negative".into()));
    }
    if mu == T::zero() && sigma == T::zero() {
        return Err(Error::InvalidInput("mu and sigma are both zero: no risk to compare".into()));
    }
    let two: T = lit(2.0);
    let (m2, s2) = (mu * mu, sigma * sigma);
    let c2 = two * m2 * (n2 - p) - s2 * p;
    let c1 = two * m2 * (n2 - p) * (n2 - p) - two * s2 * p * n2;
    let c0 = two * m2 * (n2 - p) * p * n2 - s2 * p * n2 * n2;
    let h = |x: T| (c2 * x + c1) * x + c0;

    let roots = positive_roots(c2, c1, c0);
    // Sign of h on each interval cut by the positive roots.
    let mut cuts = vec![T::zero()];
    cuts.extend(roots.iter().copied());
    let mut signs = Vec::new();
    for (i, lo) in cuts.iter().enumerate() {
        let probe = match cuts.get(i + 1) {
            Some(hi) => (*lo + *hi) * lit::<T>(0.5),
            None => *lo * two + T::one(),
        };
        let v = h(probe);
        signs.push(if v > T::zero() {
            1i8
        } else if v < T::zero() {
            -1
        } else {
            0
        });
    }
    let mu2_low = s2 * p / (two * (n2 - p));
    let mu2_high = s2 * n2 / (two * (n2 - p));
    let outside_proven_range = n2 < lit::<T>(3.0) * p;
    let (regime, rho, positive_window) = if signs.iter().all(|s| *s <= 0) {
        (Regime::AlwaysPositive, None, None)
    } else if signs.iter().all(|s| *s >= 0) {
        (Regime::AlwaysNegative, None, None)
    } else if signs.first() == Some(&-1) {
        // Helps first, hurts beyond the first sign change.
        (Regime::Crossover, Some(roots[0] / p), None)
    } else {
        // Hurts, helps on a window, hurts again.
        let lo = roots[0] / p;
        let hi = *roots.last().unwrap() / p;
        (Regime::Crossover, Some(hi), Some((lo, hi)))
    };
    Ok(RegimeVerdict { regime, rho, mu2_low, mu2_high, coefficients: [c2, c1, c0], positive_window, outside_proven_range })
}

/// Limit of the pooled (`a = 1`) excess risk under the random-effect model with
/// identity covariances: `sigma^2 L1(1) + 2 mu^2 L2(1)`.
pub fn pooled_limit<T: Scalar>(n1: T, mu: T, sigma: T, p: T, n2: T) -> Result<T> {
    let m = model_shift_limits(T::one(), &SampleSizes::new(p, n1, n2)?)?;
    Ok(m.variance(sigma) + m.bias(lit::<T>(2.0) * mu * mu))
}

/// Source size at which [`pooled_limit`] crosses the OLS risk `sigma^2 p / (n2 - p)`,
/// located by root finding on the limit curve. `None` when the curves do not cross
/// on `[1e-3 p, 1e7 p]`.
pub fn limit_curve_crossing<T: Scalar>(mu: T, sigma: T, p: T, n2: T) -> Result<Option<T>> {
    let ols = sigma * sigma * p / (n2 - p);
    let gap = |ln_n1: T| pooled_limit(ln_n1.exp(), mu, sigma, p, n2).map(|v| v - ols).unwrap_or(T::zero() / T::zero());
    let mut prev = (p * lit(1e-3)).ln();
    let mut prev_v = gap(prev);
    let step = lit::<T>(10f64.ln() / 8.0);
    for _ in 0..80 {
        let next = prev + step;
        let v = gap(next);
        if (prev_v < T::zero()) != (v < T::zero()) {
            let r = bisect(gap, prev, next, T::zero(), 200, "limit curve crossing")?;
            return Ok(Some(r.x.exp()));
        }
        prev = next;
        prev_v = v;
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftEffect {
    ShiftHelps,
    ShiftHurts,
    Tie,
}

/// Variance limit at `a = 1` with and without covariate shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovariateComparison<T: Scalar> {
    pub effect: ShiftEffect,
    pub g_shift: T,
    pub g_identity: T,
    /// Whether the spectrum pairs each `lambda` with `1 / lambda`.
    pub paired: bool,
}

/// Compares the pooled variance limit under `lambdas` against the unshifted one.
pub fn compare_covariate_shift<T: Scalar>(lambdas: &[T], sizes: &SampleSizes<T>, sigma: T) -> Result<CovariateComparison<T>> {
    let g_shift = variance_limit(T::one(), lambdas, sizes, sigma)?;
    let g_identity = variance_limit(T::one(), &vec![T::one(); lambdas.len()], sizes, sigma)?;
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = sorted.len();
    let paired = (0..k).all(|i| (sorted[i] * sorted[k - 1 - i] - T::one()).abs() < lit(1e-9));
    let tol = lit::<T>(1e-10) * g_identity.abs().max(T::one());
    let effect = if (g_shift - g_identity).abs() <= tol {
        ShiftEffect::Tie
    } else if g_shift < g_identity {
        ShiftEffect::ShiftHelps
    } else {
        ShiftEffect::ShiftHurts
    };
    Ok(CovariateComparison { effect, g_shift, g_identity, paired })
}

/// Best shared width for the multi-task random-effect model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WidthAdvice<T: Scalar> {
    pub r_star: usize,
    pub positive_transfer: bool,
    /// `sigma^2 p^2 / ((n - p) tr Sigma)`, the critical `mu^2`.
    pub threshold: T,
}

/// Width `1` is optimal when `mu^2` is below the critical value; otherwise no
/// width below `t` transfers positively and `t - 1` is reported by convention.
pub fn optimal_width_multitask<T: Scalar>(mu: T, sigma: T, p: T, n: T, trace_sigma: T, t: usize) -> Result<WidthAdvice<T>> {
    if !(n > p) || t < 2 || !(trace_sigma > T::zero()) {
        return Err(Error::InvalidInput(format!("need n > p, t >= 2 and tr(Sigma) > 0 (p = {p}, n = {n}, t = {t})")));
    }
    let threshold = sigma * sigma * p * p / ((n - p) * trace_sigma);
    if mu * mu < threshold {
        Ok(WidthAdvice { r_star: 1, positive_transfer: true, threshold })
    } else {
        Ok(WidthAdvice { r_star: t - 1, positive_transfer: false, threshold })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selfconsistent::solve_alpha12;
    use approx::assert_relative_eq;

    fn classify(mu: f64) -> RegimeVerdict<f64> {
        classify_model_shift(mu, 0.5, 100.0, 300.0).unwrap()
    }

    #[test]
    fn reference_thresholds_and_regimes() {
        let v = classify(0.2);
        assert_relative_eq!(v.mu2_low, 0.0625, epsilon = 1e-15);
        assert_relative_eq!(v.mu2_high, 0.1875, epsilon = 1e-15);
        assert_eq!(v.regime, Regime::AlwaysPositive);
        assert_eq!(classify(0.3).regime, Regime::Crossover);
        assert_eq!(classify(0.35).regime, Regime::Crossover);
        assert_eq!(classify(0.45).regime, Regime::AlwaysNegative);
        assert_eq!(classify(0.0).regime, Regime::AlwaysPositive);
        assert!(classify(0.2).rho.is_none());
        assert!(!classify(0.2).outside_proven_range);
    }

    #[test]
    fn crossover_root_value() {
        // C2 = 11, C1 = -7800, C0 = -1.17e6 at mu = 0.3.
        let v = classify(0.3);
        assert_relative_eq!(v.coefficients[0], 11.0, epsilon = 1e-9);
        assert_relative_eq!(v.coefficients[1], -7800.0, epsilon = 1e-9);
        assert_relative_eq!(v.coefficients[2], -1.17e6, epsilon = 1e-6);
        let root = (7800.0 + (7800.0f64.powi(2) + 4.0 * 11.0 * 1.17e6).sqrt()) / 22.0;
        assert_relative_eq!(v.rho.unwrap() * 100.0, root, max_relative = 1e-12);
    }

    #[test]
    fn root_equals_limit_curve_crossing() {
        for mu in [0.26, 0.3, 0.34, 0.4] {
            let v = classify(mu);
            let x = limit_curve_crossing(mu, 0.5, 100.0, 300.0).unwrap().unwrap();
            assert_relative_eq!(v.rho.unwrap() * 100.0, x, max_relative = 1e-6);
        }
        assert!(limit_curve_crossing(0.2, 0.5, 100.0, 300.0).unwrap().is_none());
    }

    #[test]
    fn verdict_flips_at_thresholds() {
        let v = classify(0.2);
        let around = |m2: f64| classify_model_shift(m2.sqrt(), 0.5, 100.0, 300.0).unwrap().regime;
        assert_eq!(around(v.mu2_low - 1e-9), Regime::AlwaysPositive);
        assert_eq!(around(v.mu2_low + 1e-9), Regime::Crossover);
        assert_eq!(around(v.mu2_high - 1e-9), Regime::Crossover);
        assert_eq!(around(v.mu2_high + 1e-9), Regime::AlwaysNegative);
    }

    #[test]
    fn rho_decreases_with_mu() {
        let r: Vec<f64> = [0.26, 0.30, 0.34].iter().map(|m| classify(*m).rho.unwrap()).collect();
        assert!(r[0] > r[1] && r[1] > r[2]);
    }

    #[test]
    fn degenerate_and_noiseless() {
        assert!(classify_model_shift(0.0, 0.0, 100.0, 300.0).is_err());
        assert_eq!(classify_model_shift(0.1, 0.0, 100.0, 300.0).unwrap().regime, Regime::AlwaysNegative);
    }

    #[test]
    fn small_target_window() {
        // n2 < 3p: with mu^2 = 2, sigma = 1 the roots are n1 = 50 and 150.
        let v = classify_model_shift(2f64.sqrt(), 1.0, 100.0, 150.0).unwrap();
        assert!(v.outside_proven_range);
        assert_eq!(v.regime, Regime::Crossover);
        let (lo, hi) = v.positive_window.unwrap();
        assert_relative_eq!(lo, 0.5, epsilon = 1e-12);
        assert_relative_eq!(hi, 1.5, epsilon = 1e-12);
        assert_relative_eq!(v.rho.unwrap(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn covariate_dichotomy() {
        let lam: Vec<f64> = (0..100).map(|i| if i < 50 { 4.0 } else { 0.25 }).collect();
        let helps = compare_covariate_shift(&lam, &SampleSizes::new(100.0, 100.0, 300.0).unwrap(), 1.0).unwrap();
        assert_eq!(helps.effect, ShiftEffect::ShiftHelps);
        assert!(helps.paired);
        let hurts = compare_covariate_shift(&lam, &SampleSizes::new(100.0, 900.0, 300.0).unwrap(), 1.0).unwrap();
        assert_eq!(hurts.effect, ShiftEffect::ShiftHurts);
        let tie = compare_covariate_shift(&[1.0; 100], &SampleSizes::new(100.0, 900.0, 300.0).unwrap(), 1.0).unwrap();
        assert_eq!(tie.effect, ShiftEffect::Tie);
    }

    #[test]
    fn dichotomy_agrees_with_alpha_order() {
        for hi in [1.5, 2.0, 4.0] {
            let lam: Vec<f64> = (0..100).map(|i| if i < 50 { hi } else { 1.0 / hi }).collect();
            for n1 in [100.0, 250.0, 350.0, 900.0] {
                let s = SampleSizes::new(100.0, n1, 300.0).unwrap();
                let c = compare_covariate_shift(&lam, &s, 1.0).unwrap();
                let al = solve_alpha12(1.0, &lam, &s).unwrap();
                assert_eq!(c.effect == ShiftEffect::ShiftHurts, al.alpha1 > al.alpha2, "{hi} {n1}");
            }
        }
    }

    #[test]
    fn width_rule() {
        let w = optimal_width_multitask(0.05, 0.5, 100.0, 300.0, 100.0, 10).unwrap();
        assert_relative_eq!(w.threshold, 0.125, epsilon = 1e-15);
        assert_eq!((w.r_star, w.positive_transfer), (1, true));
        assert_eq!(optimal_width_multitask(0.0, 0.5, 100.0, 300.0, 100.0, 10).unwrap().r_star, 1);
        let neg = optimal_width_multitask(0.4, 0.5, 100.0, 300.0, 100.0, 10).unwrap();
        assert_eq!((neg.r_star, neg.positive_transfer), (9, false));
    }
}
