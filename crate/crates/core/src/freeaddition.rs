//! Closed-form limits under model shift (equal covariances) and under an
//! isotropic target covariance.

use crate::error::{Error, Result};
use crate::model::SampleSizes;
use crate::roots::bisect_log;
use crate::scalar::{lit, Scalar};

/// Below this `|a|` the bias limit is extrapolated quadratically, since the
/// closed form cancels to `O(a^4) / a^2`.
pub const SMALL_RATIO: f64 = 5e-3;

/// Variance and bias multipliers of HPS at ratio `a` when both tasks share a covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShiftLimits<T: Scalar> {
    /// `L_var(a) -> sigma^2 * l1`.
    pub l1: T,
    /// `L_bias(a) -> |Sigma^{1/2}(beta1 - a beta2)|^2 * l2`.
    pub l2: T,
    pub kappa: T,
    /// `a^2 * l2`.
    pub bias_factor: T,
    pub a: T,
    pub xi1: T,
    pub xi2: T,
}

impl<T: Scalar> ModelShiftLimits<T> {
    pub fn variance(&self, sigma: T) -> T {
        sigma * sigma * self.l1
    }

    /// Bias limit given `|Sigma^{1/2}(beta1 - a beta2)|^2`.
    pub fn bias(&self, gap_sq: T) -> T {
        gap_sq * self.l2
    }
}

fn l1_kappa<T: Scalar>(a: T, s: &SampleSizes<T>) -> (T, T) {
    let (p, n1, n2) = (s.p, s.n1, s.n2);
    let a2 = a * a;
    let lin = (n2 - p) + a2 * (n1 - p);
    let l1 = lit::<T>(2.0) * p / (lin + (lin * lin + lit::<T>(4.0) * a2 * (n1 * p + n2 * p - p * p)).sqrt());
    let (xi1, xi2) = (s.xi1(), s.xi2());
    let kappa = l1 * l1 / (xi2 * xi2 * (T::one() + l1).powi(2)) / (T::one() - a2 * a2 * l1 * l1 / (xi1 * (T::one() + a2 * l1).powi(2)));
    (l1, kappa)
}

fn l2_direct<T: Scalar>(a: T, s: &SampleSizes<T>) -> T {
    let (l1, kappa) = l1_kappa(a, s);
    let xi2 = s.xi2();
    (T::one() - lit::<T>(2.0) * l1 / (xi2 * (T::one() + l1)) + kappa) / (T::one() - xi2 * kappa) / (a * a)
}

/// Evaluates the model-shift limits at ratio `a`.
pub fn model_shift_limits<T: Scalar>(a: T, sizes: &SampleSizes<T>) -> Result<ModelShiftLimits<T>> {
    if !a.is_finite() {
        return Err(Error::InvalidInput(format!("ratio must be finite, got {a}")));
    }
    let (l1, kappa) = l1_kappa(a, sizes);
    if !(l1 > T::zero()) {
        return Err(Error::NonFinite("variance multiplier"));
    }
    let small: T = lit(SMALL_RATIO);
    let l2 = if a.abs() >= small { l2_direct(a, sizes) } else { l2_direct(small, sizes) * (a / small).powi(2) };
    if !l2.is_finite() || !kappa.is_finite() {
        return Err(Error::NonFinite("bias multiplier"));
    }
    Ok(ModelShiftLimits { l1, l2, kappa, bias_factor: a * a * l2, a, xi1: sizes.xi1(), xi2: sizes.xi2() })
}

/// The triple `(f1, f2, f3)` of the free additive convolution at weight `alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FTriplet<T: Scalar> {
    pub f1: T,
    pub f2: T,
    pub f3: T,
}

impl<T: Scalar> FTriplet<T> {
    /// `(1 - 2 f1 f3 + f2 f3^2) / (1 - xi2 f2 f3^2)`, the normalised bias.
    pub fn bias_ratio(&self, xi2: T) -> T {
        let two: T = lit(2.0);
        (T::one() - two * self.f1 * self.f3 + self.f2 * self.f3 * self.f3) / (T::one() - xi2 * self.f2 * self.f3 * self.f3)
    }
}

/// `(f1, f2, f3)` at weight `alpha` with aspect ratios `xi1 = p/n1`, `xi2 = p/n2`.
pub fn f_alpha_triplet<T: Scalar>(alpha: T, xi1: T, xi2: T) -> Result<FTriplet<T>> {
    if !(alpha > T::zero()) || !(xi1 > T::zero()) || !(xi2 > T::zero()) || !(xi2 < T::one()) {
        return Err(Error::InvalidInput(format!("need alpha > 0, xi1 > 0, 0 < xi2 < 1 (got {alpha}, {xi1}, {xi2})")));
    }
    let b = alpha * (T::one() - xi2) + (T::one() - xi1);
    let c = alpha * (xi1 + xi2 - xi1 * xi2);
    let disc = (b * b + lit::<T>(4.0) * c).sqrt();
    // Pick the cancellation-free form of the positive root.
    let f1 = if b >= T::zero() { lit::<T>(2.0) / (b + disc) } else { (disc - b) / (lit::<T>(2.0) * c) };
    if !(f1 > T::zero()) {
        return Err(Error::NonFinite("f1"));
    }
    let f2 = T::one() / (T::one() / (f1 * f1) - xi1 / (T::one() + xi1 * f1).powi(2));
    let f3 = alpha / (T::one() + alpha * xi2 * f1);
    Ok(FTriplet { f1, f2, f3 })
}

/// Residual of the quadratic `c f^2 + b f - 1 = 0` that `f1` solves.
pub fn f1_quadratic_residual<T: Scalar>(alpha: T, xi1: T, xi2: T, f1: T) -> T {
    let b = alpha * (T::one() - xi2) + (T::one() - xi1);
    let c = alpha * (xi1 + xi2 - xi1 * xi2);
    c * f1 * f1 + b * f1 - T::one()
}

/// Limits for an isotropic target covariance and a general source spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformedMpLimits<T: Scalar> {
    pub y0: T,
    pub f1: T,
    pub f2: T,
    pub f3: T,
    /// Absolute residual of the defining equation of `y0`.
    pub residual: T,
    pub xi1: T,
    pub xi2: T,
}

impl<T: Scalar> DeformedMpLimits<T> {
    /// `sigma^2 (p / n1) f1`.
    pub fn variance(&self, sigma: T) -> T {
        sigma * sigma * self.xi1 * self.f1
    }

    /// `2 mu^2 (1 - 2 f1 f3 + f2 f3^2) / (1 - xi2 f2 f3^2)`.
    pub fn bias(&self, mu: T) -> T {
        lit::<T>(2.0) * mu * mu * FTriplet { f1: self.f1, f2: self.f2, f3: self.f3 }.bias_ratio(self.xi2)
    }
}

/// Solves for `y0` and the derived `(f1, f2, f3)` given the eigenvalues of the source covariance.
pub fn deformed_mp_limits<T: Scalar>(spectrum: &[T], sizes: &SampleSizes<T>) -> Result<DeformedMpLimits<T>> {
    if spectrum.len() as f64 != sizes.p.as_f64() {
        return Err(Error::DimensionMismatch { context: "source spectrum", expected: sizes.p.as_f64() as usize, found: spectrum.len() });
    }
    if spectrum.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
        return Err(Error::InvalidInput("source eigenvalues must be positive".into()));
    }
    let (p, n1, n2) = (sizes.p, sizes.n1, sizes.n2);
    let g0 = |x: T| spectrum.iter().map(|s| *s / (T::one() + x * *s)).fold(T::zero(), |a, b| a + b) / n1 - T::one() / x;
    let dg0 = |x: T| -spectrum.iter().map(|s| (*s / (T::one() + x * *s)).powi(2)).fold(T::zero(), |a, b| a + b) / n1 + T::one() / (x * x);
    let h = |x: T| (n1 + n2 - p) / n1 + g0(x) * (T::one() + x);
    let root = bisect_log(h, lit(1e-8), lit(1e8), 3, "deformed Marchenko-Pastur root")?;
    let y0 = root.x;
    let g = g0(y0);
    let f1 = n1 / p * y0 + (n1 - p) / (p * g);
    let f2 = n1 / (p * dg0(y0)) - (n1 - p) / (p * g * g);
    let f3 = -g;
    if !(f1.is_finite() && f2.is_finite() && f3.is_finite()) {
        return Err(Error::NonFinite("deformed Marchenko-Pastur limits"));
    }
    Ok(DeformedMpLimits { y0, f1, f2, f3, residual: root.residual.abs(), xi1: sizes.xi1(), xi2: sizes.xi2() })
}
