use nalgebra::RealField;
use num_traits::ToPrimitive;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use std::fmt::{Debug, Display};

/// Floating point type the numerical core is generic over.
pub trait Scalar: RealField + Copy + ToPrimitive + Debug + Display + Send + Sync + 'static {
    /// Machine epsilon of the type.
    fn eps() -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Student-t draw with `dof` degrees of freedom, rescaled to unit variance.
    fn unit_student_t<R: Rng + ?Sized>(rng: &mut R, dist: &StudentT<f64>, dof: f64) -> Self;
}

impl Scalar for f64 {
    fn eps() -> Self {
        f64::EPSILON
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn unit_student_t<R: Rng + ?Sized>(rng: &mut R, dist: &StudentT<f64>, dof: f64) -> Self {
        dist.sample(rng) * ((dof - 2.0) / dof).sqrt()
    }
}

impl Scalar for f32 {
    fn eps() -> Self {
        f32::EPSILON
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn unit_student_t<R: Rng + ?Sized>(rng: &mut R, dist: &StudentT<f64>, dof: f64) -> Self {
        (dist.sample(rng) * ((dof - 2.0) / dof).sqrt()) as f32
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}
