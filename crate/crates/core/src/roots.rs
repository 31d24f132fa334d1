//! Scalar root finding and one-dimensional minimisation.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Outcome of a bracketed root search.
#[derive(Debug, Clone, Copy)]
pub struct Root<T> {
    pub x: T,
    pub residual: T,
    pub iterations: usize,
}

/// Bisection on `[lo, hi]`. `f(lo)` and `f(hi)` must differ in sign.
///
/// Stops when the bracket is narrower than `tol`, when `f` vanishes exactly,
/// or when the midpoint can no longer be distinguished from an endpoint.
pub fn bisect<T: Scalar, F: FnMut(T) -> T>(mut f: F, lo: T, hi: T, tol: T, max_iter: usize, context: &'static str) -> Result<Root<T>> {
    let (mut a, mut b) = (lo, hi);
    let mut fa = f(a);
    let fb = f(b);
    if !fa.is_finite() || !fb.is_finite() {
        return Err(Error::NonFinite(context));
    }
    if fa == T::zero() {
        return Ok(Root { x: a, residual: fa, iterations: 0 });
    }
    if fb == T::zero() {
        return Ok(Root { x: b, residual: fb, iterations: 0 });
    }
    if (fa > T::zero()) == (fb > T::zero()) {
        return Err(Error::Bracket { context, detail: format!("no sign change on [{a}, {b}] (f = {fa}, {fb})") });
    }
    let half = lit::<T>(0.5);
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let m = a + (b - a) * half;
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if !fm.is_finite() {
            return Err(Error::NonFinite(context));
        }
        if fm == T::zero() {
            return Ok(Root { x: m, residual: fm, iterations: it });
        }
        if (fm > T::zero()) == (fa > T::zero()) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
        if b - a <= tol {
            break;
        }
    }
    let x = a + (b - a) * half;
    Ok(Root { x, residual: f(x), iterations: it })
}

/// Bisection in `log x` for a root on `(0, inf)`, starting from `[lo, hi]` and
/// widening the bracket tenfold at each end up to `expansions` times.
pub fn bisect_log<T: Scalar, F: FnMut(T) -> T>(mut f: F, lo: T, hi: T, expansions: usize, context: &'static str) -> Result<Root<T>> {
    let ten = lit::<T>(10.0);
    let (mut a, mut b) = (lo, hi);
    for k in 0..=expansions {
        let fa = f(a);
        let fb = f(b);
        if fa.is_finite() && fb.is_finite() && (fa > T::zero()) != (fb > T::zero()) {
            break;
        }
        if k == expansions {
            return Err(Error::Bracket { context, detail: format!("no sign change on [{a}, {b}] after {expansions} expansions") });
        }
        a /= ten;
        b *= ten;
    }
    let r = bisect(|u: T| f(u.exp()), a.ln(), b.ln(), T::zero(), 400, context)?;
    let x = r.x.exp();
    Ok(Root { x, residual: f(x), iterations: r.iterations })
}

/// Golden-section minimisation of a unimodal function on `[lo, hi]`.
/// Returns `(argmin, min)`.
pub fn golden_section<T: Scalar, F: FnMut(T) -> T>(mut f: F, lo: T, hi: T, width: T) -> (T, T) {
    let inv_phi = (lit::<T>(5.0).sqrt() - T::one()) * lit::<T>(0.5);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > width {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}
