//! Multi-task HPS with a shared design: the rank-`r` output layer is the top-`r`
//! eigenspace of `Y' P Y`, with `P` the projection onto the column span of `X`.

use crate::error::{Error, Result};
use crate::estimators::spd_factor;
use crate::model::CovarianceSpec;
use crate::scalar::{lit, Scalar};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Top-`r` eigenspace of a symmetric `t x t` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RankProjection<T: Scalar> {
    /// `t x r` orthonormal basis, each column with its first nonzero entry positive.
    pub u: DMatrix<T>,
    /// Eigenvalues in descending order.
    pub eigenvalues: Vec<T>,
    /// Set when `lambda_r` and `lambda_{r+1}` coincide, so the subspace is not unique.
    pub gap_degenerate: bool,
}

impl<T: Scalar> RankProjection<T> {
    /// `U U'`; its columns are the per-task output vectors `a_i`.
    pub fn projector(&self) -> DMatrix<T> {
        &self.u * self.u.transpose()
    }
}

fn orient<T: Scalar>(mut v: DVector<T>) -> DVector<T> {
    let scale = v.amax() * lit::<T>(1e-12);
    if let Some(x) = v.iter().find(|x| x.abs() > scale) {
        if *x < T::zero() {
            v.neg_mut();
        }
    }
    v
}

/// Best rank-`r` projection for a symmetric PSD matrix.
pub fn rank_r_projection<T: Scalar>(gram: &DMatrix<T>, r: usize) -> Result<RankProjection<T>> {
    let t = gram.nrows();
    if gram.ncols() != t {
        return Err(Error::DimensionMismatch { context: "task Gram matrix", expected: t, found: gram.ncols() });
    }
    if r == 0 || r > t {
        return Err(Error::InvalidInput(format!("width must satisfy 1 <= r <= t (r = {r}, t = {t})")));
    }
    let sym = (gram + gram.transpose()) * lit::<T>(0.5);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|i, j| eig.eigenvalues[*j].partial_cmp(&eig.eigenvalues[*i]).unwrap().then(i.cmp(j)));
    let eigenvalues: Vec<T> = order.iter().map(|i| eig.eigenvalues[*i]).collect();
    let cols: Vec<DVector<T>> = order[..r].iter().map(|i| orient(eig.eigenvectors.column(*i).into_owned())).collect();
    let gap_degenerate = r < t && (eigenvalues[r - 1] - eigenvalues[r]).abs() <= lit::<T>(1e-10) * eigenvalues[0].abs();
    if gap_degenerate {
        log::warn!("eigenvalues {r} and {} coincide; the rank-{r} projection is not unique", r + 1);
    }
    Ok(RankProjection { u: DMatrix::from_columns(&cols), eigenvalues, gap_degenerate })
}

/// Fitted multi-task HPS model.
#[derive(Debug, Clone)]
pub struct MultiTaskFit<T: Scalar> {
    /// `t x r` output-layer basis.
    pub u_hat: DMatrix<T>,
    /// Estimated coefficients, one column per task (`p x t`).
    pub beta_hats: DMatrix<T>,
    /// Eigenvalues of `Y' P Y`, descending.
    pub data_spectrum: Vec<T>,
    /// Training objective `|Y|_F^2 - tr(U' Y' P Y U)` at the fitted basis.
    pub objective: T,
    pub gap_degenerate: bool,
    /// True coefficients, when attached with [`MultiTaskFit::with_truth`].
    pub b_star: Option<DMatrix<T>>,
    /// Eigenvalues of `B*' Sigma B*`, descending, when the truth is attached.
    pub gram_spectrum: Option<Vec<T>>,
    ols: DMatrix<T>,
    gram_data: DMatrix<T>,
    yy: T,
    xtx_inv: DMatrix<T>,
}

impl<T: Scalar> MultiTaskFit<T> {
    /// Per-task output vector `a_i = U U' e_i`, as a `t x t` matrix of columns.
    pub fn output_vectors(&self) -> DMatrix<T> {
        &self.u_hat * self.u_hat.transpose()
    }

    /// Per-task OLS fits `(X'X)^{-1} X' Y`.
    pub fn ols(&self) -> &DMatrix<T> {
        &self.ols
    }

    /// Training objective for an arbitrary `t x r` orthonormal basis.
    pub fn projection_objective(&self, u: &DMatrix<T>) -> T {
        self.yy - (u.transpose() * &self.gram_data * u).trace()
    }

    /// Attaches the true coefficients and records the spectrum of `B*' Sigma B*`.
    pub fn with_truth(mut self, b_star: DMatrix<T>, cov: &CovarianceSpec<T>) -> Self {
        let g = task_gram(&b_star, cov);
        let mut ev: Vec<T> = SymmetricEigen::new(g).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        self.gram_spectrum = Some(ev);
        self.b_star = Some(b_star);
        self
    }

    /// Realised excess risk `(b_i - beta_i)' Sigma (b_i - beta_i)` per task.
    pub fn excess_risks(&self, b_star: &DMatrix<T>, cov: &CovarianceSpec<T>) -> Vec<T> {
        (0..b_star.ncols()).map(|i| cov.quad_form(&(self.beta_hats.column(i) - b_star.column(i)))).collect()
    }

    /// Bias and variance per task with the fitted basis held fixed:
    /// bias `(a_i - e_i)' B*' Sigma B* (a_i - e_i)`, variance `sigma^2 |a_i|^2 tr[Sigma (X'X)^{-1}]`.
    pub fn decomposed_risks(&self, b_star: &DMatrix<T>, cov: &CovarianceSpec<T>, sigma: T) -> Vec<(T, T)> {
        let g = task_gram(b_star, cov);
        let a = self.output_vectors();
        let tr = match cov {
            CovarianceSpec::Identity(_) => self.xtx_inv.trace(),
            _ => cov.to_matrix().component_mul(&self.xtx_inv).sum(),
        };
        (0..a.ncols())
            .map(|i| {
                let mut d = a.column(i).into_owned();
                d[i] -= T::one();
                let bias = d.dot(&(&g * &d));
                (bias, sigma * sigma * a.column(i).norm_squared() * tr)
            })
            .collect()
    }
}

/// `B' Sigma B`.
pub fn task_gram<T: Scalar>(b: &DMatrix<T>, cov: &CovarianceSpec<T>) -> DMatrix<T> {
    let sb = match cov {
        CovarianceSpec::Identity(_) => b.clone(),
        _ => cov.to_matrix() * b,
    };
    b.tr_mul(&sb)
}

/// Fits multi-task HPS of width `r` on a shared design `x` (`n x p`) with labels `ys` (`n x t`).
pub fn fit_multitask_hps<T: Scalar>(x: &DMatrix<T>, ys: &DMatrix<T>, r: usize) -> Result<MultiTaskFit<T>> {
    if x.nrows() != ys.nrows() {
        return Err(Error::DimensionMismatch { context: "multi-task labels", expected: x.nrows(), found: ys.nrows() });
    }
    if x.nrows() <= x.ncols() {
        return Err(Error::InvalidInput(format!("shared design needs n > p (n = {}, p = {})", x.nrows(), x.ncols())));
    }
    let chol = spd_factor(&x.tr_mul(x), "shared design Gram matrix")?;
    let xty = x.tr_mul(ys);
    let ols = chol.solve(&xty);
    let gram_data = xty.tr_mul(&ols);
    let proj = rank_r_projection(&gram_data, r)?;
    let beta_hats = &ols * proj.projector();
    let yy = ys.norm_squared();
    let objective = yy - (proj.u.transpose() * &gram_data * &proj.u).trace();
    Ok(MultiTaskFit {
        u_hat: proj.u,
        beta_hats,
        data_spectrum: proj.eigenvalues,
        objective,
        gap_degenerate: proj.gap_degenerate,
        b_star: None,
        gram_spectrum: None,
        ols,
        gram_data,
        yy,
        xtx_inv: chol.inverse(),
    })
}

/// Deterministic risk limits of width-`r` multi-task HPS.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskLimit<T: Scalar> {
    /// `L_i(B* a_i) + sigma^2 p / (n - p) |a_i|^2` for each task.
    pub per_task: Vec<T>,
    /// Mean over tasks.
    pub averaged: T,
    /// `|Sigma^{1/2} B* (A A' - I)|_F^2`.
    pub bias_frobenius: T,
    pub output_norms: Vec<T>,
    pub gap_degenerate: bool,
}

/// Limits from the population task Gram `B*' Sigma B*`.
pub fn multitask_risk_limit<T: Scalar>(gram: &DMatrix<T>, r: usize, p: T, n: T, sigma: T) -> Result<MultiTaskLimit<T>> {
    if !(n > p) {
        return Err(Error::InvalidInput(format!("need n > p (n = {n}, p = {p})")));
    }
    let t = gram.nrows();
    let proj = rank_r_projection(gram, r)?;
    let a = proj.projector();
    let var_unit = sigma * sigma * p / (n - p);
    let mut per_task = Vec::with_capacity(t);
    let mut output_norms = Vec::with_capacity(t);
    let mut bias_frobenius = T::zero();
    for i in 0..t {
        let mut d = a.column(i).into_owned();
        d[i] -= T::one();
        let bias = d.dot(&(gram * &d));
        let norm = a.column(i).norm_squared();
        bias_frobenius += bias;
        output_norms.push(norm);
        per_task.push(bias + var_unit * norm);
    }
    let averaged = per_task.iter().copied().fold(T::zero(), |x, y| x + y) / lit(t as f64);
    Ok(MultiTaskLimit { per_task, averaged, bias_frobenius, output_norms, gap_degenerate: proj.gap_degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fit_ols;
    use crate::model::{draw_beta0, sample_standard, Dataset, RandomEffectSpec};
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_data(seed: u64, n: usize, p: usize, t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = stream(seed, 0);
        let x = sample_standard(n, p, Default::default(), &mut rng);
        let ys = sample_standard(n, t, Default::default(), &mut rng);
        (x, ys)
    }

    fn random_effect(seed: u64, p: usize, n: usize, t: usize, mu: f64, sigma: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = stream(seed, 0);
        let spec = RandomEffectSpec::new(draw_beta0(p, 1.0, &mut rng), mu).unwrap();
        let b = spec.sample_matrix(t, &mut rng);
        let x: DMatrix<f64> = sample_standard(n, p, Default::default(), &mut rng);
        let noise: DMatrix<f64> = sample_standard(n, t, Default::default(), &mut rng);
        let ys = &x * &b + noise * sigma;
        (x, ys, b)
    }

    fn random_orthonormal(seed: u64, t: usize, r: usize) -> DMatrix<f64> {
        let g: DMatrix<f64> = sample_standard(t, r, Default::default(), &mut stream(seed, 1));
        g.qr().q()
    }

    #[test]
    fn full_width_is_per_task_ols() {
        let (x, ys) = random_data(1, 40, 6, 4);
        let fit = fit_multitask_hps(&x, &ys, 4).unwrap();
        for i in 0..4 {
            let ols = fit_ols(&Dataset::new(x.clone(), ys.column(i).into_owned()).unwrap()).unwrap();
            assert_relative_eq!(fit.beta_hats.column(i).into_owned(), ols, epsilon = 1e-8);
        }
    }

    #[test]
    fn identical_labels_rank_one() {
        let (x, ys) = random_data(2, 30, 5, 1);
        let both = DMatrix::from_columns(&[ys.column(0).into_owned(), ys.column(0).into_owned()]);
        let fit = fit_multitask_hps(&x, &both, 1).unwrap();
        let ols = fit_ols(&Dataset::new(x.clone(), ys.column(0).into_owned()).unwrap()).unwrap();
        assert_relative_eq!(fit.beta_hats.column(0).into_owned(), ols, epsilon = 1e-10);
        assert_relative_eq!(fit.beta_hats.column(1).into_owned(), ols, epsilon = 1e-10);
    }

    #[test]
    fn fitted_basis_beats_random_projections() {
        let (x, ys, _) = random_effect(3, 100, 300, 10, 0.05, 0.5);
        for r in [1, 3, 7] {
            let fit = fit_multitask_hps(&x, &ys, r).unwrap();
            assert_relative_eq!(fit.projection_objective(&fit.u_hat), fit.objective, max_relative = 1e-12);
            let direct = (&x * &fit.beta_hats - &ys).norm_squared();
            assert_relative_eq!(direct, fit.objective, max_relative = 1e-9);
            for k in 0..50 {
                let u = random_orthonormal(100 + k, 10, r);
                assert!(fit.objective <= fit.projection_objective(&u) + 1e-9);
            }
            assert_relative_eq!(fit.u_hat.tr_mul(&fit.u_hat), DMatrix::identity(r, r), epsilon = 1e-10);
        }
    }

    #[test]
    fn rank_one_gram() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let proj = rank_r_projection(&(&v * v.transpose()), 1).unwrap();
        assert_relative_eq!(proj.projector(), &v * v.transpose() / v.norm_squared(), epsilon = 1e-12);
        assert!(proj.u[(0, 0)] > 0.0);
    }

    #[test]
    fn random_effect_top_direction() {
        let mut rng = stream(4, 0);
        let spec = RandomEffectSpec::new(draw_beta0(100, 1.0, &mut rng), 0.05).unwrap();
        let b = spec.sample_matrix(10, &mut rng);
        let g = task_gram(&b, &CovarianceSpec::identity(100));
        let proj = rank_r_projection(&g, 1).unwrap();
        let ones = DVector::from_element(10, 1.0 / 10f64.sqrt());
        let angle = proj.u.column(0).dot(&ones).abs().min(1.0).acos();
        assert!(angle < 0.05, "{angle}");
    }

    #[test]
    fn degenerate_gap_flagged() {
        let proj = rank_r_projection(&DMatrix::<f64>::identity(4, 4), 2).unwrap();
        assert!(proj.gap_degenerate);
        assert!(!rank_r_projection(&DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0])), 2).unwrap().gap_degenerate);
    }

    #[test]
    fn full_width_limit_is_ols() {
        let g = DMatrix::<f64>::from_fn(5, 5, |i, j| if i == j { 2.0 } else { 0.5 });
        let lim = multitask_risk_limit(&g, 5, 100.0, 300.0, 0.5).unwrap();
        assert!(lim.bias_frobenius.abs() < 1e-12);
        assert_relative_eq!(lim.averaged, 0.125, epsilon = 1e-12);
    }

    #[test]
    fn random_effect_limit_formula() {
        // Exact gram c 11' + d I: smallest t - r eigenvalues are all d.
        let (t, c, d) = (10, 1.0, 0.0025);
        let g = DMatrix::<f64>::from_fn(t, t, |i, j| c + if i == j { d } else { 0.0 });
        let ols = 0.125;
        for r in 1..t {
            let lim = multitask_risk_limit(&g, r, 100.0, 300.0, 0.5).unwrap();
            let expect = (1.0 - r as f64 / t as f64) * (d - ols);
            assert_relative_eq!(lim.averaged - ols, expect, epsilon = 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn limit_identities(t in 2usize..9, seed in 0u64..500, rfrac in 0.0f64..1.0) {
            let r = 1 + ((t - 1) as f64 * rfrac) as usize;
            let m: DMatrix<f64> = sample_standard(t + 3, t, Default::default(), &mut stream(seed, 7));
            let g = m.tr_mul(&m);
            let lim = multitask_risk_limit(&g, r, 50.0, 200.0, 0.7).unwrap();
            let unit = 0.49 * 50.0 / 150.0;
            let lhs: f64 = lim.per_task.iter().sum();
            prop_assert!((lhs - (lim.bias_frobenius + unit * r as f64)).abs() < 1e-10 * lhs.abs().max(1.0));
            let norms: f64 = lim.output_norms.iter().sum();
            prop_assert!((norms - r as f64).abs() < 1e-10);
            let mut ev: Vec<f64> = SymmetricEigen::new(g.clone()).eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let small: f64 = ev[..t - r].iter().sum();
            prop_assert!((lim.bias_frobenius - small).abs() < 1e-9 * ev[t - 1].max(1.0));
        }

        #[test]
        fn full_width_reproduces_ols(seed in 0u64..200, t in 1usize..5) {
            let (x, ys) = random_data(seed, 25, 4, t);
            let fit = fit_multitask_hps(&x, &ys, t).unwrap();
            prop_assert!((&fit.beta_hats - fit.ols()).amax() < 1e-8);
        }
    }
}
