//! Regularized conditional score matching with the separable operator kernel
//! `Γ(x, x') = k_X(x, x') · Id`.
//!
//! The fitted natural parameter has the closed form
//!
//! ```text
//! T(x, y) = δ ξ̂(x, y) + Σ_{b,i} β_(b,i) k_X(X_b, x) ∂_i k(Y_b, y),    δ = -1/λ
//! ξ̂(x, y) = (1/n) Σ_{b,i} k_X(X_b, x) [∂_i² k(Y_b, y) + ∂_i log q0(Y_b) ∂_i k(Y_b, y)]
//! ```
//!
//! where `∂_i` acts on the first kernel argument and β solves
//! `(G + nλI) β = h/λ` with
//! `G_(a,i),(b,j) = k_X(X_a, X_b) ∂_i ∂_{j+d} k(Y_a, Y_b)` and
//! `h_(b,i) = ∂_{y_i} ξ̂(X_b, Y_b)`.
//!
//! Coefficient vectors are flattened row-major over (sample, dimension): the
//! entry for sample `b` and dimension `i` (both zero-based) sits at `b * d + i`.

use faer::linalg::solvers::Solve;
use faer::{Col, Mat, Side};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::kernels::{ConditioningKernel, DerivRequest, GaussianKernel};

/// Relative residual accepted for the regularized solve.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

const JITTER_ESCALATIONS: usize = 3;
const REFINEMENT_STEPS: usize = 5;

/// Centered isotropic Gaussian carrier density `q0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseDensity {
    std: f64,
}

impl Default for BaseDensity {
    fn default() -> Self {
        BaseDensity { std: Self::DEFAULT_STD }
    }
}

impl BaseDensity {
    pub const DEFAULT_STD: f64 = 2.0;

    pub fn new(std: f64) -> Result<Self> {
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "base density std must be positive and finite, got {std}"
            )));
        }
        Ok(BaseDensity { std })
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn log_pdf(&self, y: &[f64]) -> f64 {
        let norm = -(self.std * (2.0 * std::f64::consts::PI).sqrt()).ln();
        y.iter().map(|v| norm - 0.5 * (v / self.std) * (v / self.std)).sum()
    }

    /// `∂/∂y_i log q0(y)`, which only depends on the coordinate itself.
    #[inline]
    pub fn grad_log_pdf(&self, y_i: f64) -> f64 {
        -y_i / (self.std * self.std)
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for v in out {
            let z: f64 = rng.sample(StandardNormal);
            *v = self.std * z;
        }
    }
}

/// Derivative along one y-dimension for [`xi_hat`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct YDeriv {
    pub dim: usize,
    pub order: u8,
}

/// Assembled score-matching system: the `nd × nd` Gram matrix and `h`.
#[derive(Clone, Debug)]
pub struct GramSystem {
    pub g: Mat<f64>,
    pub h: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

fn check_training(
    x_train: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    kernel_x: &ConditioningKernel,
    kernel_y: &GaussianKernel,
) -> Result<()> {
    let n = y_train.nrows();
    if n == 0 {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    check_dim("training rows (x vs y)", n, x_train.nrows())?;
    check_dim("y kernel dimension", y_train.ncols(), kernel_y.dim())?;
    if let Some(p) = kernel_x.dim() {
        check_dim("x kernel dimension", x_train.ncols(), p)?;
    }
    if !x_train.iter().chain(y_train.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("training data"));
    }
    Ok(())
}

fn row(a: &ArrayView2<f64>, r: usize) -> Vec<f64> {
    a.row(r).to_vec()
}

/// Contiguous row-major copy, so rows can be borrowed as slices.
fn standard(a: ArrayView2<f64>) -> Array2<f64> {
    a.as_standard_layout().into_owned()
}

#[inline]
fn slice_row(a: &Array2<f64>, r: usize) -> &[f64] {
    let w = a.ncols();
    &a.as_slice().expect("standard layout")[r * w..(r + 1) * w]
}

/// Gram matrix `G_(a,i),(b,j) = k_X(X_a, X_b) ∂_i ∂_{j+d} k(Y_a, Y_b)`,
/// symmetrized as `(G + Gᵀ)/2`.
pub fn build_gram(
    x_train: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    kernel_x: &ConditioningKernel,
    kernel_y: &GaussianKernel,
) -> Result<Mat<f64>> {
    check_training(x_train, y_train, kernel_x, kernel_y)?;
    let x = standard(x_train);
    let y = standard(y_train);
    let (n, d) = y.dim();
    let size = n * d;
    let mut raw = vec![0.0; size * size];
    raw.par_chunks_mut(d * size).enumerate().for_each(|(a, block)| {
        let mut t = vec![0.0; d];
        let (xa, ya) = (slice_row(&x, a), slice_row(&y, a));
        for b in 0..n {
            let w = kernel_x.eval_unchecked(xa, slice_row(&x, b));
            let k = kernel_y.scaled_diff_into(ya, slice_row(&y, b), &mut t);
            for i in 0..d {
                for j in 0..d {
                    block[i * size + b * d + j] = w * kernel_y.partial_from(k, &t, DerivRequest::new(i, 1, j, 1));
                }
            }
        }
    });
    check_finite("Gram matrix", &raw)?;
    Ok(Mat::from_fn(size, size, |r, c| {
        0.5 * (raw[r * size + c] + raw[c * size + r])
    }))
}

/// `ξ̂(x, y)` or one of its y-partials.
#[allow(clippy::too_many_arguments)]
pub fn xi_hat(
    x_train: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    kernel_x: &ConditioningKernel,
    kernel_y: &GaussianKernel,
    base: &BaseDensity,
    x: &[f64],
    y: &[f64],
    deriv: Option<YDeriv>,
) -> Result<f64> {
    check_training(x_train, y_train, kernel_x, kernel_y)?;
    check_dim("evaluation x", x_train.ncols(), x.len())?;
    check_dim("evaluation y", y_train.ncols(), y.len())?;
    check_finite("evaluation point", x)?;
    check_finite("evaluation point", y)?;
    let (dim, order) = match deriv {
        Some(YDeriv { dim, order }) => {
            if order > 2 || dim >= y.len() {
                return Err(Error::InvalidParameter(format!(
                    "invalid y-derivative request (dim {dim}, order {order})"
                )));
            }
            (dim, order)
        }
        None => (0, 0),
    };
    let (n, d) = y_train.dim();
    let mut t = vec![0.0; d];
    let mut total = 0.0;
    for b in 0..n {
        let xb = row(&x_train, b);
        let yb = row(&y_train, b);
        let w = kernel_x.eval_unchecked(&xb, x);
        let k = kernel_y.scaled_diff_into(&yb, y, &mut t);
        for i in 0..d {
            let second = kernel_y.partial_from(k, &t, DerivRequest::new(i, 2, dim, order));
            let first = kernel_y.partial_from(k, &t, DerivRequest::new(i, 1, dim, order));
            total += w * (second + base.grad_log_pdf(yb[i]) * first);
        }
    }
    Ok(total / n as f64)
}

/// `h_(b,i) = ∂_{y_i} ξ̂(X_b, Y_b)`, flattened as `b * d + i`.
pub fn build_h(
    x_train: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    kernel_x: &ConditioningKernel,
    kernel_y: &GaussianKernel,
    base: &BaseDensity,
) -> Result<Vec<f64>> {
    check_training(x_train, y_train, kernel_x, kernel_y)?;
    let x = standard(x_train);
    let y = standard(y_train);
    let (n, d) = y.dim();
    let mut h = vec![0.0; n * d];
    h.par_chunks_mut(d).enumerate().for_each(|(b, out)| {
        let mut t = vec![0.0; d];
        let (xb, yb) = (slice_row(&x, b), slice_row(&y, b));
        for c in 0..n {
            let yc = slice_row(&y, c);
            let w = kernel_x.eval_unchecked(slice_row(&x, c), xb);
            let k = kernel_y.scaled_diff_into(yc, yb, &mut t);
            for i in 0..d {
                let score = base.grad_log_pdf(yc[i]);
                for (j, o) in out.iter_mut().enumerate() {
                    let second = kernel_y.partial_from(k, &t, DerivRequest::new(i, 2, j, 1));
                    let first = kernel_y.partial_from(k, &t, DerivRequest::new(i, 1, j, 1));
                    *o += w * (second + score * first);
                }
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
    });
    check_finite("h vector", &h)?;
    Ok(h)
}

/// `‖ξ̂‖²` in the joint RKHS, via second-order derivative reproducing on both
/// kernel arguments.
fn xi_norm_sq(
    x: &Array2<f64>,
    y: &Array2<f64>,
    kernel_x: &ConditioningKernel,
    kernel_y: &GaussianKernel,
    base: &BaseDensity,
) -> f64 {
    let (n, d) = y.dim();
    let mut t = vec![0.0; d];
    let mut total = 0.0;
    for b in 0..n {
        let yb = slice_row(y, b);
        for c in 0..n {
            let yc = slice_row(y, c);
            let w = kernel_x.eval_unchecked(slice_row(x, b), slice_row(x, c));
            let k = kernel_y.scaled_diff_into(yb, yc, &mut t);
            for i in 0..d {
                let sb = base.grad_log_pdf(yb[i]);
                for j in 0..d {
                    let sc = base.grad_log_pdf(yc[j]);
                    let p = |pi: u8, qj: u8| kernel_y.partial_from(k, &t, DerivRequest::new(i, pi, j, qj));
                    total += w * (p(2, 2) + sc * p(2, 1) + sb * p(1, 2) + sb * sc * p(1, 1));
                }
            }
        }
    }
    total / (n as f64 * n as f64)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl GramSystem {
    pub fn assemble(
        x_train: ArrayView2<f64>,
        y_train: ArrayView2<f64>,
        kernel_x: &ConditioningKernel,
        kernel_y: &GaussianKernel,
        base: &BaseDensity,
    ) -> Result<Self> {
        let g = build_gram(x_train, y_train, kernel_x, kernel_y)?;
        let h = build_h(x_train, y_train, kernel_x, kernel_y, base)?;
        let (n, d) = y_train.dim();
        Ok(GramSystem { g, h, n, d })
    }

    /// `‖(G + nλI)β - h/λ‖₂`.
    pub fn residual_norm(&self, lambda: f64, beta: &[f64]) -> f64 {
        let shift = self.n as f64 * lambda;
        let r = self.residual(shift, beta, &self.rhs(lambda));
        l2(&r)
    }

    fn rhs(&self, lambda: f64) -> Vec<f64> {
        self.h.iter().map(|v| v / lambda).collect()
    }

    fn residual(&self, shift: f64, beta: &[f64], rhs: &[f64]) -> Vec<f64> {
        let bcol = Col::from_fn(beta.len(), |i| beta[i]);
        let gb = &self.g * &bcol;
        (0..beta.len()).map(|i| rhs[i] - (gb[i] + shift * beta[i])).collect()
    }

    /// Solves `(G + nλI)β = h/λ` by Cholesky with jitter escalation and
    /// iterative refinement against the unjittered matrix.
    pub fn solve(&self, lambda: f64) -> Result<Vec<f64>> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive and finite, got {lambda}"
            )));
        }
        let size = self.g.nrows();
        let shift = self.n as f64 * lambda;
        let rhs = self.rhs(lambda);
        check_finite("right-hand side h/lambda", &rhs)?;
        let tolerance = RESIDUAL_TOLERANCE * l2(&rhs).max(1.0);

        let trace: f64 = (0..size).map(|i| self.g[(i, i)]).sum();
        let unit_jitter = 1e-10 * (trace / size as f64).max(f64::MIN_POSITIVE);
        let mut a = self.g.clone();
        for i in 0..size {
            a[(i, i)] += shift;
        }
        let mut jitter = 0.0;
        let mut escalation = 0;
        let factor = loop {
            match a.llt(Side::Lower) {
                Ok(f) => break f,
                Err(_) if escalation <= JITTER_ESCALATIONS => {
                    let next = unit_jitter * 10f64.powi(escalation as i32);
                    for i in 0..size {
                        a[(i, i)] += next - jitter;
                    }
                    log::debug!("Cholesky failed; retrying with diagonal jitter {next:e}");
                    jitter = next;
                    escalation += 1;
                }
                Err(e) => {
                    return Err(Error::Numerical(format!(
                        "Cholesky factorization failed after jitter {jitter:e}: {e:?}"
                    )))
                }
            }
        };

        let solve = |v: &[f64]| -> Vec<f64> {
            let col = Col::from_fn(v.len(), |i| v[i]);
            let x = factor.solve(&col);
            (0..v.len()).map(|i| x[i]).collect()
        };
        let mut beta = solve(&rhs);
        for _ in 0..REFINEMENT_STEPS {
            let r = self.residual(shift, &beta, &rhs);
            if l2(&r) <= tolerance {
                break;
            }
            for (b, c) in beta.iter_mut().zip(solve(&r)) {
                *b += c;
            }
        }
        check_finite("coefficients", &beta)?;
        let res = l2(&self.residual(shift, &beta, &rhs));
        if res > tolerance {
            return Err(Error::Numerical(format!(
                "regularized solve residual {res:e} exceeds tolerance {tolerance:e}"
            )));
        }
        Ok(beta)
    }
}

/// Natural parameter, first derivatives, and diagonal second derivatives of
/// `T(x, ·)` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct TDerivatives {
    pub value: f64,
    pub grad: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Level {
    Value,
    Gradient,
    Second,
}

/// One fitted conditional `p(y | x) ∝ q0(y) exp T(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    x_train: Array2<f64>,
    y_train: Array2<f64>,
    kernel_x: ConditioningKernel,
    kernel_y: GaussianKernel,
    lambda: f64,
    beta: Vec<f64>,
    xi_weight: f64,
    base: BaseDensity,
}

/// Fits one conditional by regularized score matching.
pub fn fit_factor(
    x_train: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    kernel_x: ConditioningKernel,
    kernel_y: GaussianKernel,
    lambda: f64,
    base: BaseDensity,
) -> Result<FactorModel> {
    let system = GramSystem::assemble(x_train, y_train, &kernel_x, &kernel_y, &base)?;
    let beta = system.solve(lambda)?;
    FactorModel::from_parts(
        x_train.to_owned(),
        y_train.to_owned(),
        kernel_x,
        kernel_y,
        lambda,
        beta,
        -1.0 / lambda,
        base,
    )
}

impl FactorModel {
    /// Builds a model from stored parts. `xi_weight` is the coefficient on
    /// `ξ̂`, which is `-1/λ` for every fitted model.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        x_train: Array2<f64>,
        y_train: Array2<f64>,
        kernel_x: ConditioningKernel,
        kernel_y: GaussianKernel,
        lambda: f64,
        beta: Vec<f64>,
        xi_weight: f64,
        base: BaseDensity,
    ) -> Result<Self> {
        check_training(x_train.view(), y_train.view(), &kernel_x, &kernel_y)?;
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive and finite, got {lambda}"
            )));
        }
        check_dim("coefficient vector", y_train.len(), beta.len())?;
        check_finite("coefficients", &beta)?;
        check_finite("xi weight", &[xi_weight])?;
        Ok(FactorModel {
            x_train: x_train.as_standard_layout().into_owned(),
            y_train: y_train.as_standard_layout().into_owned(),
            kernel_x,
            kernel_y,
            lambda,
            beta,
            xi_weight,
            base,
        })
    }

    /// A model with `T ≡ 0`, i.e. the base density itself.
    pub fn zero_natural_parameter(
        x_train: Array2<f64>,
        y_train: Array2<f64>,
        kernel_x: ConditioningKernel,
        kernel_y: GaussianKernel,
        lambda: f64,
        base: BaseDensity,
    ) -> Result<Self> {
        let beta = vec![0.0; y_train.len()];
        FactorModel::from_parts(x_train, y_train, kernel_x, kernel_y, lambda, beta, 0.0, base)
    }

    /// Same model with replaced expansion coefficients.
    pub fn with_coefficients(&self, beta: Vec<f64>, xi_weight: f64) -> Result<Self> {
        FactorModel::from_parts(
            self.x_train.clone(),
            self.y_train.clone(),
            self.kernel_x.clone(),
            self.kernel_y.clone(),
            self.lambda,
            beta,
            xi_weight,
            self.base,
        )
    }

    pub fn n(&self) -> usize {
        self.y_train.nrows()
    }
    pub fn x_dim(&self) -> usize {
        self.x_train.ncols()
    }
    pub fn y_dim(&self) -> usize {
        self.y_train.ncols()
    }
    pub fn x_train(&self) -> &Array2<f64> {
        &self.x_train
    }
    pub fn y_train(&self) -> &Array2<f64> {
        &self.y_train
    }
    pub fn kernel_x(&self) -> &ConditioningKernel {
        &self.kernel_x
    }
    pub fn kernel_y(&self) -> &GaussianKernel {
        &self.kernel_y
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }
    pub fn xi_weight(&self) -> f64 {
        self.xi_weight
    }
    pub fn base(&self) -> &BaseDensity {
        &self.base
    }

    fn check_point(&self, x: &[f64], y: &[f64]) -> Result<()> {
        check_dim("conditioning point", self.x_dim(), x.len())?;
        check_dim("response point", self.y_dim(), y.len())?;
        check_finite("conditioning point", x)?;
        check_finite("response point", y)
    }

    fn expand(&self, x: &[f64], y: &[f64], level: Level) -> TDerivatives {
        let (n, d) = self.y_train.dim();
        let xi_scale = self.xi_weight / n as f64;
        let mut t = vec![0.0; d];
        let mut out = TDerivatives {
            value: 0.0,
            grad: vec![0.0; if level >= Level::Gradient { d } else { 0 }],
            second: vec![0.0; if level >= Level::Second { d } else { 0 }],
        };
        let ky = &self.kernel_y;
        for b in 0..n {
            let w = self.kernel_x.eval_unchecked(slice_row(&self.x_train, b), x);
            if w == 0.0 {
                continue;
            }
            let yb = slice_row(&self.y_train, b);
            let k = ky.scaled_diff_into(yb, y, &mut t);
            if k == 0.0 {
                continue;
            }
            for i in 0..d {
                let c1 = self.beta[b * d + i] + xi_scale * self.base.grad_log_pdf(yb[i]);
                let c2 = xi_scale;
                let term = |j: usize, q: u8| {
                    c1 * ky.partial_from(k, &t, DerivRequest::new(i, 1, j, q))
                        + c2 * ky.partial_from(k, &t, DerivRequest::new(i, 2, j, q))
                };
                out.value += w * term(0, 0);
                if level >= Level::Gradient {
                    for j in 0..d {
                        out.grad[j] += w * term(j, 1);
                    }
                }
                if level >= Level::Second {
                    for j in 0..d {
                        out.second[j] += w * term(j, 2);
                    }
                }
            }
        }
        out
    }

    fn finite(out: TDerivatives) -> Result<TDerivatives> {
        if out.value.is_finite() && out.grad.iter().all(|v| v.is_finite()) && out.second.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite("natural parameter evaluation"))
        }
    }

    /// `T(x, y)`.
    pub fn eval_t(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_point(x, y)?;
        Ok(Self::finite(self.expand(x, y, Level::Value))?.value)
    }

    /// `∇_y T(x, y)`.
    pub fn grad_y_t(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x, y)?;
        Ok(Self::finite(self.expand(x, y, Level::Gradient))?.grad)
    }

    /// `(∂_j T, ∂_j² T)` for every y-dimension `j`.
    pub fn laplacian_terms_t(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.derivatives(x, y)?;
        Ok((out.grad, out.second))
    }

    /// Value, gradient and diagonal second derivatives in one pass.
    pub fn derivatives(&self, x: &[f64], y: &[f64]) -> Result<TDerivatives> {
        self.check_point(x, y)?;
        Self::finite(self.expand(x, y, Level::Second))
    }

    /// `log q0(y) + T(x, y)`; the normalizer `log Z(T_x)` is omitted.
    pub fn unnorm_logpdf(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.base.log_pdf(y) + self.eval_t(x, y)?)
    }

    /// Unnormalized log-density and its y-gradient in one pass.
    pub fn unnorm_logpdf_and_grad(&self, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_point(x, y)?;
        let mut out = Self::finite(self.expand(x, y, Level::Gradient))?;
        for (g, v) in out.grad.iter_mut().zip(y) {
            *g += self.base.grad_log_pdf(*v);
        }
        Ok((self.base.log_pdf(y) + out.value, out.grad))
    }

    /// Empirical score objective
    /// `(1/m) Σ_b Σ_i [½(∂_i T)² + ∂_i² T + ∂_i log q0 · ∂_i T]` over the rows.
    pub fn empirical_score(&self, x_eval: ArrayView2<f64>, y_eval: ArrayView2<f64>) -> Result<f64> {
        let m = y_eval.nrows();
        if m == 0 {
            return Err(Error::InvalidParameter("empirical score needs at least one row".into()));
        }
        check_dim("evaluation rows (x vs y)", m, x_eval.nrows())?;
        check_dim("evaluation x", self.x_dim(), x_eval.ncols())?;
        check_dim("evaluation y", self.y_dim(), y_eval.ncols())?;
        let terms: Result<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|b| {
                let x = x_eval.row(b).to_vec();
                let y = y_eval.row(b).to_vec();
                let dv = self.derivatives(&x, &y)?;
                Ok((0..y.len())
                    .map(|i| 0.5 * dv.grad[i] * dv.grad[i] + dv.second[i] + self.base.grad_log_pdf(y[i]) * dv.grad[i])
                    .sum())
            })
            .collect();
        Ok(terms?.iter().sum::<f64>() / m as f64)
    }

    /// Squared RKHS norm of the natural parameter,
    /// `δ²‖ξ̂‖² + 2δ βᵀh + βᵀGβ`.
    pub fn rkhs_norm_sq(&self) -> Result<f64> {
        let system = GramSystem::assemble(
            self.x_train.view(),
            self.y_train.view(),
            &self.kernel_x,
            &self.kernel_y,
            &self.base,
        )?;
        let xi = xi_norm_sq(&self.x_train, &self.y_train, &self.kernel_x, &self.kernel_y, &self.base);
        let bcol = Col::from_fn(self.beta.len(), |i| self.beta[i]);
        let gb = &system.g * &bcol;
        let bgb: f64 = (0..self.beta.len()).map(|i| self.beta[i] * gb[i]).sum();
        let bh: f64 = self.beta.iter().zip(&system.h).map(|(a, b)| a * b).sum();
        let delta = self.xi_weight;
        Ok(delta * delta * xi + 2.0 * delta * bh + bgb)
    }

    /// Regularized training objective `Ĵ(T) + (λ/2)‖T‖²`.
    pub fn regularized_objective(&self) -> Result<f64> {
        let score = self.empirical_score(self.x_train.view(), self.y_train.view())?;
        Ok(score + 0.5 * self.lambda * self.rkhs_norm_sq()?)
    }

    /// Fixes the conditioning point so that `T(x, ·)` can be evaluated many
    /// times without recomputing `k_X`.
    pub fn slice(&self, x: &[f64]) -> Result<ConditionalSlice<'_>> {
        check_dim("conditioning point", self.x_dim(), x.len())?;
        check_finite("conditioning point", x)?;
        let (n, d) = self.y_train.dim();
        let xi_scale = self.xi_weight / n as f64;
        let mut anchors = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for b in 0..n {
            let w = self.kernel_x.eval_unchecked(slice_row(&self.x_train, b), x);
            if w == 0.0 {
                continue;
            }
            let yb = slice_row(&self.y_train, b);
            anchors.extend_from_slice(yb);
            for i in 0..d {
                first.push(w * (self.beta[b * d + i] + xi_scale * self.base.grad_log_pdf(yb[i])));
                second.push(w * xi_scale);
            }
        }
        Ok(ConditionalSlice {
            model: self,
            anchors,
            first,
            second,
        })
    }
}

/// `T(x, ·)` at a fixed `x`, as a weighted sum of first and second kernel
/// derivatives around the training responses.
pub struct ConditionalSlice<'a> {
    model: &'a FactorModel,
    anchors: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl ConditionalSlice<'_> {
    fn accumulate(&self, y: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let d = y.len();
        let ky = &self.model.kernel_y;
        let inv_bw = ky.inv_bandwidths();
        let mut t = vec![0.0; d];
        let mut value = 0.0;
        let mut grad = grad;
        for (b, yb) in self.anchors.chunks_exact(d).enumerate() {
            let k = ky.scaled_diff_into(yb, y, &mut t);
            if k == 0.0 {
                continue;
            }
            for i in 0..d {
                let (c1, c2) = (self.first[b * d + i], self.second[b * d + i]);
                let (inv, ti) = (inv_bw[i], t[i]);
                value += k * (c2 * inv * inv * (ti * ti - 1.0) - c1 * inv * ti);
                if let Some(g) = grad.as_deref_mut() {
                    for (j, gj) in g.iter_mut().enumerate() {
                        *gj += c1 * ky.partial_from(k, &t, DerivRequest::new(i, 1, j, 1))
                            + c2 * ky.partial_from(k, &t, DerivRequest::new(i, 2, j, 1));
                    }
                }
            }
        }
        value
    }

    /// `T(x, y)`.
    pub fn eval_t(&self, y: &[f64]) -> Result<f64> {
        check_dim("response point", self.model.y_dim(), y.len())?;
        check_finite("response point", y)?;
        let v = self.accumulate(y, None);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("natural parameter evaluation"))
        }
    }

    /// `log q0(y) + T(x, y)` and its y-gradient.
    pub fn unnorm_logpdf_and_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim("response point", self.model.y_dim(), y.len())?;
        check_finite("response point", y)?;
        let base = &self.model.base;
        let mut grad: Vec<f64> = y.iter().map(|v| base.grad_log_pdf(*v)).collect();
        let value = base.log_pdf(y) + self.accumulate(y, Some(&mut grad));
        if value.is_finite() && grad.iter().all(|g| g.is_finite()) {
            Ok((value, grad))
        } else {
            Err(Error::NonFinite("natural parameter evaluation"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> GaussianKernel {
        GaussianKernel::isotropic(1, 1.0).unwrap()
    }

    fn random_instance(
        seed: u64,
        n: usize,
        p: usize,
        d: usize,
    ) -> (Array2<f64>, Array2<f64>, ConditioningKernel, GaussianKernel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.5..1.5));
        let y = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
        let kx = ConditioningKernel::Gaussian(
            GaussianKernel::new((0..p).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap(),
        );
        let ky = GaussianKernel::new((0..d).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap();
        (x, y, kx, ky)
    }

    #[test]
    fn single_point_gram_is_one() {
        let g = build_gram(
            array![[0.4]].view(),
            array![[-0.7]].view(),
            &ConditioningKernel::Gaussian(unit()),
            &unit(),
        )
        .unwrap();
        assert_eq!(g.nrows(), 1);
        assert!((g[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gram_matches_brute_force_double_loop() {
        let (x, y, kx, ky) = random_instance(3, 4, 2, 2);
        let g = build_gram(x.view(), y.view(), &kx, &ky).unwrap();
        for a in 0..4 {
            for i in 0..2 {
                for b in 0..4 {
                    for j in 0..2 {
                        let xa = x.row(a).to_vec();
                        let xb = x.row(b).to_vec();
                        let ya = y.row(a).to_vec();
                        let yb = y.row(b).to_vec();
                        let want =
                            kx.eval(&xa, &xb).unwrap() * ky.partial(&ya, &yb, DerivRequest::new(i, 1, j, 1)).unwrap();
                        assert!((g[(a * 2 + i, b * 2 + j)] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn duplicated_rows_replicate_gram_blocks() {
        let (x, y, kx, ky) = random_instance(5, 3, 1, 2);
        let g = build_gram(x.view(), y.view(), &kx, &ky).unwrap();
        let x2 = ndarray::concatenate![ndarray::Axis(0), x, x];
        let y2 = ndarray::concatenate![ndarray::Axis(0), y, y];
        let g2 = build_gram(x2.view(), y2.view(), &kx, &ky).unwrap();
        let s = g.nrows();
        for r in 0..2 * s {
            for c in 0..2 * s {
                assert_eq!(g2[(r, c)], g[(r % s, c % s)]);
            }
        }
    }

    #[test]
    fn xi_hat_single_point_example() {
        let kx = ConditioningKernel::Gaussian(unit());
        let v = xi_hat(
            array![[0.3]].view(),
            array![[0.0]].view(),
            &kx,
            &unit(),
            &BaseDensity::default(),
            &[0.3],
            &[0.0],
            None,
        )
        .unwrap();
        assert!((v + 1.0).abs() < 1e-15);
        let h = build_h(
            array![[0.3]].view(),
            array![[0.0]].view(),
            &kx,
            &unit(),
            &BaseDensity::default(),
        )
        .unwrap();
        assert_eq!(h, vec![0.0]);
    }

    #[test]
    fn xi_hat_is_linear_in_the_conditioning_kernel() {
        let (x, y, _, ky) = random_instance(8, 5, 1, 2);
        let base = BaseDensity::default();
        let one = xi_hat(
            x.view(),
            y.view(),
            &ConditioningKernel::Constant(1.0),
            &ky,
            &base,
            &[0.1],
            &[0.2, -0.3],
            None,
        )
        .unwrap();
        let two = xi_hat(
            x.view(),
            y.view(),
            &ConditioningKernel::Constant(2.0),
            &ky,
            &base,
            &[0.1],
            &[0.2, -0.3],
            None,
        )
        .unwrap();
        assert!((two - 2.0 * one).abs() <= 1e-14 * one.abs().max(1.0));
    }

    #[test]
    fn h_entries_are_xi_hat_partials() {
        let (x, y, kx, ky) = random_instance(11, 6, 2, 2);
        let base = BaseDensity::new(1.5).unwrap();
        let h = build_h(x.view(), y.view(), &kx, &ky, &base).unwrap();
        for b in 0..6 {
            for i in 0..2 {
                let xb = x.row(b).to_vec();
                let yb = y.row(b).to_vec();
                let want = xi_hat(
                    x.view(),
                    y.view(),
                    &kx,
                    &ky,
                    &base,
                    &xb,
                    &yb,
                    Some(YDeriv { dim: i, order: 1 }),
                )
                .unwrap();
                assert!((h[b * 2 + i] - want).abs() <= 1e-13 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn xi_hat_partials_match_finite_differences() {
        let (x, y, kx, ky) = random_instance(13, 5, 1, 2);
        let base = BaseDensity::default();
        let f =
            |yy: &[f64], deriv: Option<YDeriv>| xi_hat(x.view(), y.view(), &kx, &ky, &base, &[0.2], yy, deriv).unwrap();
        let y0 = [0.3, -0.2];
        let step = 1e-5;
        for dim in 0..2 {
            for order in 1..=2u8 {
                let lower = if order == 1 {
                    None
                } else {
                    Some(YDeriv { dim, order: order - 1 })
                };
                let (mut up, mut down) = (y0, y0);
                up[dim] += step;
                down[dim] -= step;
                let fd = (f(&up, lower) - f(&down, lower)) / (2.0 * step);
                let exact = f(&y0, Some(YDeriv { dim, order }));
                assert!(
                    (fd - exact).abs() <= 1e-5 * exact.abs().max(1e-3),
                    "{dim} {order}: {fd} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn fit_satisfies_residual_bound_and_zero_rhs_gives_zero_beta() {
        let (x, y, kx, ky) = random_instance(17, 12, 2, 2);
        let base = BaseDensity::default();
        let system = GramSystem::assemble(x.view(), y.view(), &kx, &ky, &base).unwrap();
        let beta = system.solve(0.05).unwrap();
        let rhs_norm = l2(&system.h) / 0.05;
        assert!(system.residual_norm(0.05, &beta) <= 1e-8 * rhs_norm.max(1.0));

        let zero = GramSystem {
            h: vec![0.0; system.h.len()],
            ..system
        };
        assert!(zero.solve(0.05).unwrap().iter().all(|&b| b == 0.0));
        assert!(zero.solve(0.0).is_err());
    }

    #[test]
    fn beta_norm_shrinks_with_lambda() {
        let (x, y, kx, ky) = random_instance(19, 15, 1, 1);
        let system = GramSystem::assemble(x.view(), y.view(), &kx, &ky, &BaseDensity::default()).unwrap();
        let norms: Vec<f64> = [1e-2, 1e-1, 1.0, 10.0]
            .iter()
            .map(|&l| l2(&system.solve(l).unwrap()))
            .collect();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{norms:?}");
        }
    }

    #[test]
    fn zero_beta_model_is_scaled_xi_hat() {
        let (x, y, kx, ky) = random_instance(23, 7, 1, 2);
        let base = BaseDensity::default();
        let fitted = fit_factor(x.view(), y.view(), kx.clone(), ky.clone(), 0.3, base).unwrap();
        let m = fitted.with_coefficients(vec![0.0; 14], -1.0 / 0.3).unwrap();
        let (xq, yq) = ([0.4], [0.1, -0.6]);
        let xi = xi_hat(x.view(), y.view(), &kx, &ky, &base, &xq, &yq, None).unwrap();
        assert!((m.eval_t(&xq, &yq).unwrap() + xi / 0.3).abs() < 1e-13);
        for j in 0..2 {
            let gxi = xi_hat(
                x.view(),
                y.view(),
                &kx,
                &ky,
                &base,
                &xq,
                &yq,
                Some(YDeriv { dim: j, order: 1 }),
            )
            .unwrap();
            assert!((m.grad_y_t(&xq, &yq).unwrap()[j] + gxi / 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (x, y, kx, ky) = random_instance(29, 10, 2, 2);
        let m = fit_factor(x.view(), y.view(), kx, ky, 0.1, BaseDensity::default()).unwrap();
        let xq = [0.2, -0.1];
        let y0 = [0.4, 0.3];
        let (g, s) = m.laplacian_terms_t(&xq, &y0).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let (mut up, mut down) = (y0, y0);
            up[j] += h;
            down[j] -= h;
            let fd1 = (m.eval_t(&xq, &up).unwrap() - m.eval_t(&xq, &down).unwrap()) / (2.0 * h);
            let fd2 = (m.grad_y_t(&xq, &up).unwrap()[j] - m.grad_y_t(&xq, &down).unwrap()[j]) / (2.0 * h);
            assert!((fd1 - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3));
            assert!((fd2 - s[j]).abs() <= 1e-5 * s[j].abs().max(1e-3));
        }
        let (lp, lg) = m.unnorm_logpdf_and_grad(&xq, &y0).unwrap();
        assert_eq!(lp, m.unnorm_logpdf(&xq, &y0).unwrap());
        for j in 0..2 {
            let (mut up, mut down) = (y0, y0);
            up[j] += h;
            down[j] -= h;
            let fd = (m.unnorm_logpdf(&xq, &up).unwrap() - m.unnorm_logpdf(&xq, &down).unwrap()) / (2.0 * h);
            assert!((fd - lg[j]).abs() <= 1e-5 * lg[j].abs().max(1e-3));
        }
    }

    #[test]
    fn slice_matches_full_evaluation() {
        let (x, y, kx, ky) = random_instance(41, 12, 2, 2);
        let m = fit_factor(x.view(), y.view(), kx, ky, 0.05, BaseDensity::default()).unwrap();
        let xq = [0.3, -0.6];
        let s = m.slice(&xq).unwrap();
        for yq in [[0.1, 0.2], [-1.3, 0.8], [2.0, -0.4]] {
            let t = m.eval_t(&xq, &yq).unwrap();
            assert!((s.eval_t(&yq).unwrap() - t).abs() <= 1e-12 * t.abs().max(1.0));
            let (lp, lg) = m.unnorm_logpdf_and_grad(&xq, &yq).unwrap();
            let (sp, sg) = s.unnorm_logpdf_and_grad(&yq).unwrap();
            assert!((lp - sp).abs() <= 1e-12 * lp.abs().max(1.0));
            for (a, b) in lg.iter().zip(&sg) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        assert!(m.slice(&[0.0]).is_err());
        assert!(s.eval_t(&[0.0]).is_err());
    }

    #[test]
    fn zero_model_reduces_to_base_density() {
        let (x, y, kx, ky) = random_instance(31, 5, 1, 1);
        let base = BaseDensity::default();
        let m = FactorModel::zero_natural_parameter(x.clone(), y.clone(), kx, ky, 0.1, base).unwrap();
        assert_eq!(m.eval_t(&[0.3], &[0.9]).unwrap(), 0.0);
        assert_eq!(m.unnorm_logpdf(&[0.3], &[0.9]).unwrap(), base.log_pdf(&[0.9]));
        assert_eq!(m.empirical_score(x.view(), y.view()).unwrap(), 0.0);
    }

    #[test]
    fn training_score_is_nonpositive() {
        for seed in 0..5 {
            let (x, y, kx, ky) = random_instance(100 + seed, 15, 1, 2);
            let m = fit_factor(x.view(), y.view(), kx, ky, 0.1, BaseDensity::default()).unwrap();
            assert!(m.empirical_score(x.view(), y.view()).unwrap() <= 0.0);
        }
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        let (x, y, kx, ky) = random_instance(37, 4, 2, 1);
        assert!(fit_factor(x.view(), y.view(), kx.clone(), ky.clone(), -1.0, BaseDensity::default()).is_err());
        let short = x.slice(ndarray::s![..3, ..]).to_owned();
        assert!(build_gram(short.view(), y.view(), &kx, &ky).is_err());
        let m = fit_factor(x.view(), y.view(), kx, ky, 0.5, BaseDensity::default()).unwrap();
        assert!(m.eval_t(&[0.0], &[0.0]).is_err());
        assert!(m.eval_t(&[0.0, 0.0], &[f64::NAN]).is_err());
        assert!(BaseDensity::new(0.0).is_err());
    }
}
