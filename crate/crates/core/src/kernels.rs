//! Anisotropic Gaussian RBF kernels and their mixed partial derivatives.
//!
//! The kernel `k(y, y') = exp(-Σ_m (y_m - y'_m)² / (2σ_m²))` factorizes over
//! dimensions, so every mixed partial reduces to a product of one-dimensional
//! Gaussian derivatives. Those are `g⁽ⁿ⁾(r) = (-1/σ)ⁿ Heₙ(r/σ) g(r)` with `Heₙ`
//! the probabilists' Hermite polynomials, needed here up to `n = 4` (second
//! order in each argument along the same dimension).

use ndarray::ArrayView2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, check_finite, Error, Result};

/// Smallest bandwidth accepted at construction. Fourth derivatives scale as σ⁻⁴.
pub const MIN_BANDWIDTH: f64 = 1e-8;

/// Rows used by [`median_heuristic`] before subsampling kicks in.
pub const MEDIAN_SUBSAMPLE: usize = 1000;

/// Anisotropic Gaussian RBF kernel with one bandwidth per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    bandwidths: Vec<f64>,
    inv_bandwidths: Vec<f64>,
}

/// Mixed partial derivative selector: order `order_first` along `dim_first`
/// of the first argument, order `order_second` along `dim_second` of the
/// second argument. Orders are limited to `0..=2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DerivRequest {
    pub dim_first: usize,
    pub order_first: u8,
    pub dim_second: usize,
    pub order_second: u8,
}

impl DerivRequest {
    pub const fn new(dim_first: usize, order_first: u8, dim_second: usize, order_second: u8) -> Self {
        DerivRequest {
            dim_first,
            order_first,
            dim_second,
            order_second,
        }
    }

    /// The plain kernel value.
    pub const fn value() -> Self {
        DerivRequest::new(0, 0, 0, 0)
    }

    /// Request with the roles of the two arguments swapped.
    pub const fn mirrored(self) -> Self {
        DerivRequest::new(self.dim_second, self.order_second, self.dim_first, self.order_first)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.order_first > 2 || self.order_second > 2 {
            return Err(Error::InvalidParameter(format!(
                "derivative orders must lie in 0..=2, got ({}, {})",
                self.order_first, self.order_second
            )));
        }
        if self.dim_first >= dim || self.dim_second >= dim {
            return Err(Error::InvalidParameter(format!(
                "derivative dimensions ({}, {}) out of range for a {dim}-dimensional kernel",
                self.dim_first, self.dim_second
            )));
        }
        Ok(())
    }
}

/// Probabilists' Hermite polynomial `Heₙ(t)` for `n ≤ 4`.
#[inline]
fn hermite(n: u8, t: f64) -> f64 {
    let t2 = t * t;
    match n {
        0 => 1.0,
        1 => t,
        2 => t2 - 1.0,
        3 => t * (t2 - 3.0),
        4 => t2 * (t2 - 6.0) + 3.0,
        _ => unreachable!("kernel derivatives are limited to total order 4"),
    }
}

#[inline]
fn powi_inv(inv_sigma: f64, n: u8) -> f64 {
    match n {
        0 => 1.0,
        1 => inv_sigma,
        2 => inv_sigma * inv_sigma,
        3 => inv_sigma * inv_sigma * inv_sigma,
        _ => {
            let s2 = inv_sigma * inv_sigma;
            s2 * s2
        }
    }
}

impl GaussianKernel {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::InvalidParameter(
                "a Gaussian kernel needs at least one dimension".into(),
            ));
        }
        for (m, &s) in bandwidths.iter().enumerate() {
            if !s.is_finite() || s < MIN_BANDWIDTH {
                return Err(Error::InvalidParameter(format!(
                    "bandwidth {m} must be finite and at least {MIN_BANDWIDTH}, got {s}"
                )));
            }
        }
        let inv_bandwidths = bandwidths.iter().map(|s| 1.0 / s).collect();
        Ok(GaussianKernel {
            bandwidths,
            inv_bandwidths,
        })
    }

    pub fn isotropic(dim: usize, bandwidth: f64) -> Result<Self> {
        GaussianKernel::new(vec![bandwidth; dim])
    }

    pub fn dim(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub(crate) fn inv_bandwidths(&self) -> &[f64] {
        &self.inv_bandwidths
    }

    /// Same kernel with every bandwidth multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        GaussianKernel::new(self.bandwidths.iter().map(|s| s * factor).collect())
    }

    pub fn eval(&self, y: &[f64], y2: &[f64]) -> Result<f64> {
        self.check_points(y, y2)?;
        Ok(self.eval_unchecked(y, y2))
    }

    pub fn partial(&self, y: &[f64], y2: &[f64], req: DerivRequest) -> Result<f64> {
        self.check_points(y, y2)?;
        req.validate(self.dim())?;
        let mut t = vec![0.0; self.dim()];
        let k = self.scaled_diff_into(y, y2, &mut t);
        Ok(self.partial_from(k, &t, req))
    }

    fn check_points(&self, y: &[f64], y2: &[f64]) -> Result<()> {
        check_dim("kernel first argument", self.dim(), y.len())?;
        check_dim("kernel second argument", self.dim(), y2.len())?;
        check_finite("kernel argument", y)?;
        check_finite("kernel argument", y2)
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, y: &[f64], y2: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((a, b), inv) in y.iter().zip(y2).zip(&self.inv_bandwidths) {
            let t = (a - b) * inv;
            s += t * t;
        }
        (-0.5 * s).exp()
    }

    /// Fills `t[m] = (y_m - y2_m)/σ_m` and returns the kernel value.
    #[inline]
    pub(crate) fn scaled_diff_into(&self, y: &[f64], y2: &[f64], t: &mut [f64]) -> f64 {
        let mut s = 0.0;
        for m in 0..t.len() {
            let tm = (y[m] - y2[m]) * self.inv_bandwidths[m];
            t[m] = tm;
            s += tm * tm;
        }
        (-0.5 * s).exp()
    }

    /// Mixed partial from a kernel value `k` and scaled differences `t`
    /// produced by [`Self::scaled_diff_into`] for the same pair.
    #[inline]
    pub(crate) fn partial_from(&self, k: f64, t: &[f64], req: DerivRequest) -> f64 {
        let (i, p, j, q) = (req.dim_first, req.order_first, req.dim_second, req.order_second);
        // d/dy'_j = -d/dr_j on the difference r = y - y', hence the (-1)^q that
        // combines with (-1)^(p+q) from the 1-D derivative into (-1)^p.
        let sign = if p % 2 == 1 { -1.0 } else { 1.0 };
        let factor = if i == j {
            powi_inv(self.inv_bandwidths[i], p + q) * hermite(p + q, t[i])
        } else {
            powi_inv(self.inv_bandwidths[i], p)
                * hermite(p, t[i])
                * powi_inv(self.inv_bandwidths[j], q)
                * hermite(q, t[j])
        };
        sign * factor * k
    }
}

/// Real-valued kernel on the conditioning space. The constant kernel turns a
/// conditional fit into an unconditional one.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditioningKernel {
    Constant(f64),
    Gaussian(GaussianKernel),
}

impl ConditioningKernel {
    /// Input dimension, or `None` for the constant kernel which accepts any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ConditioningKernel::Constant(_) => None,
            ConditioningKernel::Gaussian(k) => Some(k.dim()),
        }
    }

    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        match self {
            ConditioningKernel::Constant(c) => Ok(*c),
            ConditioningKernel::Gaussian(k) => k.eval(x, x2),
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], x2: &[f64]) -> f64 {
        match self {
            ConditioningKernel::Constant(c) => *c,
            ConditioningKernel::Gaussian(k) => k.eval_unchecked(x, x2),
        }
    }
}

/// Per-dimension median of pairwise absolute coordinate differences.
///
/// At most [`MEDIAN_SUBSAMPLE`] rows are used, chosen with a generator seeded
/// by `seed`. Zero medians fall back to the smallest positive median, or 1.0
/// when every dimension is degenerate.
pub fn median_heuristic(data: ArrayView2<f64>, seed: u64) -> Result<Vec<f64>> {
    let (n, dim) = data.dim();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "median heuristic needs at least 2 rows, got {n}"
        )));
    }
    let rows: Vec<usize> = if n > MEDIAN_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, n, MEDIAN_SUBSAMPLE).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..n).collect()
    };

    let mut medians = Vec::with_capacity(dim);
    let mut diffs = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for m in 0..dim {
        diffs.clear();
        for (a, &ra) in rows.iter().enumerate() {
            for &rb in &rows[a + 1..] {
                diffs.push((data[[ra, m]] - data[[rb, m]]).abs());
            }
        }
        check_finite("median heuristic input", &diffs)?;
        medians.push(median_in_place(&mut diffs));
    }

    let floor = medians
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor } else { 1.0 };
    for v in &mut medians {
        if *v <= 0.0 {
            *v = floor;
        }
    }
    Ok(medians)
}

fn median_in_place(values: &mut [f64]) -> f64 {
    let len = values.len();
    let mid = len / 2;
    let (_, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if len % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}
