#![allow(dead_code)]

use kcef::{fit_factor, BaseDensity, ConditioningKernel, FactorModel, GaussianKernel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const QUAD_POINTS: usize = 4096;
pub const QUAD_HALF_WIDTH: f64 = 8.0;

/// Trapezoid nodes on `[lo, hi]`.
pub fn nodes(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let h = (hi - lo) / (count - 1) as f64;
    (0..count).map(|k| lo + h * k as f64).collect()
}

pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    h * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1]))
}

/// Normalizer and CDF of a 1-D unconditional factor on the ±8·std window.
pub struct QuadratureDensity {
    pub grid: Vec<f64>,
    pub log_z: f64,
    pub cdf: Vec<f64>,
}

impl QuadratureDensity {
    pub fn new(model: &FactorModel, x: &[f64]) -> Self {
        let w = QUAD_HALF_WIDTH * model.base().std();
        let grid = nodes(-w, w, QUAD_POINTS);
        let h = grid[1] - grid[0];
        let log_q: Vec<f64> = grid.iter().map(|&y| model.unnorm_logpdf(x, &[y]).unwrap()).collect();
        let shift = log_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = log_q.iter().map(|v| (v - shift).exp()).collect();
        let mass = trapezoid(&dens, h);
        let mut cdf = vec![0.0; grid.len()];
        for k in 1..grid.len() {
            cdf[k] = cdf[k - 1] + 0.5 * h * (dens[k] + dens[k - 1]) / mass;
        }
        QuadratureDensity {
            grid,
            log_z: shift + mass.ln(),
            cdf,
        }
    }

    /// `log Z(T_x) = log ∫ q0 exp T`.
    pub fn log_partition(&self) -> f64 {
        self.log_z
    }

    pub fn cdf_at(&self, y: f64) -> f64 {
        let h = self.grid[1] - self.grid[0];
        let pos = (y - self.grid[0]) / h;
        if pos <= 0.0 {
            return 0.0;
        }
        let k = pos.floor() as usize;
        if k + 1 >= self.grid.len() {
            return 1.0;
        }
        let f = pos - k as f64;
        self.cdf[k] * (1.0 - f) + self.cdf[k + 1] * f
    }
}

/// `sup_y |F_n(y) − F(y)|` for the empirical CDF of `samples`.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample Kolmogorov–Smirnov critical value at level 1%.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Fit to a two-component mixture whose modes overlap, so the fitted density
/// has no deep barrier between them.
pub fn mixture_model() -> FactorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let y = Array2::from_shape_fn((120, 1), |(i, _)| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        if i % 3 == 0 {
            1.2 + 0.5 * z
        } else {
            -0.4 + 0.7 * z
        }
    });
    fit_factor(
        Array2::zeros((120, 0)).view(),
        y.view(),
        ConditioningKernel::Constant(1.0),
        GaussianKernel::isotropic(1, 0.8).unwrap(),
        0.05,
        BaseDensity::default(),
    )
    .unwrap()
}
