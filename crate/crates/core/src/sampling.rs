//! Hamiltonian Monte Carlo for fitted conditionals, ancestral sampling of
//! joint models, and the synthetic "grid" dataset.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::factorization::JointModel;
use crate::rng;
use crate::score_fit::{ConditionalSlice, FactorModel};

const CHAIN_STREAM: u64 = 0x4a3c;
const GRID_STREAM: u64 = 0x6e1d;
const INIT_CANDIDATES: usize = 100;

/// Upper bound on proposals for a single grid coordinate.
pub const GRID_TRIAL_CAP: u64 = 1_000_000;

/// Fixed-step HMC settings with a unit mass matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.1,
            leapfrog_steps: 20,
            burn_in: 100,
            thin: 10,
            chains: 20,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "HMC step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.leapfrog_steps == 0 || self.thin == 0 || self.chains == 0 {
            return Err(Error::InvalidParameter(
                "HMC leapfrog steps, thinning and chain count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Potential energy `U(q)` with gradient.
pub trait Potential {
    fn dim(&self) -> usize;

    /// Returns `U(q)` and writes `∇U(q)` into `grad`.
    fn potential_and_grad(&self, q: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// `U(y) = -log q0(y) - T(x, y)` for a fixed conditioning point.
pub struct ConditionalTarget<'a> {
    slice: ConditionalSlice<'a>,
    dim: usize,
}

impl<'a> ConditionalTarget<'a> {
    pub fn new(model: &'a FactorModel, x: &[f64]) -> Result<Self> {
        Ok(ConditionalTarget {
            slice: model.slice(x)?,
            dim: model.y_dim(),
        })
    }
}

impl Potential for ConditionalTarget<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn potential_and_grad(&self, q: &[f64], grad: &mut [f64]) -> Result<f64> {
        let (lp, g) = self.slice.unnorm_logpdf_and_grad(q)?;
        for (o, v) in grad.iter_mut().zip(g) {
            *o = -v;
        }
        Ok(-lp)
    }
}

/// Phase-space state carried through the integrator.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub potential: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    pub fn new<P: Potential>(target: &P, position: Vec<f64>, momentum: Vec<f64>) -> Result<Self> {
        let mut grad = vec![0.0; target.dim()];
        let potential = target.potential_and_grad(&position, &mut grad)?;
        Ok(PhasePoint {
            position,
            momentum,
            potential,
            grad,
        })
    }

    pub fn hamiltonian(&self) -> f64 {
        self.potential + 0.5 * self.momentum.iter().map(|p| p * p).sum::<f64>()
    }
}

/// `steps` leapfrog updates of size `step` (negative steps integrate backward).
pub fn leapfrog<P: Potential>(target: &P, state: &mut PhasePoint, step: f64, steps: usize) -> Result<()> {
    for _ in 0..steps {
        for (p, g) in state.momentum.iter_mut().zip(&state.grad) {
            *p -= 0.5 * step * g;
        }
        for (q, p) in state.position.iter_mut().zip(&state.momentum) {
            *q += step * p;
        }
        state.potential = target.potential_and_grad(&state.position, &mut state.grad)?;
        for (p, g) in state.momentum.iter_mut().zip(&state.grad) {
            *p -= 0.5 * step * g;
        }
    }
    Ok(())
}

/// Samples and diagnostics from one HMC run.
#[derive(Clone, Debug, PartialEq)]
pub struct HmcRun {
    pub samples: Array2<f64>,
    /// Mean Metropolis acceptance probability over all transitions.
    pub mean_accept_prob: f64,
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    accept_prob_sum: f64,
    transitions: usize,
}

fn run_chain<P: Potential, R: Rng>(
    target: &P,
    init: Vec<f64>,
    config: &HmcConfig,
    draws: usize,
    rng: &mut R,
) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut current = PhasePoint::new(target, init, vec![0.0; dim])?;
    let total = config.burn_in + config.thin * draws;
    let mut out = ChainOutput {
        draws: Vec::with_capacity(draws),
        accept_prob_sum: 0.0,
        transitions: total,
    };
    for it in 1..=total {
        let mut proposal = current.clone();
        for p in proposal.momentum.iter_mut() {
            *p = rng.sample(StandardNormal);
        }
        let h_old = proposal.hamiltonian();
        // Non-finite potentials along the trajectory count as rejections.
        let accept_prob = match leapfrog(target, &mut proposal, config.step_size, config.leapfrog_steps) {
            Ok(()) => {
                let h_new = proposal.hamiltonian();
                if h_new.is_finite() {
                    (h_old - h_new).exp().min(1.0)
                } else {
                    0.0
                }
            }
            Err(_) => 0.0,
        };
        let u: f64 = rng.random();
        if u < accept_prob {
            current = proposal;
        }
        out.accept_prob_sum += accept_prob;
        if it > config.burn_in && (it - config.burn_in).is_multiple_of(config.thin) {
            out.draws.push(current.position.clone());
        }
    }
    Ok(out)
}

/// Sampling-importance-resampling start: draws candidates from the base
/// density and picks one with probability proportional to `exp(-U + log q0)`,
/// i.e. `exp T`.
fn initial_point<R: Rng>(target: &ConditionalTarget<'_>, model: &FactorModel, rng: &mut R) -> Result<Vec<f64>> {
    let d = target.dim();
    let mut candidates = Vec::with_capacity(INIT_CANDIDATES);
    let mut log_w = Vec::with_capacity(INIT_CANDIDATES);
    let mut grad = vec![0.0; d];
    for _ in 0..INIT_CANDIDATES {
        let mut y = vec![0.0; d];
        model.base().sample_into(rng, &mut y);
        if let Ok(u) = target.potential_and_grad(&y, &mut grad) {
            if u.is_finite() && grad.iter().all(|g| g.is_finite()) {
                log_w.push(-u - model.base().log_pdf(&y));
                candidates.push(y);
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Numerical(format!(
            "no finite starting potential among {INIT_CANDIDATES} draws from the base density"
        )));
    }
    let shift = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|v| (v - shift).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (y, wi) in candidates.iter().zip(&w) {
        if u < *wi {
            return Ok(y.clone());
        }
        u -= wi;
    }
    Ok(candidates.pop().expect("non-empty"))
}

/// Draws `count` samples of `y ~ p(y | x)`.
///
/// Each chain starts from one of 100 base-density draws, resampled in
/// proportion to `exp T`, runs `burn_in` transitions,
/// then keeps every `thin`-th state; chain `c` uses the random stream
/// `(config.seed, c)`. Samples are stacked chain by chain.
pub fn hmc_sample_conditional(model: &FactorModel, x: &[f64], count: usize, config: &HmcConfig) -> Result<HmcRun> {
    config.validate()?;
    let target = ConditionalTarget::new(model, x)?;
    let d = model.y_dim();
    let per_chain = count.div_ceil(config.chains);
    let chains: Vec<ChainOutput> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(config.seed, &[CHAIN_STREAM, c as u64]);
            let init = initial_point(&target, model, &mut rng)?;
            run_chain(&target, init, config, per_chain, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut samples = Array2::zeros((count, d));
    let mut rows = chains.iter().flat_map(|c| c.draws.iter());
    for mut out in samples.rows_mut() {
        let draw = rows.next().expect("enough draws");
        out.iter_mut().zip(draw).for_each(|(o, v)| *o = *v);
    }
    let transitions: usize = chains.iter().map(|c| c.transitions).sum();
    let accept: f64 = chains.iter().map(|c| c.accept_prob_sum).sum();
    Ok(HmcRun {
        samples,
        mean_accept_prob: if transitions > 0 {
            accept / transitions as f64
        } else {
            1.0
        },
    })
}

/// Ancestral sampling in column order, returned in original data units.
///
/// Parentless nodes take all `count` draws from a single multi-chain run.
/// Nodes with parents run one single-chain HMC per output row, conditioned on
/// that row's already-sampled parents, seeded from `(seed, node, row)`.
pub fn ancestral_sample(model: &JointModel, count: usize, config: &HmcConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let d = model.node_count();
    let mut values = Array2::zeros((count, d));
    for node in 0..d {
        let factor = &model.factors()[node];
        if model.dag().parents(node).is_empty() {
            let node_config = HmcConfig {
                seed: rng::derive_seed(config.seed, &[node as u64]),
                ..config.clone()
            };
            let run = hmc_sample_conditional(factor, &[], count, &node_config).map_err(|e| e.at_node(node))?;
            values.column_mut(node).assign(&run.samples.column(0));
        } else {
            let column: Vec<f64> = (0..count)
                .into_par_iter()
                .map(|r| {
                    let parents = model.parent_values(node, values.row(r).as_slice().expect("standard layout"));
                    let row_config = HmcConfig {
                        chains: 1,
                        seed: rng::derive_seed(config.seed, &[node as u64, r as u64]),
                        ..config.clone()
                    };
                    let run = hmc_sample_conditional(factor, &parents, 1, &row_config).map_err(|e| e.at_node(node))?;
                    Ok(run.samples[[0, 0]])
                })
                .collect::<Result<_>>()?;
            values.column_mut(node).assign(&ndarray::Array1::from(column));
        }
    }
    model.standardization().invert(values.view())
}

/// Synthetic grid distribution: `x₁` uniform on the support and
/// `p(x_i | x_{i-1}) ∝ 1 + sin(2π wᵃ_i x_i) sin(2π wᵇ_i x_{i-1})`.
/// Weight index 0 is unused.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDatasetConfig {
    pub dim: usize,
    pub n: usize,
    pub weights_a: Vec<f64>,
    pub weights_b: Vec<f64>,
    pub support: (f64, f64),
    pub seed: u64,
}

impl GridDatasetConfig {
    /// Unit weights on `[0, 1]`.
    pub fn new(dim: usize, n: usize, seed: u64) -> Self {
        GridDatasetConfig {
            dim,
            n,
            weights_a: vec![1.0; dim],
            weights_b: vec![1.0; dim],
            support: (0.0, 1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n == 0 {
            return Err(Error::InvalidParameter("grid dim and n must be at least 1".into()));
        }
        check_dim("grid weights a", self.dim, self.weights_a.len())?;
        check_dim("grid weights b", self.dim, self.weights_b.len())?;
        check_finite("grid weights", &self.weights_a)?;
        check_finite("grid weights", &self.weights_b)?;
        let (lo, hi) = self.support;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!("bad grid support [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Unnormalized conditional `1 + sin(2π wᵃ_i x) sin(2π wᵇ_i x_prev)` for `i ≥ 1`.
    pub fn bracket(&self, i: usize, x: f64, x_prev: f64) -> f64 {
        1.0 + (2.0 * PI * self.weights_a[i] * x).sin() * (2.0 * PI * self.weights_b[i] * x_prev).sin()
    }

    /// `∫ bracket dx` over the support, in closed form.
    pub fn normalizer(&self, i: usize, x_prev: f64) -> f64 {
        let (lo, hi) = self.support;
        let wa = self.weights_a[i];
        let sine_integral = if wa == 0.0 {
            0.0
        } else {
            ((2.0 * PI * wa * lo).cos() - (2.0 * PI * wa * hi).cos()) / (2.0 * PI * wa)
        };
        (hi - lo) + (2.0 * PI * self.weights_b[i] * x_prev).sin() * sine_integral
    }

    /// Exact joint log-density; `-∞` outside the support.
    pub fn log_density(&self, row: &[f64]) -> f64 {
        let (lo, hi) = self.support;
        if row.iter().any(|&v| !(lo..=hi).contains(&v)) {
            return f64::NEG_INFINITY;
        }
        let mut total = -(hi - lo).ln();
        for i in 1..row.len() {
            total += (self.bracket(i, row[i], row[i - 1]) / self.normalizer(i, row[i - 1])).ln();
        }
        total
    }
}

/// Grid data plus rejection statistics for coordinates `i ≥ 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    pub data: Array2<f64>,
    pub proposals: u64,
    pub accepted: u64,
}

impl GridSample {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Coordinate-wise rejection sampling with a uniform proposal, accepting
/// `x_i` with probability `bracket / 2`.
pub fn rejection_sample_grid(config: &GridDatasetConfig) -> Result<GridSample> {
    config.validate()?;
    let (lo, hi) = config.support;
    let mut rng = rng::stream(config.seed, &[GRID_STREAM]);
    let mut data = Array2::zeros((config.n, config.dim));
    let (mut proposals, mut accepted) = (0u64, 0u64);
    for r in 0..config.n {
        data[[r, 0]] = rng.random_range(lo..hi);
        for i in 1..config.dim {
            let prev = data[[r, i - 1]];
            let mut trials = 0u64;
            loop {
                if trials == GRID_TRIAL_CAP {
                    return Err(Error::Numerical(format!(
                        "grid coordinate {i} rejected {GRID_TRIAL_CAP} proposals in a row"
                    )));
                }
                trials += 1;
                let x: f64 = rng.random_range(lo..hi);
                let u: f64 = rng.random();
                if 2.0 * u < config.bracket(i, x, prev) {
                    data[[r, i]] = x;
                    break;
                }
            }
            proposals += trials;
            accepted += 1;
        }
    }
    Ok(GridSample {
        data,
        proposals,
        accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{ConditioningKernel, GaussianKernel};
    use crate::score_fit::{fit_factor, BaseDensity};

    struct Quadratic;

    impl Potential for Quadratic {
        fn dim(&self) -> usize {
            2
        }
        fn potential_and_grad(&self, q: &[f64], grad: &mut [f64]) -> Result<f64> {
            grad[0] = q[0];
            grad[1] = 4.0 * q[1];
            Ok(0.5 * q[0] * q[0] + 2.0 * q[1] * q[1])
        }
    }

    fn fitted_1d() -> FactorModel {
        let y = Array2::from_shape_fn((40, 1), |(i, _)| ((i as f64) * 0.37).sin() * 1.2);
        fit_factor(
            Array2::zeros((40, 0)).view(),
            y.view(),
            ConditioningKernel::Constant(1.0),
            GaussianKernel::isotropic(1, 0.8).unwrap(),
            0.1,
            BaseDensity::default(),
        )
        .unwrap()
    }

    #[test]
    fn leapfrog_is_reversible() {
        let mut s = PhasePoint::new(&Quadratic, vec![0.3, -0.7], vec![1.1, 0.4]).unwrap();
        let start = s.clone();
        leapfrog(&Quadratic, &mut s, 0.05, 40).unwrap();
        for p in s.momentum.iter_mut() {
            *p = -*p;
        }
        leapfrog(&Quadratic, &mut s, 0.05, 40).unwrap();
        for (a, b) in s.position.iter().zip(&start.position) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        let m = fitted_1d();
        let target = ConditionalTarget::new(&m, &[]).unwrap();
        let err = |h: f64| {
            let mut s = PhasePoint::new(&target, vec![0.2], vec![0.9]).unwrap();
            let h0 = s.hamiltonian();
            leapfrog(&target, &mut s, h, (1.0 / h).round() as usize).unwrap();
            (s.hamiltonian() - h0).abs()
        };
        assert!(err(0.025) <= 0.3 * err(0.05));
    }

    #[test]
    fn validates_config() {
        let m = fitted_1d();
        let bad = HmcConfig {
            step_size: 0.0,
            ..HmcConfig::default()
        };
        assert!(hmc_sample_conditional(&m, &[], 10, &bad).is_err());
        let bad = HmcConfig {
            chains: 0,
            ..HmcConfig::default()
        };
        assert!(hmc_sample_conditional(&m, &[], 10, &bad).is_err());
        assert!(hmc_sample_conditional(&m, &[1.0], 10, &HmcConfig::default()).is_err());
    }

    #[test]
    fn tiny_steps_almost_always_accept() {
        let m = fitted_1d();
        let cfg = HmcConfig {
            step_size: 1e-4,
            burn_in: 10,
            chains: 4,
            ..HmcConfig::default()
        };
        let run = hmc_sample_conditional(&m, &[], 40, &cfg).unwrap();
        assert!(run.mean_accept_prob > 0.99);
    }

    #[test]
    fn same_seed_same_samples() {
        let m = fitted_1d();
        let cfg = HmcConfig {
            burn_in: 20,
            chains: 3,
            seed: 5,
            ..HmcConfig::default()
        };
        let a = hmc_sample_conditional(&m, &[], 30, &cfg).unwrap();
        let b = hmc_sample_conditional(&m, &[], 30, &cfg).unwrap();
        assert_eq!(a, b);
        let c = hmc_sample_conditional(&m, &[], 30, &HmcConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn grid_normalizer_and_density() {
        let cfg = GridDatasetConfig {
            weights_a: vec![0.0, 1.3],
            weights_b: vec![0.0, 0.7],
            ..GridDatasetConfig::new(2, 1, 0)
        };
        // Midpoint rule against the closed form.
        let m = 20_000;
        let quad: f64 = (0..m)
            .map(|k| cfg.bracket(1, (k as f64 + 0.5) / m as f64, 0.3))
            .sum::<f64>()
            / m as f64;
        assert!((quad - cfg.normalizer(1, 0.3)).abs() < 1e-8);
        assert_eq!(cfg.log_density(&[1.2, 0.5]), f64::NEG_INFINITY);
        let unit = GridDatasetConfig::new(2, 1, 0);
        assert!((unit.normalizer(1, 0.4) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_sampler_is_deterministic_and_in_support() {
        let cfg = GridDatasetConfig::new(3, 300, 11);
        let a = rejection_sample_grid(&cfg).unwrap();
        let b = rejection_sample_grid(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(a.accepted, 600);
        let one = rejection_sample_grid(&GridDatasetConfig::new(1, 10, 1)).unwrap();
        assert_eq!(one.data.ncols(), 1);
        assert!(rejection_sample_grid(&GridDatasetConfig::new(0, 10, 1)).is_err());
    }
}
