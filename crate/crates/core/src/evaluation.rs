//! Normalization by importance sampling, held-out log-likelihood,
//! cross-validated hyperparameter selection and the Fisher divergence.

use std::collections::HashMap;
use std::sync::RwLock;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data_io::{standardize, StandardizedDataset};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::factorization::{fit_joint, node_columns, node_kernels, DagSpec, JointModel, NodeHyperparams};
use crate::rng;
use crate::score_fit::{BaseDensity, FactorModel, GramSystem};

const IS_STREAM: u64 = 0x15a3;
const CV_STREAM: u64 = 0xc7f0;
const DEMO_STREAM: u64 = 0xd3e0;

/// Monte Carlo estimate of `log Z(T_x) = log E_{q0}[exp T(x, y)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogPartitionEstimate {
    pub log_z: f64,
    /// Delta-method standard error of `log_z`.
    pub std_err: f64,
    pub sample_count: usize,
}

/// Importance sampling with `q0` itself as the proposal.
pub fn log_partition_is(model: &FactorModel, x: &[f64], num_samples: usize, seed: u64) -> Result<LogPartitionEstimate> {
    if num_samples == 0 {
        return Err(Error::InvalidParameter(
            "importance sampling needs at least one sample".into(),
        ));
    }
    let slice = model.slice(x)?;
    let mut rng = rng::stream(seed, &[IS_STREAM]);
    let mut y = vec![0.0; model.y_dim()];
    let mut t = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        model.base().sample_into(&mut rng, &mut y);
        t.push(slice.eval_t(&y)?);
    }
    log_mean_exp(&t)
}

/// `log((1/N) Σ exp t_s)` with its delta-method standard error.
pub fn log_mean_exp(t: &[f64]) -> Result<LogPartitionEstimate> {
    let n = t.len();
    if n == 0 {
        return Err(Error::InvalidParameter("log-mean-exp of an empty sample".into()));
    }
    let shift = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::Numerical("importance weights are not finite".into()));
    }
    let w: Vec<f64> = t.iter().map(|v| (v - shift).exp()).collect();
    let mean = w.iter().sum::<f64>() / n as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::Numerical("all importance weights vanished".into()));
    }
    let std_err = if n > 1 {
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        var.sqrt() / (mean * (n as f64).sqrt())
    } else {
        0.0
    };
    Ok(LogPartitionEstimate {
        log_z: shift + mean.ln(),
        std_err,
        sample_count: n,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct CacheKey {
    node: usize,
    x: Vec<i64>,
    seed: u64,
    samples: usize,
}

/// Partition estimates keyed by node, conditioning point rounded to 1e-12,
/// seed and sample count. A cache must only serve a single model.
#[derive(Debug, Default)]
pub struct PartitionCache {
    entries: RwLock<HashMap<CacheKey, LogPartitionEstimate>>,
}

impl PartitionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached estimate for `node` at `x`. The sampling stream is derived from
    /// the key, so the result does not depend on evaluation order.
    pub fn log_partition(
        &self,
        model: &JointModel,
        node: usize,
        x: &[f64],
        num_samples: usize,
        seed: u64,
    ) -> Result<LogPartitionEstimate> {
        let rounded: Vec<i64> = x.iter().map(|v| (v * 1e12).round() as i64).collect();
        let key = CacheKey {
            node,
            x: rounded,
            seed,
            samples: num_samples,
        };
        if let Some(hit) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(*hit);
        }
        let mut tags = vec![node as u64];
        tags.extend(key.x.iter().map(|v| *v as u64));
        let stream_seed = rng::derive_seed(seed, &tags);
        let est = log_partition_is(&model.factors()[node], x, num_samples, stream_seed).map_err(|e| e.at_node(node))?;
        self.entries.write().expect("cache lock").insert(key, est);
        Ok(est)
    }
}

/// Per-row held-out log-likelihoods in original data units.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLikelihood {
    pub per_row: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean over rows.
    pub std_err: f64,
}

/// Mean and standard error of the mean.
pub fn mean_and_std_err(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `Σ_i [term_i − log Ẑ_i(parents)] + log|Jacobian|` for every raw test row.
pub fn test_loglik(
    model: &JointModel,
    raw_rows: ArrayView2<f64>,
    is_samples: usize,
    seed: u64,
) -> Result<LogLikelihood> {
    test_loglik_cached(model, raw_rows, is_samples, seed, &PartitionCache::new())
}

pub fn test_loglik_cached(
    model: &JointModel,
    raw_rows: ArrayView2<f64>,
    is_samples: usize,
    seed: u64,
    cache: &PartitionCache,
) -> Result<LogLikelihood> {
    check_dim("test columns", model.node_count(), raw_rows.ncols())?;
    if raw_rows.nrows() == 0 {
        return Err(Error::Data("test set is empty".into()));
    }
    let rows = model.standardization().apply(raw_rows)?;
    let jacobian = model.standardization().log_jacobian();
    let per_row: Vec<f64> = (0..rows.nrows())
        .into_par_iter()
        .map(|r| {
            let row = rows.row(r).to_vec();
            let terms = model.joint_unnorm_logpdf_terms(&row)?;
            let mut total = jacobian;
            for (node, term) in terms.iter().enumerate() {
                let x = model.parent_values(node, &row);
                total += term - cache.log_partition(model, node, &x, is_samples, seed)?.log_z;
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    let (mean, std_err) = mean_and_std_err(&per_row);
    Ok(LogLikelihood { per_row, mean, std_err })
}

/// Grid-search cross-validation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    pub lambda_grid: Vec<f64>,
    /// Multipliers applied to the median-heuristic bandwidths of both kernels.
    pub bandwidth_scale_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            lambda_grid: log_space(1e-4, 1.0, 8),
            bandwidth_scale_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            seed: 0,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.lambda_grid.is_empty() || self.bandwidth_scale_grid.is_empty() {
            return Err(Error::InvalidParameter("CV grids must be non-empty".into()));
        }
        for &v in self.lambda_grid.iter().chain(&self.bandwidth_scale_grid) {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "CV grid values must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `count` points evenly spaced in log between `lo` and `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|k| {
                    if k == 0 {
                        lo
                    } else if k == count - 1 {
                        hi
                    } else {
                        (a + (b - a) * k as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Held-out scores for one grid point; failed fits score `+∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct CvRecord {
    pub node: usize,
    pub lambda: f64,
    pub scale: f64,
    pub fold_scores: Vec<f64>,
    pub mean_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvSelection {
    pub lambda: f64,
    pub scale: f64,
    pub score: f64,
    pub hyperparams: NodeHyperparams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    pub selections: Vec<CvSelection>,
    pub table: Vec<CvRecord>,
}

impl CvResult {
    pub fn hyperparams(&self) -> Vec<NodeHyperparams> {
        self.selections.iter().map(|s| s.hyperparams.clone()).collect()
    }
}

/// Seeded shuffle cut into `folds` contiguous blocks of near-equal size.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, &[CV_STREAM]);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    (0..folds)
        .map(|f| order[f * n / folds..(f + 1) * n / folds].to_vec())
        .collect()
}

/// `true` when `a` should replace `b` as the selected grid point: lower mean
/// score, then larger λ, then larger bandwidth scale.
fn better(a: &CvRecord, b: &CvRecord) -> bool {
    let key = |r: &CvRecord| (r.mean_score, -r.lambda, -r.scale);
    key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less)
}

/// K-fold grid search per node, minimizing the held-out empirical score.
pub fn cross_validate(
    values: ArrayView2<f64>,
    dag: &DagSpec,
    config: &CvConfig,
    base: BaseDensity,
) -> Result<CvResult> {
    config.validate()?;
    check_dim("dataset columns vs DAG nodes", dag.node_count(), values.ncols())?;
    let n = values.nrows();
    if n < config.folds {
        return Err(Error::InvalidParameter(format!(
            "{} rows cannot be split into {} folds",
            n, config.folds
        )));
    }
    let folds = fold_assignment(n, config.folds, config.seed);
    let anchors = (0..dag.node_count())
        .map(|node| NodeHyperparams::from_median(values, dag, node, 1.0, 1.0, config.seed).map_err(|e| e.at_node(node)))
        .collect::<Result<Vec<_>>>()?;
    let scaled = |node: usize, lambda: f64, scale: f64| NodeHyperparams {
        lambda,
        y_bandwidth: anchors[node].y_bandwidth * scale,
        x_bandwidths: anchors[node].x_bandwidths.iter().map(|s| s * scale).collect(),
    };

    let tasks: Vec<(usize, usize, usize)> = (0..dag.node_count())
        .flat_map(|node| {
            (0..config.bandwidth_scale_grid.len()).flat_map(move |s| (0..config.folds).map(move |f| (node, s, f)))
        })
        .collect();
    // Each task assembles one Gram system and sweeps the λ grid over it.
    let scores: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(node, s, f)| {
            let held: Vec<usize> = folds[f].clone();
            let train: Vec<usize> = (0..config.folds)
                .filter(|&g| g != f)
                .flat_map(|g| folds[g].clone())
                .collect();
            let train_values = values.select(Axis(0), &train);
            let held_values = values.select(Axis(0), &held);
            let (x, y) = node_columns(train_values.view(), dag, node);
            let (hx, hy) = node_columns(held_values.view(), dag, node);
            let hyper = scaled(node, 1.0, config.bandwidth_scale_grid[s]);
            let failed = vec![f64::INFINITY; config.lambda_grid.len()];
            let Ok((kx, ky)) = node_kernels(dag, node, &hyper) else {
                return failed;
            };
            let Ok(system) = GramSystem::assemble(x.view(), y.view(), &kx, &ky, &base) else {
                return failed;
            };
            config
                .lambda_grid
                .iter()
                .map(|&lambda| {
                    let score = system.solve(lambda).and_then(|beta| {
                        let model = FactorModel::from_parts(
                            x.clone(),
                            y.clone(),
                            kx.clone(),
                            ky.clone(),
                            lambda,
                            beta,
                            -1.0 / lambda,
                            base,
                        )?;
                        model.empirical_score(hx.view(), hy.view())
                    });
                    match score {
                        Ok(v) if v.is_finite() => v,
                        _ => f64::INFINITY,
                    }
                })
                .collect()
        })
        .collect();

    let mut table = Vec::new();
    let mut selections = Vec::new();
    for node in 0..dag.node_count() {
        let mut best: Option<CvRecord> = None;
        for (s, &scale) in config.bandwidth_scale_grid.iter().enumerate() {
            for (l, &lambda) in config.lambda_grid.iter().enumerate() {
                let fold_scores: Vec<f64> = (0..config.folds)
                    .map(|f| {
                        let task = (node * config.bandwidth_scale_grid.len() + s) * config.folds + f;
                        scores[task][l]
                    })
                    .collect();
                let mean_score = fold_scores.iter().sum::<f64>() / config.folds as f64;
                let record = CvRecord {
                    node,
                    lambda,
                    scale,
                    fold_scores,
                    mean_score,
                };
                if best.as_ref().is_none_or(|b| better(&record, b)) {
                    best = Some(record.clone());
                }
                table.push(record);
            }
        }
        let best = best.expect("non-empty grid");
        if !best.mean_score.is_finite() {
            return Err(Error::Numerical("every CV grid point failed".into()).at_node(node));
        }
        let min_lambda = config.lambda_grid.iter().copied().fold(f64::INFINITY, f64::min);
        let max_lambda = config.lambda_grid.iter().copied().fold(0.0, f64::max);
        if config.lambda_grid.len() > 2 && (best.lambda == min_lambda || best.lambda == max_lambda) {
            log::warn!(
                "node {node}: selected lambda {} lies on the edge of the grid",
                best.lambda
            );
        }
        selections.push(CvSelection {
            lambda: best.lambda,
            scale: best.scale,
            score: best.mean_score,
            hyperparams: scaled(node, best.lambda, best.scale),
        });
    }
    Ok(CvResult { selections, table })
}

/// Cross-validates, then refits every node on the full dataset.
pub fn fit_with_cv(
    dataset: &StandardizedDataset,
    dag: &DagSpec,
    config: &CvConfig,
    base: BaseDensity,
) -> Result<(JointModel, CvResult)> {
    let cv = cross_validate(dataset.values.view(), dag, config, base)?;
    let model = fit_joint(dataset, dag, &cv.hyperparams(), base)?;
    Ok((model, cv))
}

/// Settings for a learning curve over nested training prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveConfig {
    pub sizes: Vec<usize>,
    pub cv: CvConfig,
    pub is_samples: usize,
    pub seed: u64,
    pub base: BaseDensity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub n_train: usize,
    pub n_test: usize,
    pub mean_loglik: f64,
    pub std_err: f64,
    pub selections: Vec<CvSelection>,
}

/// For each size `n`, cross-validates and fits on the first `n` raw training
/// rows and evaluates on `test`.
pub fn learning_curve(
    train: ArrayView2<f64>,
    names: &[String],
    test: ArrayView2<f64>,
    dag: &DagSpec,
    config: &CurveConfig,
) -> Result<Vec<CurvePoint>> {
    config
        .sizes
        .iter()
        .map(|&n| {
            if n > train.nrows() {
                return Err(Error::InvalidParameter(format!(
                    "curve size {n} exceeds the {} available training rows",
                    train.nrows()
                )));
            }
            let dataset = standardize(train.slice(ndarray::s![..n, ..]), names)?;
            let (model, cv) = fit_with_cv(&dataset, dag, &config.cv, config.base)?;
            let ll = test_loglik(&model, test, config.is_samples, config.seed)?;
            log::info!("n = {n}: mean test log-likelihood {:.4} ± {:.4}", ll.mean, ll.std_err);
            Ok(CurvePoint {
                n_train: n,
                n_test: test.nrows(),
                mean_loglik: ll.mean,
                std_err: ll.std_err,
                selections: cv.selections,
            })
        })
        .collect()
}

/// Monte Carlo estimate of `J(p | q) = ½ E_p ‖∇_y log p − ∇_y log q‖²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisherEstimate {
    pub value: f64,
    pub std_err: f64,
    pub sample_count: usize,
}

/// Averages `½‖p_grad − q_grad‖²` over paired rows `(x_b, y_b)` drawn from `p`.
pub fn fisher_divergence<P, Q>(p_grad: P, q_grad: Q, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<FisherEstimate>
where
    P: Fn(&[f64], &[f64]) -> Vec<f64>,
    Q: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let m = y.nrows();
    if m == 0 {
        return Err(Error::InvalidParameter(
            "Fisher divergence needs at least one sample".into(),
        ));
    }
    check_dim("sample rows (x vs y)", m, x.nrows())?;
    let mut terms = Vec::with_capacity(m);
    for b in 0..m {
        let (xb, yb) = (x.row(b).to_vec(), y.row(b).to_vec());
        let (gp, gq) = (p_grad(&xb, &yb), q_grad(&xb, &yb));
        check_dim("score dimension", yb.len(), gp.len())?;
        check_dim("score dimension", yb.len(), gq.len())?;
        check_finite("score function value", &gp)?;
        check_finite("score function value", &gq)?;
        terms.push(0.5 * gp.iter().zip(&gq).map(|(a, c)| (a - c) * (a - c)).sum::<f64>());
    }
    let (value, std_err) = mean_and_std_err(&terms);
    Ok(FisherEstimate {
        value,
        std_err,
        sample_count: m,
    })
}

/// Composite trapezoid rule with `points` nodes on `[lo, hi]`.
pub fn trapezoid<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, points: usize) -> f64 {
    assert!(points >= 2, "trapezoid rule needs two nodes");
    let h = (hi - lo) / (points - 1) as f64;
    let inner: f64 = (1..points - 1).map(|k| f(lo + h * k as f64)).sum();
    h * (0.5 * (f(lo) + f(hi)) + inner)
}

fn normal_pdf(y: f64, mean: f64, std: f64) -> f64 {
    let z = (y - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

/// Normal `N(mean, std²)` truncated to one half-line at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfLineNormal {
    pub mean: f64,
    pub std: f64,
    pub positive: bool,
}

impl HalfLineNormal {
    fn inside(&self, y: f64) -> bool {
        if self.positive {
            y > 0.0
        } else {
            y < 0.0
        }
    }

    /// Mass of the untruncated normal on the support, by quadrature.
    fn mass(&self) -> f64 {
        let (lo, hi) = if self.positive {
            (0.0, self.mean.max(0.0) + 12.0 * self.std)
        } else {
            (self.mean.min(0.0) - 12.0 * self.std, 0.0)
        };
        trapezoid(|y| normal_pdf(y, self.mean, self.std), lo, hi, 1 << 14)
    }

    pub fn pdf(&self, y: f64) -> f64 {
        if self.inside(y) {
            normal_pdf(y, self.mean, self.std) / self.mass()
        } else {
            0.0
        }
    }

    /// Derivative of the density, zero off the support.
    pub fn pdf_derivative(&self, y: f64) -> f64 {
        -(y - self.mean) / (self.std * self.std) * self.pdf(y)
    }

    pub fn score(&self, y: f64) -> f64 {
        -(y - self.mean) / (self.std * self.std)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let y = self.mean + self.std * z;
            if self.inside(y) {
                return y;
            }
        }
    }
}

/// Output of a divergence demonstration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivergenceDemo {
    pub fisher: FisherEstimate,
    /// Expected total-variation distance between the conditionals, by quadrature.
    pub total_variation: f64,
    /// Closed-form value of the divergence.
    pub exact: f64,
}

/// `p0(y|x) = p_A(y) H(x) + (1 − H(x)) p_B(y)` with `p_A`, `p_B` normals
/// truncated to the negative and positive half-lines, against the
/// x-independent mixture `q = ½(p_A + p_B)`. Scores agree wherever `p0 > 0`.
pub fn disjoint_support_demo(samples: usize, seed: u64) -> Result<DivergenceDemo> {
    let pa = HalfLineNormal {
        mean: -2.0,
        std: 0.5,
        positive: false,
    };
    let pb = HalfLineNormal {
        mean: 2.0,
        std: 0.5,
        positive: true,
    };
    let mut rng = rng::stream(seed, &[DEMO_STREAM, 0]);
    let mut x = Array2::zeros((samples, 1));
    let mut y = Array2::zeros((samples, 1));
    for b in 0..samples {
        let xb: f64 = rng.sample(StandardNormal);
        x[[b, 0]] = xb;
        y[[b, 0]] = if xb > 0.0 {
            pa.sample(&mut rng)
        } else {
            pb.sample(&mut rng)
        };
    }
    let p_grad = |x: &[f64], y: &[f64]| vec![if x[0] > 0.0 { pa.score(y[0]) } else { pb.score(y[0]) }];
    let q_grad = |_: &[f64], y: &[f64]| {
        let density = pa.pdf(y[0]) + pb.pdf(y[0]);
        vec![(pa.pdf_derivative(y[0]) + pb.pdf_derivative(y[0])) / density]
    };
    let fisher = fisher_divergence(p_grad, q_grad, x.view(), y.view())?;
    // H(x) = 1 with probability ½ under the standard normal x-marginal.
    let tv_given =
        |p: &HalfLineNormal| 0.5 * trapezoid(|v| (p.pdf(v) - 0.5 * (pa.pdf(v) + pb.pdf(v))).abs(), -8.0, 8.0, 1 << 14);
    Ok(DivergenceDemo {
        fisher,
        total_variation: 0.5 * tv_given(&pa) + 0.5 * tv_given(&pb),
        exact: 0.0,
    })
}

/// `p = N(0, 1)` against `q = N(1, 1)`, where `J = ½ (μ_p − μ_q)² / σ⁴ = ½`.
pub fn gaussian_shift_demo(samples: usize, seed: u64) -> Result<DivergenceDemo> {
    let mut rng = rng::stream(seed, &[DEMO_STREAM, 1]);
    let x = Array2::zeros((samples, 0));
    let y = Array2::from_shape_fn((samples, 1), |_| rng.sample::<f64, _>(StandardNormal));
    let fisher = fisher_divergence(|_, y| vec![-y[0]], |_, y| vec![-(y[0] - 1.0)], x.view(), y.view())?;
    let total_variation = 0.5
        * trapezoid(
            |v| (normal_pdf(v, 0.0, 1.0) - normal_pdf(v, 1.0, 1.0)).abs(),
            -9.0,
            10.0,
            1 << 14,
        );
    Ok(DivergenceDemo {
        fisher,
        total_variation,
        exact: 0.5,
    })
}
