//! Chain-rule factorizations of a joint density over a DAG.
//!
//! Variables are ordered by dataset column, and a node's parents must precede
//! it in that order. Each node gets one conditional factor with a scalar
//! response. Parentless nodes use the constant conditioning kernel, which
//! makes their factor an unconditional kernel exponential family fit.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;

use crate::data_io::{Standardization, StandardizedDataset};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::kernels::{median_heuristic, ConditioningKernel, GaussianKernel};
use crate::score_fit::{fit_factor, BaseDensity, FactorModel};

/// Which parent structure to build.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DagKind {
    /// Every earlier variable is a parent.
    Full,
    /// Only the immediately preceding variable is a parent.
    Markov,
    /// Explicit zero-based parent lists, one per node.
    Custom(Vec<Vec<usize>>),
}

impl FromStr for DagKind {
    type Err = Error;

    /// Parses `full`, `markov` or `custom:<json>` where the JSON is a list of
    /// zero-based parent lists, e.g. `custom:[[],[0],[0,1]]`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DagKind::Full),
            "markov" => Ok(DagKind::Markov),
            _ => match s.strip_prefix("custom:") {
                Some(json) => serde_json::from_str(json)
                    .map(DagKind::Custom)
                    .map_err(|e| Error::InvalidParameter(format!("custom DAG parent lists: {e}"))),
                None => Err(Error::InvalidParameter(format!(
                    "unknown DAG kind '{s}' (expected full, markov or custom:<json>)"
                ))),
            },
        }
    }
}

impl fmt::Display for DagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DagKind::Full => f.write_str("full"),
            DagKind::Markov => f.write_str("markov"),
            DagKind::Custom(p) => write!(f, "custom:{}", serde_json::to_string(p).map_err(|_| fmt::Error)?),
        }
    }
}

/// Parent sets in a fixed topological order (the column order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DagSpec {
    parents: Vec<Vec<usize>>,
}

impl DagSpec {
    pub fn new(parents: Vec<Vec<usize>>) -> Result<Self> {
        if parents.is_empty() {
            return Err(Error::InvalidParameter("a DAG needs at least one node".into()));
        }
        for (node, ps) in parents.iter().enumerate() {
            for (k, &p) in ps.iter().enumerate() {
                if p >= node {
                    return Err(Error::InvalidParameter(format!(
                        "node {node} lists parent {p}, which does not precede it"
                    )));
                }
                if ps[..k].contains(&p) {
                    return Err(Error::InvalidParameter(format!("node {node} lists parent {p} twice")));
                }
            }
        }
        Ok(DagSpec { parents })
    }

    pub fn node_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn parent_lists(&self) -> &[Vec<usize>] {
        &self.parents
    }
}

pub fn make_dag(kind: &DagKind, node_count: usize) -> Result<DagSpec> {
    if node_count == 0 {
        return Err(Error::InvalidParameter("a DAG needs at least one node".into()));
    }
    let parents = match kind {
        DagKind::Full => (0..node_count).map(|i| (0..i).collect()).collect(),
        DagKind::Markov => (0..node_count)
            .map(|i| if i == 0 { vec![] } else { vec![i - 1] })
            .collect(),
        DagKind::Custom(p) => {
            check_dim("custom DAG node count", node_count, p.len())?;
            p.clone()
        }
    };
    DagSpec::new(parents)
}

/// Regularization and bandwidths for one node's factor.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeHyperparams {
    pub lambda: f64,
    pub y_bandwidth: f64,
    /// One per parent; ignored (and empty) for parentless nodes.
    pub x_bandwidths: Vec<f64>,
}

impl NodeHyperparams {
    /// Median-heuristic bandwidths for the node and its parents, multiplied by `scale`.
    pub fn from_median(
        values: ArrayView2<f64>,
        dag: &DagSpec,
        node: usize,
        lambda: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let y = values.select(Axis(1), &[node]);
        let y_bandwidth = median_heuristic(y.view(), seed)?[0] * scale;
        let parents = dag.parents(node);
        let x_bandwidths = if parents.is_empty() {
            Vec::new()
        } else {
            let x = values.select(Axis(1), parents);
            median_heuristic(x.view(), seed)?
                .into_iter()
                .map(|s| s * scale)
                .collect()
        };
        Ok(NodeHyperparams {
            lambda,
            y_bandwidth,
            x_bandwidths,
        })
    }
}

/// Fits node `node` on standardized `values`.
pub fn fit_node(
    values: ArrayView2<f64>,
    dag: &DagSpec,
    node: usize,
    hyper: &NodeHyperparams,
    base: BaseDensity,
) -> Result<FactorModel> {
    let (x, y) = node_columns(values, dag, node);
    let (kx, ky) = node_kernels(dag, node, hyper)?;
    fit_factor(x.view(), y.view(), kx, ky, hyper.lambda, base)
}

pub(crate) fn node_columns(
    values: ArrayView2<f64>,
    dag: &DagSpec,
    node: usize,
) -> (ndarray::Array2<f64>, ndarray::Array2<f64>) {
    (
        values.select(Axis(1), dag.parents(node)),
        values.select(Axis(1), &[node]),
    )
}

pub(crate) fn node_kernels(
    dag: &DagSpec,
    node: usize,
    hyper: &NodeHyperparams,
) -> Result<(ConditioningKernel, GaussianKernel)> {
    let parents = dag.parents(node);
    let kx = if parents.is_empty() {
        ConditioningKernel::Constant(1.0)
    } else {
        check_dim("x bandwidths", parents.len(), hyper.x_bandwidths.len())?;
        ConditioningKernel::Gaussian(GaussianKernel::new(hyper.x_bandwidths.clone())?)
    };
    Ok((kx, GaussianKernel::new(vec![hyper.y_bandwidth])?))
}

/// Fits every node independently. Errors are tagged with the node index.
pub fn fit_joint(
    dataset: &StandardizedDataset,
    dag: &DagSpec,
    hypers: &[NodeHyperparams],
    base: BaseDensity,
) -> Result<JointModel> {
    check_dim("dataset columns vs DAG nodes", dag.node_count(), dataset.dim())?;
    check_dim("per-node hyperparameters", dag.node_count(), hypers.len())?;
    let factors = (0..dag.node_count())
        .into_par_iter()
        .map(|node| fit_node(dataset.values.view(), dag, node, &hypers[node], base).map_err(|e| e.at_node(node)))
        .collect::<Result<Vec<_>>>()?;
    JointModel::new(dag.clone(), factors, dataset.standardization.clone())
}

/// Ordered per-node conditionals plus the standardization used at fit time.
/// All evaluation happens in standardized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct JointModel {
    dag: DagSpec,
    factors: Vec<FactorModel>,
    standardization: Standardization,
}

impl JointModel {
    pub fn new(dag: DagSpec, factors: Vec<FactorModel>, standardization: Standardization) -> Result<Self> {
        check_dim("factor count", dag.node_count(), factors.len())?;
        check_dim("standardization columns", dag.node_count(), standardization.dim())?;
        if !standardization.stds.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Data("standardization stds must be positive".into()));
        }
        for (node, f) in factors.iter().enumerate() {
            check_dim("factor conditioning dimension", dag.parents(node).len(), f.x_dim())
                .map_err(|e| e.at_node(node))?;
        }
        Ok(JointModel {
            dag,
            factors,
            standardization,
        })
    }

    pub fn dag(&self) -> &DagSpec {
        &self.dag
    }

    pub fn factors(&self) -> &[FactorModel] {
        &self.factors
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn node_count(&self) -> usize {
        self.dag.node_count()
    }

    /// Copy with node `node`'s factor replaced.
    pub fn with_factor(&self, node: usize, factor: FactorModel) -> Result<Self> {
        let mut factors = self.factors.clone();
        if node >= factors.len() {
            return Err(Error::InvalidParameter(format!("no node {node}")));
        }
        factors[node] = factor;
        JointModel::new(self.dag.clone(), factors, self.standardization.clone())
    }

    /// Parent values of `node` taken from a full standardized row.
    pub fn parent_values(&self, node: usize, row: &[f64]) -> Vec<f64> {
        self.dag.parents(node).iter().map(|&p| row[p]).collect()
    }

    /// Per-node unnormalized conditional log-densities at a standardized row.
    pub fn joint_unnorm_logpdf_terms(&self, row: &[f64]) -> Result<Vec<f64>> {
        check_dim("joint row", self.node_count(), row.len())?;
        check_finite("joint row", row)?;
        self.factors
            .iter()
            .enumerate()
            .map(|(node, f)| {
                f.unnorm_logpdf(&self.parent_values(node, row), &row[node..=node])
                    .map_err(|e| e.at_node(node))
            })
            .collect()
    }
}
