use std::fs;
use std::path::{Path, PathBuf};

use kcef::data_io::{self, load_csv, load_model, save_csv, standardize, Provenance};
use kcef::evaluation::{
    disjoint_support_demo, fit_with_cv, gaussian_shift_demo, learning_curve, test_loglik, CurveConfig, CvConfig,
    CvResult,
};
use kcef::factorization::{fit_joint, make_dag, DagKind, DagSpec, JointModel, NodeHyperparams};
use kcef::sampling::{ancestral_sample, rejection_sample_grid, GridDatasetConfig, HmcConfig};
use kcef::{BaseDensity, ErrorKind};
use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::args::{CvArgs, Demo, DivergeArgs, EvalArgs, FitArgs, GenGridArgs, SampleArgs, ScoreArgs};

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
            ErrorKind::Io => 4,
        }
    }
}

impl From<kcef::Error> for CliError {
    fn from(e: kcef::Error) -> Self {
        CliError {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        kcef::Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        kcef::Error::from(e).into()
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn provenance_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".provenance.json");
    PathBuf::from(name)
}

fn write_provenance(output: &Path, provenance: &Provenance) -> CliResult {
    let mut text = serde_json::to_string_pretty(provenance)?;
    text.push('\n');
    fs::write(provenance_path(output), text)?;
    Ok(())
}

fn write_output(path: &Path, bytes: &[u8], provenance: &Provenance) -> CliResult {
    fs::write(path, bytes)?;
    write_provenance(path, provenance)
}

fn write_json<T: Serialize>(path: &Path, value: &T, provenance: &Provenance) -> CliResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_output(path, text.as_bytes(), provenance)
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>], provenance: &Provenance) -> CliResult {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_output(path, text.as_bytes(), provenance)
}

fn save_table(path: &Path, names: &[String], values: &Array2<f64>, provenance: &Provenance) -> CliResult {
    save_csv(path, names, values.view())?;
    write_provenance(path, provenance)
}

fn with_path<T>(path: &Path, result: kcef::Result<T>) -> CliResult<T> {
    result.map_err(|e| {
        let mut err = CliError::from(e);
        if err.kind == ErrorKind::Io {
            err.message = format!("{}: {}", path.display(), err.message);
        }
        err
    })
}

fn read_table(path: &Path) -> CliResult<(Array2<f64>, Vec<String>)> {
    with_path(path, load_csv(path))
}

fn read_model(path: &Path) -> CliResult<JointModel> {
    with_path(path, load_model(path))
}

fn parse_dag(text: &str, nodes: usize) -> CliResult<DagSpec> {
    let kind: DagKind = text.parse()?;
    Ok(make_dag(&kind, nodes)?)
}

fn cv_config(args: &CvArgs, seed: u64) -> CvConfig {
    let defaults = CvConfig::default();
    CvConfig {
        folds: args.folds,
        lambda_grid: args.lambda_grid.clone().unwrap_or(defaults.lambda_grid),
        bandwidth_scale_grid: args.scale_grid.clone().unwrap_or(defaults.bandwidth_scale_grid),
        seed,
    }
}

/// Columns of `raw` reordered to match `wanted` by header name.
fn select_columns(raw: &Array2<f64>, header: &[String], wanted: &[String]) -> CliResult<Array2<f64>> {
    let idx = wanted
        .iter()
        .map(|w| {
            header.iter().position(|h| h == w).ok_or_else(|| CliError {
                kind: ErrorKind::Data,
                message: format!("column `{w}` is missing from the input file"),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(raw.select(Axis(1), &idx))
}

fn broadcast(values: Option<&Vec<f64>>, dim: usize, flag: &str) -> CliResult<Vec<f64>> {
    match values {
        None => Ok(vec![1.0; dim]),
        Some(v) if v.len() == 1 => Ok(vec![v[0]; dim]),
        Some(v) if v.len() == dim => Ok(v.clone()),
        Some(v) => Err(CliError::usage(format!(
            "{flag} takes 1 or {dim} values, got {}",
            v.len()
        ))),
    }
}

#[derive(Serialize)]
struct GridConfigRecord {
    dim: usize,
    n: usize,
    weights_a: Vec<f64>,
    weights_b: Vec<f64>,
    support: [f64; 2],
    seed: u64,
    acceptance_rate: f64,
}

pub fn gen_grid(args: &GenGridArgs, provenance: &Provenance) -> CliResult {
    if args.support.len() != 2 {
        return Err(CliError::usage("--support takes exactly two values"));
    }
    let both = args.weights.as_ref();
    let config = GridDatasetConfig {
        dim: args.dim,
        n: args.n,
        weights_a: broadcast(args.weights_a.as_ref().or(both), args.dim, "--weights-a")?,
        weights_b: broadcast(args.weights_b.as_ref().or(both), args.dim, "--weights-b")?,
        support: (args.support[0], args.support[1]),
        seed: args.seed,
    };
    let sample = rejection_sample_grid(&config)?;
    let names: Vec<String> = (1..=args.dim).map(|i| format!("x{i}")).collect();
    save_table(&args.out, &names, &sample.data, provenance)?;
    let record = GridConfigRecord {
        dim: config.dim,
        n: config.n,
        weights_a: config.weights_a.clone(),
        weights_b: config.weights_b.clone(),
        support: [config.support.0, config.support.1],
        seed: config.seed,
        acceptance_rate: sample.acceptance_rate(),
    };
    let mut config_path = args.out.as_os_str().to_owned();
    config_path.push(".config.json");
    write_json(Path::new(&config_path), &record, provenance)?;
    log::info!("wrote {} rows, acceptance rate {:.3}", args.n, sample.acceptance_rate());
    Ok(())
}

fn cv_table_rows(cv: &CvResult, names: &[String]) -> (Vec<String>, Vec<Vec<String>>) {
    let folds = cv.table.first().map_or(0, |r| r.fold_scores.len());
    let mut header: Vec<String> = ["node", "column", "lambda", "scale", "mean_score"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=folds).map(|f| format!("fold_{f}")));
    let rows = cv
        .table
        .iter()
        .map(|r| {
            let mut row = vec![
                r.node.to_string(),
                names[r.node].clone(),
                r.lambda.to_string(),
                r.scale.to_string(),
                r.mean_score.to_string(),
            ];
            row.extend(r.fold_scores.iter().map(|v| v.to_string()));
            row
        })
        .collect();
    (header, rows)
}

pub fn fit(args: &FitArgs, provenance: &Provenance) -> CliResult {
    let base = BaseDensity::new(args.base_std)?;
    let (mut raw, mut names) = read_table(&args.data)?;
    if let Some(threshold) = args.prune_corr {
        let (kept, kept_names, dropped) = data_io::prune_correlated(raw.view(), &names, threshold)?;
        if !dropped.is_empty() {
            log::info!("dropped correlated columns: {}", dropped.join(", "));
        }
        raw = kept;
        names = kept_names;
    }
    let train = if args.train_fraction == 1.0 && args.test_out.is_none() {
        raw
    } else {
        let (train, test) = data_io::split(raw.view(), args.train_fraction, args.seed)?;
        if let Some(path) = &args.test_out {
            save_table(path, &names, &test, provenance)?;
        }
        train
    };
    let dataset = standardize(train.view(), &names)?;
    let dag = parse_dag(&args.dag, names.len())?;
    let model = if args.cv {
        let config = cv_config(&args.grid, args.seed);
        let (model, cv) = fit_with_cv(&dataset, &dag, &config, base)?;
        for (node, s) in cv.selections.iter().enumerate() {
            log::info!(
                "{}: lambda {} scale {} score {:.6}",
                names[node],
                s.lambda,
                s.scale,
                s.score
            );
        }
        if let Some(path) = &args.cv_table {
            let (header, rows) = cv_table_rows(&cv, &names);
            write_table(path, &header, &rows, provenance)?;
        }
        model
    } else {
        let lambda = args.lambda.expect("clap requires --lambda without --cv");
        let hypers = (0..names.len())
            .map(|node| {
                NodeHyperparams::from_median(
                    dataset.values.view(),
                    &dag,
                    node,
                    lambda,
                    args.bandwidth_scale,
                    args.seed,
                )
            })
            .collect::<kcef::Result<Vec<_>>>()?;
        fit_joint(&dataset, &dag, &hypers, base)?
    };
    data_io::save_model(&model, provenance, &args.out)?;
    write_provenance(&args.out, provenance)
}

#[derive(Serialize)]
struct NodeSummary {
    node: usize,
    column: String,
    parents: Vec<String>,
    lambda: f64,
    y_bandwidth: f64,
    x_bandwidths: Vec<f64>,
}

fn node_summaries(model: &JointModel) -> Vec<NodeSummary> {
    let names = &model.standardization().names;
    model
        .factors()
        .iter()
        .enumerate()
        .map(|(node, f)| NodeSummary {
            node,
            column: names[node].clone(),
            parents: model.dag().parents(node).iter().map(|&p| names[p].clone()).collect(),
            lambda: f.lambda(),
            y_bandwidth: f.kernel_y().bandwidths()[0],
            x_bandwidths: match f.kernel_x() {
                kcef::ConditioningKernel::Gaussian(k) => k.bandwidths().to_vec(),
                kcef::ConditioningKernel::Constant(_) => Vec::new(),
            },
        })
        .collect()
}

#[derive(Serialize)]
struct EvalSummary {
    mean_loglik: f64,
    stderr: f64,
    n_test: usize,
    is_samples: usize,
    seed: u64,
    nodes: Vec<NodeSummary>,
}

pub fn eval(args: &EvalArgs, provenance: &Provenance) -> CliResult {
    if args.curve {
        return curve(args, provenance);
    }
    let model = read_model(args.model.as_ref().expect("clap requires --model without --curve"))?;
    let (raw, header) = read_table(&args.test)?;
    let test = select_columns(&raw, &header, &model.standardization().names)?;
    let ll = test_loglik(&model, test.view(), args.is_samples, args.seed)?;
    if let Some(path) = &args.per_row {
        let rows: Vec<Vec<String>> = ll.per_row.iter().map(|v| vec![v.to_string()]).collect();
        write_table(path, &["loglik".to_string()], &rows, provenance)?;
    }
    let summary = EvalSummary {
        mean_loglik: ll.mean,
        stderr: ll.std_err,
        n_test: ll.per_row.len(),
        is_samples: args.is_samples,
        seed: args.seed,
        nodes: node_summaries(&model),
    };
    write_json(&args.out, &summary, provenance)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn curve(args: &EvalArgs, provenance: &Provenance) -> CliResult {
    let (train_raw, names) = read_table(args.train.as_ref().expect("clap requires --train with --curve"))?;
    let (test_raw, header) = read_table(&args.test)?;
    let test = select_columns(&test_raw, &header, &names)?;
    let dag = parse_dag(&args.dag, names.len())?;
    let config = CurveConfig {
        sizes: args.sizes.clone(),
        cv: cv_config(&args.grid, args.seed),
        is_samples: args.is_samples,
        seed: args.seed,
        base: BaseDensity::new(args.base_std)?,
    };
    let points = learning_curve(train_raw.view(), &names, test.view(), &dag, &config)?;
    let mut header: Vec<String> = ["n_train", "n_test", "mean_loglik", "stderr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for name in &names {
        header.push(format!("lambda_{name}"));
        header.push(format!("scale_{name}"));
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let mut row = vec![
                p.n_train.to_string(),
                p.n_test.to_string(),
                p.mean_loglik.to_string(),
                p.std_err.to_string(),
            ];
            for s in &p.selections {
                row.push(s.lambda.to_string());
                row.push(s.scale.to_string());
            }
            row
        })
        .collect();
    write_table(&args.out, &header, &rows, provenance)
}

pub fn sample(args: &SampleArgs, provenance: &Provenance) -> CliResult {
    let model = read_model(&args.model)?;
    let config = HmcConfig {
        step_size: args.step_size,
        leapfrog_steps: args.leapfrog_steps,
        burn_in: args.burn_in,
        thin: args.thin,
        chains: args.chains,
        seed: args.seed,
    };
    let samples = ancestral_sample(&model, args.n, &config)?;
    save_table(&args.out, &model.standardization().names, &samples, provenance)
}

#[derive(Serialize)]
struct NodeScore {
    node: usize,
    column: String,
    score: f64,
}

#[derive(Serialize)]
struct ScoreReport {
    nodes: Vec<NodeScore>,
    total: f64,
    n: usize,
}

pub fn score(args: &ScoreArgs, provenance: &Provenance) -> CliResult {
    let model = read_model(&args.model)?;
    let (raw, header) = read_table(&args.data)?;
    let names = model.standardization().names.clone();
    let values = model
        .standardization()
        .apply(select_columns(&raw, &header, &names)?.view())?;
    let nodes = (0..model.node_count())
        .map(|node| {
            let x = values.select(Axis(1), model.dag().parents(node));
            let y = values.select(Axis(1), &[node]);
            let score = model.factors()[node].empirical_score(x.view(), y.view())?;
            Ok(NodeScore {
                node,
                column: names[node].clone(),
                score,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = ScoreReport {
        total: nodes.iter().map(|s| s.score).sum(),
        n: values.nrows(),
        nodes,
    };
    println!("{}", serde_json::to_string(&report)?);
    if let Some(path) = &args.out {
        write_json(path, &report, provenance)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DivergeReport {
    demo: &'static str,
    fisher_divergence: f64,
    std_err: f64,
    samples: usize,
    total_variation: f64,
    exact: f64,
}

pub fn diverge(args: &DivergeArgs, provenance: &Provenance) -> CliResult {
    if args.samples == 0 {
        return Err(CliError::usage("--samples must be positive"));
    }
    let (name, demo) = match args.demo {
        Demo::AppendixD => ("appendix-d", disjoint_support_demo(args.samples, args.seed)?),
        Demo::Gaussian => ("gaussian", gaussian_shift_demo(args.samples, args.seed)?),
    };
    let report = DivergeReport {
        demo: name,
        fisher_divergence: demo.fisher.value,
        std_err: demo.fisher.std_err,
        samples: demo.fisher.sample_count,
        total_variation: demo.total_variation,
        exact: demo.exact,
    };
    println!(
        "fisher divergence {:e} (std err {:e}), total variation {:.6}",
        report.fisher_divergence, report.std_err, report.total_variation
    );
    if let Some(path) = &args.out {
        write_json(path, &report, provenance)?;
    }
    Ok(())
}
