//! Dataset ingestion, standardization, splitting, and model archives.
//!
//! Model archives are a single binary container:
//!
//! ```text
//! b"KCEF" | format_version: u32 LE | meta_len: u64 LE | meta (JSON, UTF-8)
//!        | value_count: u64 LE | value_count × f64 LE | SHA-256 of everything before
//! ```
//!
//! The JSON section describes the DAG, kernels, scalars and provenance; every
//! array (standardization statistics, training data, coefficients) lives in
//! the float section so it survives a round trip bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::factorization::{DagSpec, JointModel};
use crate::kernels::{ConditioningKernel, GaussianKernel};
use crate::rng;
use crate::score_fit::{BaseDensity, FactorModel};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"KCEF";
pub const FORMAT_VERSION: u32 = 1;

const SPLIT_STREAM: u64 = 0x5917;

/// Reads a headered, comma-separated numeric table.
pub fn read_csv<R: Read>(reader: R) -> Result<(Array2<f64>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(Error::Data("CSV file is empty".into()));
    }
    let width = names.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        // Line 1 is the header.
        let line = r + 2;
        let record = record.map_err(|e| Error::Data(format!("CSV line {line}: {e}")))?;
        if record.len() != width {
            return Err(Error::Data(format!(
                "CSV line {line} has {} fields, header has {width}",
                record.len()
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: c + 1,
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: c + 1,
                    message: format!("'{cell}' is not finite"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("CSV file has a header but no data rows".into()));
    }
    let matrix = Array2::from_shape_vec((rows, width), values).map_err(|e| Error::Data(e.to_string()))?;
    Ok((matrix, names))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<(Array2<f64>, Vec<String>)> {
    read_csv(fs::File::open(path)?)
}

/// Writes a numeric table. Values use the shortest decimal form that parses
/// back to the same `f64`.
pub fn write_csv<W: Write>(writer: W, names: &[String], values: ArrayView2<f64>) -> Result<()> {
    check_dim("CSV column names", values.ncols(), names.len())?;
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(names).map_err(io)?;
    let mut cells = Vec::with_capacity(names.len());
    for row in values.rows() {
        cells.clear();
        cells.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&cells).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, names: &[String], values: ArrayView2<f64>) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, names, values)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Per-column affine map between original units and standardized units.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub names: Vec<String>,
}

impl Standardization {
    /// Column means and sample standard deviations (n - 1 denominator).
    pub fn fit(raw: ArrayView2<f64>, names: &[String]) -> Result<Self> {
        let (n, cols) = raw.dim();
        check_dim("column names", cols, names.len())?;
        if n < 2 {
            return Err(Error::Data(format!("standardization needs at least 2 rows, got {n}")));
        }
        let means: Vec<f64> = raw.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let stds: Vec<f64> = raw.std_axis(Axis(0), 1.0).to_vec();
        for (name, &s) in names.iter().zip(&stds) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Data(format!("column '{name}' has zero variance")));
            }
        }
        Ok(Standardization {
            means,
            stds,
            names: names.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("columns to standardize", self.dim(), raw.ncols())?;
        let mut out = raw.to_owned();
        for (mut col, (m, s)) in out.columns_mut().into_iter().zip(self.means.iter().zip(&self.stds)) {
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    pub fn apply_row(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, standardized: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("columns to de-standardize", self.dim(), standardized.ncols())?;
        let mut out = standardized.to_owned();
        for (mut col, (m, s)) in out.columns_mut().into_iter().zip(self.means.iter().zip(&self.stds)) {
            col.mapv_inplace(|v| v * s + m);
        }
        Ok(out)
    }

    /// `-Σ log std_m`: converts a standardized-space log-density to original units.
    pub fn log_jacobian(&self) -> f64 {
        -self.stds.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// Data in standardized units together with the map back to original units.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizedDataset {
    pub values: Array2<f64>,
    pub standardization: Standardization,
}

impl StandardizedDataset {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_names(&self) -> &[String] {
        &self.standardization.names
    }

    pub fn destandardize(&self) -> Array2<f64> {
        self.standardization
            .invert(self.values.view())
            .expect("dimensions agree by construction")
    }
}

pub fn standardize(raw: ArrayView2<f64>, names: &[String]) -> Result<StandardizedDataset> {
    let standardization = Standardization::fit(raw, names)?;
    let values = standardization.apply(raw)?;
    Ok(StandardizedDataset {
        values,
        standardization,
    })
}

/// Seeded shuffle followed by a contiguous cut: the first
/// `round(fraction · n)` shuffled rows train, the rest test.
pub fn split(values: ArrayView2<f64>, train_fraction: f64, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidParameter(format!(
            "train fraction must lie in [0, 1], got {train_fraction}"
        )));
    }
    let n = values.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SPLIT_STREAM]));
    let cut = ((n as f64) * train_fraction).round() as usize;
    if cut == n {
        log::warn!("train fraction {train_fraction} leaves an empty test set");
    }
    let train = values.select(Axis(0), &order[..cut]);
    let test = values.select(Axis(0), &order[cut..]);
    Ok((train, test))
}

/// Drops the later column of every pair whose absolute Pearson correlation
/// exceeds `threshold`. Returns the kept table, kept names and dropped names.
pub fn prune_correlated(
    raw: ArrayView2<f64>,
    names: &[String],
    threshold: f64,
) -> Result<(Array2<f64>, Vec<String>, Vec<String>)> {
    check_dim("column names", raw.ncols(), names.len())?;
    let n = raw.nrows();
    if n < 2 {
        return Err(Error::Data("correlation pruning needs at least 2 rows".into()));
    }
    let centered: Vec<Array1<f64>> = raw
        .columns()
        .into_iter()
        .map(|c| {
            let m = c.mean().expect("non-empty");
            c.mapv(|v| v - m)
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.dot(c).sqrt()).collect();
    let mut keep: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..raw.ncols() {
        let redundant = keep.iter().any(|&k| {
            let denom = norms[j] * norms[k];
            denom > 0.0 && (centered[j].dot(&centered[k]) / denom).abs() > threshold
        });
        if redundant {
            dropped.push(names[j].clone());
        } else {
            keep.push(j);
        }
    }
    let kept_names = keep.iter().map(|&j| names[j].clone()).collect();
    Ok((raw.select(Axis(1), &keep), kept_names, dropped))
}

/// Where an artifact came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub timestamp: String,
}

/// A loaded model archive.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    pub model: JointModel,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum KernelXMeta {
    Constant { value: f64 },
    Gaussian { bandwidths: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
struct FactorMeta {
    n: usize,
    x_dim: usize,
    y_dim: usize,
    lambda: f64,
    xi_weight: f64,
    base_std: f64,
    kernel_x: KernelXMeta,
    kernel_y_bandwidths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveMeta {
    format_version: u32,
    parents: Vec<Vec<usize>>,
    column_names: Vec<String>,
    factors: Vec<FactorMeta>,
    provenance: Provenance,
}

pub fn archive_to_bytes(model: &JointModel, provenance: &Provenance) -> Result<Vec<u8>> {
    let std = model.standardization();
    let mut floats: Vec<f64> = Vec::new();
    floats.extend(&std.means);
    floats.extend(&std.stds);
    let mut factors = Vec::new();
    for f in model.factors() {
        floats.extend(f.x_train().iter());
        floats.extend(f.y_train().iter());
        floats.extend(f.beta());
        factors.push(FactorMeta {
            n: f.n(),
            x_dim: f.x_dim(),
            y_dim: f.y_dim(),
            lambda: f.lambda(),
            xi_weight: f.xi_weight(),
            base_std: f.base().std(),
            kernel_x: match f.kernel_x() {
                ConditioningKernel::Constant(value) => KernelXMeta::Constant { value: *value },
                ConditioningKernel::Gaussian(k) => KernelXMeta::Gaussian {
                    bandwidths: k.bandwidths().to_vec(),
                },
            },
            kernel_y_bandwidths: f.kernel_y().bandwidths().to_vec(),
        });
    }
    let meta = ArchiveMeta {
        format_version: FORMAT_VERSION,
        parents: model.dag().parent_lists().to_vec(),
        column_names: std.names.clone(),
        factors,
        provenance: provenance.clone(),
    };
    let meta = serde_json::to_vec_pretty(&meta)?;

    let mut out = Vec::with_capacity(24 + meta.len() + 8 * floats.len() + 32);
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(floats.len() as u64).to_le_bytes());
    for v in &floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checksum("unexpected end of archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn archive_from_bytes(bytes: &[u8]) -> Result<ModelArchive> {
    if bytes.len() < 8 {
        return Err(Error::Checksum("file too short to be a model archive".into()));
    }
    if &bytes[..4] != ARCHIVE_MAGIC {
        return Err(Error::Data("not a model archive (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 8 + 32 {
        return Err(Error::Checksum("archive truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum("SHA-256 mismatch".into()));
    }

    let mut cur = Cursor { bytes: body, pos: 8 };
    let meta_len = cur.u64()? as usize;
    let meta: ArchiveMeta = serde_json::from_slice(cur.take(meta_len)?)?;
    let count = cur.u64()? as usize;
    let raw = cur.take(
        count
            .checked_mul(8)
            .ok_or_else(|| Error::Checksum("bad length".into()))?,
    )?;
    if cur.pos != body.len() {
        return Err(Error::Data("trailing bytes in model archive".into()));
    }
    let floats: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut next = {
        let mut pos = 0;
        move |len: usize| -> Result<Vec<f64>> {
            let s = floats
                .get(pos..pos + len)
                .ok_or_else(|| Error::Data("model archive float section too short".into()))?;
            pos += len;
            Ok(s.to_vec())
        }
    };
    let dim = meta.column_names.len();
    let standardization = Standardization {
        means: next(dim)?,
        stds: next(dim)?,
        names: meta.column_names,
    };
    let mut factors = Vec::with_capacity(meta.factors.len());
    for fm in meta.factors {
        let shape_err = |e: ndarray::ShapeError| Error::Data(e.to_string());
        let x = Array2::from_shape_vec((fm.n, fm.x_dim), next(fm.n * fm.x_dim)?).map_err(shape_err)?;
        let y = Array2::from_shape_vec((fm.n, fm.y_dim), next(fm.n * fm.y_dim)?).map_err(shape_err)?;
        let beta = next(fm.n * fm.y_dim)?;
        let kernel_x = match fm.kernel_x {
            KernelXMeta::Constant { value } => ConditioningKernel::Constant(value),
            KernelXMeta::Gaussian { bandwidths } => ConditioningKernel::Gaussian(GaussianKernel::new(bandwidths)?),
        };
        factors.push(FactorModel::from_parts(
            x,
            y,
            kernel_x,
            GaussianKernel::new(fm.kernel_y_bandwidths)?,
            fm.lambda,
            beta,
            fm.xi_weight,
            BaseDensity::new(fm.base_std)?,
        )?);
    }
    let dag = DagSpec::new(meta.parents)?;
    Ok(ModelArchive {
        model: JointModel::new(dag, factors, standardization)?,
        provenance: meta.provenance,
    })
}

pub fn save_model(model: &JointModel, provenance: &Provenance, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, archive_to_bytes(model, provenance)?)?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<ModelArchive> {
    archive_from_bytes(&fs::read(path)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<JointModel> {
    Ok(load_archive(path)?.model)
}
