//! On-disk formats.
//!
//! Dataset directory layout:
//!
//! ```text
//! dataset/
//!   grid.json          axes (name + topology) and condition coordinates
//!   trials_000.csv     one file per condition, rows = trials, header = neuron ids
//!   manifest.json      N, C, per-condition K, sha256 per file, schema_version
//!   truth/             moment-field export (synthetic data only)
//! ```
//!
//! Floats are written in shortest round-trip decimal form, so reading a
//! dataset back reproduces it bit-exactly. Moment fields export as one CSV
//! per condition plus a JSON index. Posteriors serialize into a single
//! self-describing JSON bundle with base64 little-endian f64 payloads.

use std::fs;
use std::path::Path;

use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Dataset;
use crate::error::{Error, Result};
use crate::grid::ConditionGrid;
use crate::inference::{Layout, Posterior, VariationalFamily, VariationalState};
use crate::model::{ModelSpec, MomentField};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    n: usize,
    c: usize,
    k_per_condition: Vec<usize>,
    files: Vec<FileEntry>,
    has_ground_truth: bool,
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, header: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for ri in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|ci| format!("{}", m[(ri, ci)])).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Config(format!(
                "{}: ragged csv row",
                path.display()
            )));
        }
        let row: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|v| v.parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?);
    }
    let nrows = rows.len();
    Ok(DMatrix::from_fn(nrows, width, |i, j| rows[i][j]))
}

/// Write a dataset directory (grid.json, trials_XXX.csv, manifest.json, and
/// the ground-truth export when present).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    let grid_json = serde_json::to_string_pretty(&dataset.grid)?;
    fs::write(dir.join("grid.json"), &grid_json)?;
    files.push(FileEntry {
        name: "grid.json".into(),
        sha256: sha256_hex(grid_json.as_bytes()),
    });

    let header: Vec<String> = (0..dataset.n()).map(|i| format!("n{i}")).collect();
    for (ci, y) in dataset.trials.iter().enumerate() {
        let name = format!("trials_{ci:03}.csv");
        write_matrix_csv(&dir.join(&name), y, &header)?;
        let bytes = fs::read(dir.join(&name))?;
        files.push(FileEntry {
            name,
            sha256: sha256_hex(&bytes),
        });
    }

    if let Some(truth) = &dataset.truth {
        export_moment_field(truth, &dataset.grid, &dir.join("truth"))?;
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        n: dataset.n(),
        c: dataset.c(),
        k_per_condition: dataset.k_per_condition(),
        files,
        has_ground_truth: dataset.truth.is_some(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Read a dataset directory back, verifying the manifest checksums.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset schema_version {}",
            manifest.schema_version
        )));
    }
    for f in &manifest.files {
        let bytes = fs::read(dir.join(&f.name))?;
        let got = sha256_hex(&bytes);
        if got != f.sha256 {
            return Err(Error::Config(format!(
                "checksum mismatch for {} (manifest {}, file {got})",
                f.name, f.sha256
            )));
        }
    }
    let grid: ConditionGrid = serde_json::from_str(&fs::read_to_string(dir.join("grid.json"))?)?;
    let mut trials = Vec::with_capacity(manifest.c);
    for ci in 0..manifest.c {
        let y = read_matrix_csv(&dir.join(format!("trials_{ci:03}.csv")))?;
        if y.ncols() != manifest.n {
            return Err(Error::Config(format!(
                "condition {ci} width {} != manifest n {}",
                y.ncols(),
                manifest.n
            )));
        }
        trials.push(y);
    }
    let truth = if manifest.has_ground_truth {
        Some(read_moment_field(&dir.join("truth"))?.0)
    } else {
        None
    };
    let ds = Dataset { grid, trials, truth };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct MomentIndex {
    schema_version: u32,
    conditions: Vec<MomentEntry>,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    index: usize,
    coordinates: Vec<f64>,
    mean_file: String,
    cov_file: String,
}

/// One CSV per condition (mean row vector + N x N covariance) plus a JSON
/// index carrying the coordinates.
pub fn export_moment_field(field: &MomentField, grid: &ConditionGrid, dir: &Path) -> Result<()> {
    if field.len() != grid.len() {
        return Err(Error::dim("moment field length != grid length"));
    }
    fs::create_dir_all(dir)?;
    let n = field.means.first().map(|m| m.len()).unwrap_or(0);
    let header: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let mut entries = Vec::with_capacity(field.len());
    for ci in 0..field.len() {
        let mean_file = format!("mu_{ci:03}.csv");
        let cov_file = format!("sigma_{ci:03}.csv");
        let mean_row = DMatrix::from_fn(1, n, |_, j| field.means[ci][j]);
        write_matrix_csv(&dir.join(&mean_file), &mean_row, &header)?;
        write_matrix_csv(&dir.join(&cov_file), &field.covariances[ci], &header)?;
        entries.push(MomentEntry {
            index: ci,
            coordinates: grid.points()[ci].clone(),
            mean_file,
            cov_file,
        });
    }
    let index = MomentIndex {
        schema_version: SCHEMA_VERSION,
        conditions: entries,
    };
    fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

/// Read a moment-field export; returns the field and the coordinates from
/// the index.
pub fn read_moment_field(dir: &Path) -> Result<(MomentField, Vec<Vec<f64>>)> {
    let index: MomentIndex =
        serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    if index.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported moment schema_version {}",
            index.schema_version
        )));
    }
    let mut means = Vec::with_capacity(index.conditions.len());
    let mut covs = Vec::with_capacity(index.conditions.len());
    let mut coords = Vec::with_capacity(index.conditions.len());
    for e in &index.conditions {
        let mean = read_matrix_csv(&dir.join(&e.mean_file))?;
        let cov = read_matrix_csv(&dir.join(&e.cov_file))?;
        means.push(mean.row(0).transpose());
        covs.push(cov);
        coords.push(e.coordinates.clone());
    }
    Ok((
        MomentField {
            means,
            covariances: covs,
            precisions: None,
        },
        coords,
    ))
}

fn f64s_to_b64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn b64_to_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Config(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config("f64 payload length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct PosteriorBundle {
    schema_version: u32,
    kind: String,
    model: ModelSpec,
    grid: ConditionGrid,
    family: VariationalFamily,
    k_per_condition: Vec<usize>,
    params_b64: String,
    elbo_trace_b64: String,
}

/// Serialize a posterior into a single self-describing JSON bundle.
pub fn write_posterior_bundle(post: &Posterior, path: &Path) -> Result<()> {
    let bundle = PosteriorBundle {
        schema_version: SCHEMA_VERSION,
        kind: "covfield-posterior".into(),
        model: post.spec.clone(),
        grid: post.grid.clone(),
        family: post.state.family,
        k_per_condition: post.state.layout.k_per_cond.clone(),
        params_b64: f64s_to_b64(post.state.params.as_slice()),
        elbo_trace_b64: f64s_to_b64(&post.elbo_trace),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, serde_json::to_string(&bundle)?)?;
    Ok(())
}

pub fn read_posterior_bundle(path: &Path) -> Result<Posterior> {
    let bundle: PosteriorBundle = serde_json::from_str(&fs::read_to_string(path)?)?;
    if bundle.schema_version != SCHEMA_VERSION || bundle.kind != "covfield-posterior" {
        return Err(Error::Config("not a covfield posterior bundle".into()));
    }
    bundle.model.validate()?;
    let layout = if bundle.k_per_condition.is_empty() {
        Layout::new(&bundle.model, bundle.grid.len(), &[])
    } else {
        Layout::new(&bundle.model, bundle.grid.len(), &bundle.k_per_condition)
    };
    let params = b64_to_f64s(&bundle.params_b64)?;
    if params.len() != layout.param_len(bundle.family) {
        return Err(Error::Config(format!(
            "parameter payload has {} values, layout expects {}",
            params.len(),
            layout.param_len(bundle.family)
        )));
    }
    Ok(Posterior {
        spec: bundle.model,
        grid: bundle.grid,
        state: VariationalState {
            family: bundle.family,
            layout,
            params: DVector::from_vec(params),
        },
        elbo_trace: b64_to_f64s(&bundle.elbo_trace_b64)?,
    })
}

/// ELBO trace as (iteration, value) CSV.
pub fn write_elbo_trace(trace: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "elbo"])?;
    for (i, v) in trace.iter().enumerate() {
        w.write_record([format!("{}", i + 1), format!("{v}")])?;
    }
    w.flush()?;
    Ok(())
}
