//! Dataset persistence and ingestion: the binary matrix-series bundle
//! format, long-format CSV ingestion, chronological splitting, and
//! training-mean centering.
//!
//! Bundle directory layout: `manifest.json`, `x.bin` (T*M*N little-endian
//! f64, frame-major with row-major frames), `z.bin` (T*D), and optionally
//! `grid.json`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MaracError, Result};
use crate::kernels::GridConfig;
use crate::linalg::{Mat, Vector};
use crate::model::MatrixSeries;

/// Chronological split indices: train is `0..train_end`, validation
/// `train_end..val_end`, test `val_end..T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
}

impl SplitSpec {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.train_end == 0 || self.train_end > self.val_end || self.val_end > t {
            return Err(MaracError::Format(format!(
                "split indices train_end={} val_end={} invalid for T={t}",
                self.train_end, self.val_end
            )));
        }
        Ok(())
    }
}

/// `manifest.json` schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub dtype: String,
    pub layout: String,
    pub grid: Option<GridConfig>,
    pub split: SplitSpec,
}

pub const DTYPE: &str = "f64le";
pub const LAYOUT: &str = "frame-major,row-major";

/// Write a series to a bundle directory (lossless f64 round trip).
pub fn write_bundle(
    series: &MatrixSeries,
    split: SplitSpec,
    grid: Option<&GridConfig>,
    dir: &Path,
) -> Result<()> {
    split.validate(series.len())?;
    std::fs::create_dir_all(dir)?;
    let (m, n, d) = (series.nrows(), series.ncols(), series.aux_dim());
    let manifest = BundleManifest {
        m,
        n,
        t: series.len(),
        d,
        dtype: DTYPE.into(),
        layout: LAYOUT.into(),
        grid: grid.cloned(),
        split,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut x = std::io::BufWriter::new(std::fs::File::create(dir.join("x.bin"))?);
    for frame in series.frames() {
        for i in 0..m {
            for j in 0..n {
                x.write_all(&frame[(i, j)].to_le_bytes())?;
            }
        }
    }
    x.flush()?;

    let mut z = std::io::BufWriter::new(std::fs::File::create(dir.join("z.bin"))?);
    for aux in series.aux_vectors() {
        for v in aux.iter() {
            z.write_all(&v.to_le_bytes())?;
        }
    }
    z.flush()?;

    if let Some(cfg) = grid {
        std::fs::write(dir.join("grid.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    Ok(())
}

fn read_floats(path: &Path, expect: usize, name: &str) -> Result<Vec<f64>> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| MaracError::Format(format!("{name}: {e}")))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() != expect * 8 {
        return Err(MaracError::Format(format!(
            "{name} holds {} bytes but the manifest implies {}",
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Read a bundle directory back into a series, validating byte counts
/// against the manifest.
pub fn read_bundle(dir: &Path) -> Result<(MatrixSeries, SplitSpec, Option<GridConfig>)> {
    let manifest: BundleManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.dtype != DTYPE {
        return Err(MaracError::Format(format!(
            "manifest dtype '{}' unsupported (expected '{DTYPE}')",
            manifest.dtype
        )));
    }
    if manifest.layout != LAYOUT {
        return Err(MaracError::Format(format!(
            "manifest layout '{}' unsupported (expected '{LAYOUT}')",
            manifest.layout
        )));
    }
    manifest.split.validate(manifest.t)?;
    let (m, n, t, d) = (manifest.m, manifest.n, manifest.t, manifest.d);
    let xs = read_floats(&dir.join("x.bin"), t * m * n, "x.bin")?;
    let zs = read_floats(&dir.join("z.bin"), t * d, "z.bin")?;
    let frames: Vec<Mat> = (0..t)
        .map(|ti| Mat::from_row_slice(m, n, &xs[ti * m * n..(ti + 1) * m * n]))
        .collect();
    let aux: Vec<Vector> = (0..t)
        .map(|ti| Vector::from_column_slice(&zs[ti * d..(ti + 1) * d]))
        .collect();
    Ok((MatrixSeries::new(frames, aux)?, manifest.split, manifest.grid))
}

/// Ingest long-format CSVs: `x_csv` with header `t,i,j,value` and `z_csv`
/// with header `t,d,value`. Indices are 0-based and every (t, i, j) cell must
/// be present.
pub fn ingest_csv(x_csv: &Path, z_csv: &Path) -> Result<MatrixSeries> {
    let mut x_rows: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut reader = csv::Reader::from_path(x_csv).map_err(MaracError::from)?;
    for record in reader.deserialize() {
        let (t, i, j, value): (usize, usize, usize, f64) = record?;
        x_rows.push((t, i, j, value));
    }
    if x_rows.is_empty() {
        return Err(MaracError::Format("x csv holds no data rows".into()));
    }
    let t_count = x_rows.iter().map(|r| r.0).max().unwrap() + 1;
    let m = x_rows.iter().map(|r| r.1).max().unwrap() + 1;
    let n = x_rows.iter().map(|r| r.2).max().unwrap() + 1;
    let mut frames = vec![Mat::zeros(m, n); t_count];
    let mut seen = vec![false; t_count * m * n];
    for (t, i, j, value) in x_rows {
        frames[t][(i, j)] = value;
        seen[t * m * n + i * n + j] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let t = missing / (m * n);
        let rest = missing % (m * n);
        return Err(MaracError::Format(format!(
            "x csv is missing cell (t={t}, i={}, j={})",
            rest / n,
            rest % n
        )));
    }

    let mut z_rows: Vec<(usize, usize, f64)> = Vec::new();
    let mut reader = csv::Reader::from_path(z_csv).map_err(MaracError::from)?;
    for record in reader.deserialize() {
        let (t, d, value): (usize, usize, f64) = record?;
        z_rows.push((t, d, value));
    }
    let d = z_rows.iter().map(|r| r.1).max().map(|v| v + 1).unwrap_or(0);
    let mut aux = vec![Vector::zeros(d); t_count];
    let mut seen_z = vec![false; t_count * d];
    for (t, dd, value) in z_rows {
        if t >= t_count {
            return Err(MaracError::Format(format!(
                "z csv row with t={t} beyond the x series length {t_count}"
            )));
        }
        aux[t][dd] = value;
        seen_z[t * d + dd] = true;
    }
    if let Some(missing) = seen_z.iter().position(|s| !s) {
        return Err(MaracError::Format(format!(
            "z csv is missing cell (t={}, d={})",
            missing / d,
            missing % d
        )));
    }
    MatrixSeries::new(frames, aux)
}

/// Per-entry matrix mean and per-coordinate auxiliary mean of the training
/// window; subtracted from every split so forecasts can be de-centered.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterMeans {
    pub frame_mean: Mat,
    pub aux_mean: Vector,
}

/// Zero-mean all splits using means computed on the training window only.
pub fn center_by_train_mean(
    series: &MatrixSeries,
    split: SplitSpec,
) -> Result<(MatrixSeries, CenterMeans)> {
    split.validate(series.len())?;
    let t_train = split.train_end;
    let mut frame_mean = Mat::zeros(series.nrows(), series.ncols());
    let mut aux_mean = Vector::zeros(series.aux_dim());
    for t in 0..t_train {
        frame_mean += series.frame(t);
        aux_mean += series.aux(t);
    }
    frame_mean /= t_train as f64;
    aux_mean /= t_train as f64;
    let frames: Vec<Mat> = series.frames().iter().map(|f| f - &frame_mean).collect();
    let aux: Vec<Vector> = series.aux_vectors().iter().map(|z| z - &aux_mean).collect();
    Ok((
        MatrixSeries::new(frames, aux)?,
        CenterMeans {
            frame_mean,
            aux_mean,
        },
    ))
}

impl CenterMeans {
    /// Map a forecast made on the centered scale back to the original scale.
    pub fn decenter_frame(&self, pred: &Mat) -> Mat {
        pred + &self.frame_mean
    }
}
