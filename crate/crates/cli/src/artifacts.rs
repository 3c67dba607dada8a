//! On-disk formats: grid CSV, sweep CSV and JSON manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rem_forge::{dbm_to_mw, mw_to_dbm, GridSpec, RemTensor, SweepRow};

/// Coordinates in the CSV are compared to the configured grid within this.
const COORD_TOL_M: f64 = 1e-6;

#[derive(Debug, Serialize, Deserialize)]
struct GridRecord {
    ix: usize,
    iy: usize,
    iz: usize,
    x_m: f64,
    y_m: f64,
    z_m: f64,
    rss_dbm: f64,
}

pub fn write_grid_csv(path: &Path, tensor: &RemTensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("create {}", path.display()))?;
    for (n, &mw) in tensor.values.iter().enumerate() {
        let [ix, iy, iz] = tensor.grid.decompose(n)?;
        let [x_m, y_m, z_m] = tensor.grid.voxel_center(n)?;
        w.serialize(GridRecord { ix, iy, iz, x_m, y_m, z_m, rss_dbm: mw_to_dbm(mw) })?;
    }
    w.flush().with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

/// Reads a grid CSV onto `grid`, converting back to mW. Every voxel must
/// appear exactly once, at the coordinates the grid puts it.
pub fn read_grid_csv(path: &Path, grid: &GridSpec) -> Result<RemTensor> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("open {}", path.display()))?;
    let mut values = vec![f64::NAN; grid.len()];
    let mut seen = vec![false; grid.len()];
    for (line, rec) in r.deserialize::<GridRecord>().enumerate() {
        let rec = rec.with_context(|| format!("{} record {}", path.display(), line + 1))?;
        let n = grid
            .linear_index(rec.ix, rec.iy, rec.iz)
            .with_context(|| format!("{} record {}", path.display(), line + 1))?;
        let c = grid.voxel_center(n)?;
        let off = [rec.x_m - c[0], rec.y_m - c[1], rec.z_m - c[2]];
        if off.iter().any(|d| d.abs() > COORD_TOL_M) {
            bail!("{}: voxel ({}, {}, {}) is not at the configured position", path.display(), rec.ix, rec.iy, rec.iz);
        }
        if std::mem::replace(&mut seen[n], true) {
            bail!("{}: voxel ({}, {}, {}) appears twice", path.display(), rec.ix, rec.iy, rec.iz);
        }
        values[n] = dbm_to_mw(rec.rss_dbm);
    }
    let missing = seen.iter().filter(|s| !**s).count();
    if missing > 0 {
        bail!("{}: {missing} of {} voxels missing", path.display(), grid.len());
    }
    Ok(RemTensor::new(grid.clone(), values)?)
}

#[derive(Debug, Serialize)]
struct SweepRecord<'a> {
    variable: &'a str,
    value: f64,
    seed: u64,
    mae_db: f64,
    wc_sbl_v: f64,
    m_samples: usize,
    wall_ms: f64,
    converged: bool,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("create {}", path.display()))?;
    for r in rows {
        w.serialize(SweepRecord {
            variable: &r.variable,
            value: r.value,
            seed: r.seed,
            mae_db: r.mae_db,
            wc_sbl_v: r.wc_sbl_v,
            m_samples: r.m_samples,
            wall_ms: r.wall_ms,
            converged: r.converged,
        })?;
    }
    w.flush().with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("write {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("write {}", path.display()))
}

/// Common header of every `<command>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub dims: [usize; 3],
    pub n_voxels: usize,
    pub execution: &'static str,
    pub threads: Option<usize>,
    pub wall_ms: f64,
    pub files: Vec<String>,
    #[serde(flatten)]
    pub details: serde_json::Map<String, serde_json::Value>,
}

/// Output directory, created if needed.
pub fn prepare_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    Ok(dir.to_path_buf())
}
