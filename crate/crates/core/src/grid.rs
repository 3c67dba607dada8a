//! Voxelized region of interest.
//!
//! One layout contract holds for every module: linear index
//! `n = ix + nx·iy + nx·ny·iz` (x fastest, then y, then z), i.e. the
//! column-major order of MATLAB's `reshape`.

use ndarray::{Array3, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, RemError, Result};

pub type Point3 = [f64; 3];

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub origin: Point3,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Point3) -> Result<Self> {
        let grid = GridSpec {
            nx: dims[0],
            ny: dims[1],
            nz: dims[2],
            dx: spacing[0],
            dy: spacing[1],
            dz: spacing[2],
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(RemError::InvalidParameter(format!(
                "grid dimensions must be positive, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        for (name, d) in [("dx", self.dx), ("dy", self.dy), ("dz", self.dz)] {
            if !(d > 0.0 && d.is_finite()) {
                return Err(RemError::InvalidParameter(format!(
                    "voxel edge {name} must be positive and finite, got {d}"
                )));
            }
        }
        if self.origin.iter().any(|c| !c.is_finite()) {
            return Err(RemError::InvalidParameter("grid origin must be finite".into()));
        }
        self.nx
            .checked_mul(self.ny)
            .and_then(|v| v.checked_mul(self.nz))
            .ok_or_else(|| RemError::InvalidParameter("voxel count overflows".into()))?;
        Ok(())
    }

    /// Total voxel count `N`.
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn linear_index(&self, ix: usize, iy: usize, iz: usize) -> Result<usize> {
        if ix >= self.nx || iy >= self.ny || iz >= self.nz {
            return Err(RemError::InvalidParameter(format!(
                "voxel ({ix},{iy},{iz}) outside {}x{}x{} grid",
                self.nx, self.ny, self.nz
            )));
        }
        Ok(ix + self.nx * (iy + self.ny * iz))
    }

    pub fn decompose(&self, n: usize) -> Result<[usize; 3]> {
        if n >= self.len() {
            return Err(RemError::IndexOutOfGrid { index: n, len: self.len() });
        }
        let ix = n % self.nx;
        let rest = n / self.nx;
        Ok([ix, rest % self.ny, rest / self.ny])
    }

    pub fn voxel_center(&self, n: usize) -> Result<Point3> {
        let [ix, iy, iz] = self.decompose(n)?;
        Ok([
            self.origin[0] + (ix as f64 + 0.5) * self.dx,
            self.origin[1] + (iy as f64 + 0.5) * self.dy,
            self.origin[2] + (iz as f64 + 0.5) * self.dz,
        ])
    }

    /// All voxel centers in linear-index order.
    pub fn centers(&self) -> Vec<Point3> {
        (0..self.len())
            .map(|n| self.voxel_center(n).expect("index in range"))
            .collect()
    }

    pub fn extent(&self) -> Point3 {
        [
            self.nx as f64 * self.dx,
            self.ny as f64 * self.dy,
            self.nz as f64 * self.dz,
        ]
    }

    pub fn min_spacing(&self) -> f64 {
        self.dx.min(self.dy).min(self.dz)
    }

    /// Length of the region's space diagonal.
    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }
}

/// A full REM: one linear-power RSS value (mW) per voxel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemTensor {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl RemTensor {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        check_len("REM values", grid.len(), values.len())?;
        if let Some(bad) = values.iter().position(|v| !(*v >= 0.0)) {
            return Err(RemError::InvalidParameter(format!(
                "REM value at voxel {bad} is {} (linear power must be nonnegative)",
                values[bad]
            )));
        }
        Ok(RemTensor { grid, values })
    }

    pub fn to_tensor(&self) -> Array3<f64> {
        reshape_vector_to_tensor(&self.grid, &self.values).expect("length checked at construction")
    }
}

/// Column-major reshape of a length-N vector to an `nx × ny × nz` array.
pub fn reshape_vector_to_tensor(grid: &GridSpec, x: &[f64]) -> Result<Array3<f64>> {
    check_len("reshape input", grid.len(), x.len())?;
    Array3::from_shape_vec((grid.nx, grid.ny, grid.nz).f(), x.to_vec())
        .map_err(|e| RemError::InvalidParameter(e.to_string()))
}

/// Inverse of [`reshape_vector_to_tensor`].
pub fn flatten_tensor(t: &Array3<f64>) -> Vec<f64> {
    let (nx, ny, nz) = t.dim();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                out.push(t[[ix, iy, iz]]);
            }
        }
    }
    out
}
