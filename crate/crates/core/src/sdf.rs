//! Signed distance volumes: voxelization of closed meshes and trilinear
//! field/gradient queries.
//!
//! Values are stored at grid nodes as `f32` (matching the on-disk dtype) in
//! x-major order: node (ix, iy, iz) lives at `(ix·ny + iy)·nz + iz`. The sign
//! convention is negative inside the surface, positive outside. All
//! interpolation is carried out in `f64`.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{MeshAccel, TriangleMesh};

/// Default cap on the number of grid nodes a voxelization may allocate.
pub const DEFAULT_VOXEL_BUDGET: usize = 1 << 24;

/// Regular grid of signed distances with precomputed central-difference
/// gradients. Queries outside the grid clamp to the boundary and increment
/// a warning counter instead of failing.
#[derive(Debug)]
pub struct SignedDistanceVolume {
    dims: [usize; 3],
    origin: Point3<f64>,
    spacing: [f64; 3],
    values: Vec<f32>,
    gradients: Vec<[f32; 3]>,
    clamp_warnings: AtomicU64,
}

impl SignedDistanceVolume {
    /// Assemble a volume from raw parts (used by the file loader); computes
    /// the gradient grid.
    pub fn from_parts(
        dims: [usize; 3],
        origin: Point3<f64>,
        spacing: [f64; 3],
        values: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidVolume(format!(
                "dims {dims:?} too small; need at least 2 nodes per axis"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "non-positive spacing {spacing:?}"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "data size mismatch: {} values for dims {dims:?} ({expected} expected)",
                values.len()
            )));
        }
        let gradients = central_gradients(&dims, &spacing, &values);
        Ok(SignedDistanceVolume {
            dims,
            origin,
            spacing,
            values,
            gradients,
            clamp_warnings: AtomicU64::new(0),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Number of queries so far that fell outside the grid and were clamped.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_warnings.load(Ordering::Relaxed)
    }

    #[inline]
    fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    /// Value stored at a grid node.
    pub fn node_value(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.node_index(ix, iy, iz)] as f64
    }

    /// Position of a grid node.
    pub fn node_position(&self, ix: usize, iy: usize, iz: usize) -> Point3<f64> {
        Point3::new(
            self.origin.x + ix as f64 * self.spacing[0],
            self.origin.y + iy as f64 * self.spacing[1],
            self.origin.z + iz as f64 * self.spacing[2],
        )
    }

    /// Clamped cell coordinates and interpolation weights for a query point.
    fn locate(&self, p: &Point3<f64>) -> ([usize; 3], [f64; 3]) {
        let mut cell = [0usize; 3];
        let mut frac = [0f64; 3];
        let mut clamped = false;
        for k in 0..3 {
            let t = (p[k] - self.origin[k]) / self.spacing[k];
            let max = (self.dims[k] - 1) as f64;
            let mut tc = if t < 0.0 {
                clamped = true;
                0.0
            } else if t > max {
                clamped = true;
                max
            } else {
                t
            };
            // Snap to exact node coordinates so node queries reproduce stored
            // values bit-for-bit despite origin/spacing roundoff.
            let r = tc.round();
            if (tc - r).abs() < 1e-9 {
                tc = r;
            }
            let i = (tc.floor() as usize).min(self.dims[k] - 2);
            cell[k] = i;
            frac[k] = tc - i as f64;
        }
        if clamped {
            self.clamp_warnings.fetch_add(1, Ordering::Relaxed);
        }
        (cell, frac)
    }

    /// Trilinearly interpolated signed distance at `p`.
    pub fn sample(&self, p: &Point3<f64>) -> f64 {
        let (c, f) = self.locate(p);
        let mut acc = 0.0;
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let w = weight(f[0], dx) * weight(f[1], dy) * weight(f[2], dz);
                    acc += w * self.node_value(c[0] + dx, c[1] + dy, c[2] + dz);
                }
            }
        }
        acc
    }

    /// Trilinearly interpolated gradient of the distance field at `p`.
    pub fn gradient(&self, p: &Point3<f64>) -> Vector3<f64> {
        let (c, f) = self.locate(p);
        let mut acc = Vector3::zeros();
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let w = weight(f[0], dx) * weight(f[1], dy) * weight(f[2], dz);
                    let g = self.gradients[self.node_index(c[0] + dx, c[1] + dy, c[2] + dz)];
                    acc += w * Vector3::new(g[0] as f64, g[1] as f64, g[2] as f64);
                }
            }
        }
        acc
    }
}

#[inline]
fn weight(f: f64, d: usize) -> f64 {
    if d == 0 {
        1.0 - f
    } else {
        f
    }
}

fn central_gradients(dims: &[usize; 3], spacing: &[f64; 3], values: &[f32]) -> Vec<[f32; 3]> {
    let idx = |ix: usize, iy: usize, iz: usize| (ix * dims[1] + iy) * dims[2] + iz;
    let mut out = vec![[0f32; 3]; values.len()];
    for ix in 0..dims[0] {
        for iy in 0..dims[1] {
            for iz in 0..dims[2] {
                let i = [ix, iy, iz];
                let mut g = [0f32; 3];
                for k in 0..3 {
                    let (lo, hi, denom) = if i[k] == 0 {
                        (0, 1, spacing[k])
                    } else if i[k] == dims[k] - 1 {
                        (dims[k] - 2, dims[k] - 1, spacing[k])
                    } else {
                        (i[k] - 1, i[k] + 1, 2.0 * spacing[k])
                    };
                    let mut a = i;
                    let mut b = i;
                    a[k] = lo;
                    b[k] = hi;
                    let va = values[idx(a[0], a[1], a[2])] as f64;
                    let vb = values[idx(b[0], b[1], b[2])] as f64;
                    g[k] = ((vb - va) / denom) as f32;
                }
                out[idx(ix, iy, iz)] = g;
            }
        }
    }
    out
}

/// Voxelize a closed mesh into a signed distance volume.
///
/// The grid covers the mesh bounding box expanded by `padding` on every side
/// at the given node `spacing`. Distances are exact point-to-mesh distances;
/// signs come from axis-ray crossing parity (negative inside).
pub fn voxelize_sdf(
    mesh: &TriangleMesh,
    spacing: f64,
    padding: f64,
    voxel_budget: usize,
) -> Result<SignedDistanceVolume> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "voxel spacing must be positive, got {spacing}"
        )));
    }
    if padding < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "padding must be non-negative, got {padding}"
        )));
    }
    let (lo, hi) = mesh.bbox();
    let origin = Point3::new(lo.x - padding, lo.y - padding, lo.z - padding);
    let mut dims = [0usize; 3];
    for k in 0..3 {
        let extent = hi[k] - lo[k] + 2.0 * padding;
        dims[k] = (extent / spacing).ceil() as usize + 1;
        dims[k] = dims[k].max(2);
    }
    let total = dims[0] * dims[1] * dims[2];
    if total > voxel_budget {
        return Err(Error::GridBudget {
            required: total,
            budget: voxel_budget,
        });
    }

    let accel = MeshAccel::new(mesh);
    // Tiny irrational offsets keep scanlines off triangle edges/vertices so
    // crossing parity stays well defined.
    let jy = spacing * 1.18973e-7;
    let jz = spacing * 2.33419e-7;

    // One scanline per (iy, iz) node row: signs from crossing parity along x,
    // magnitudes from exact closest-point distances.
    let rows: Vec<(usize, usize)> = (0..dims[1])
        .flat_map(|iy| (0..dims[2]).map(move |iz| (iy, iz)))
        .collect();
    let columns: Vec<Vec<f32>> = rows
        .par_iter()
        .map(|&(iy, iz)| {
            let y = origin.y + iy as f64 * spacing;
            let z = origin.z + iz as f64 * spacing;
            let crossings = accel.x_crossings(y + jy, z + jz);
            let mut col = Vec::with_capacity(dims[0]);
            for ix in 0..dims[0] {
                let p = Point3::new(origin.x + ix as f64 * spacing, y, z);
                let (_, dist, _) = accel.closest_point(&p);
                let inside = crossings.partition_point(|&cx| cx < p.x) % 2 == 1;
                col.push(if inside { -dist as f32 } else { dist as f32 });
            }
            col
        })
        .collect();

    let mut values = vec![0f32; total];
    for (row, col) in rows.iter().zip(columns) {
        let (iy, iz) = *row;
        for (ix, v) in col.into_iter().enumerate() {
            values[(ix * dims[1] + iy) * dims[2] + iz] = v;
        }
    }
    SignedDistanceVolume::from_parts(dims, origin, [spacing; 3], values)
}
