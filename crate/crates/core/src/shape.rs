//! Cohort containers: a shape (mesh + signed distance volume), the particle
//! system optimized across a cohort, and a `Cohort` bundle with per-shape
//! spatial/geodesic indices built once up front.

use nalgebra::{DVector, Point3, Vector3};

use crate::error::{Error, Result};
use crate::geodesy::GeodesicIndex;
use crate::mesh::{MeshAccel, TriangleMesh};
use crate::sdf::SignedDistanceVolume;

/// Threshold on `‖∇D‖` below which the distance gradient is considered
/// degenerate and normal/snap queries fall back to mesh geometry.
pub const DEGENERATE_GRADIENT: f64 = 0.1;

/// One cohort member: a closed mesh with its signed distance volume.
#[derive(Debug)]
pub struct ShapeSample {
    pub id: String,
    pub mesh: TriangleMesh,
    pub sdf: SignedDistanceVolume,
}

impl ShapeSample {
    /// Bundle a mesh with its distance volume, checking that the volume's
    /// zero level set actually lies on the mesh (sampled at the vertices).
    pub fn new(id: impl Into<String>, mesh: TriangleMesh, sdf: SignedDistanceVolume) -> Result<Self> {
        let id = id.into();
        let tol = 0.75 * sdf.max_spacing();
        for (i, v) in mesh.vertices().iter().enumerate() {
            let d = sdf.sample(v);
            if d.abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "shape {id}: sdf disagrees with the mesh at vertex {i} (|D| = {:.4e} > {tol:.4e}); wrong volume for this mesh?",
                    d.abs()
                )));
            }
        }
        Ok(ShapeSample { id, mesh, sdf })
    }

    /// Outward unit normal at `p` from the distance gradient, falling back to
    /// the nearest mesh vertex normal where the gradient degenerates.
    pub fn normal_at(&self, p: &Point3<f64>) -> Vector3<f64> {
        let g = self.sdf.gradient(p);
        let n = g.norm();
        if n < DEGENERATE_GRADIENT {
            let (v, _) = self.mesh.nearest_vertex(p);
            self.mesh.normals()[v]
        } else {
            g / n
        }
    }
}

/// Ordered particle sets, one per shape; index j encodes correspondence
/// across shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    shape_ids: Vec<String>,
    positions: Vec<Vec<Point3<f64>>>,
}

impl ParticleSystem {
    pub fn new(shape_ids: Vec<String>, positions: Vec<Vec<Point3<f64>>>) -> Result<Self> {
        if shape_ids.len() != positions.len() {
            return Err(Error::InvalidArgument(format!(
                "{} shape ids for {} particle sets",
                shape_ids.len(),
                positions.len()
            )));
        }
        if positions.is_empty() {
            return Err(Error::InvalidArgument("empty particle system".into()));
        }
        let count = positions[0].len();
        if count == 0 {
            return Err(Error::InvalidArgument("zero particles per shape".into()));
        }
        for (id, pts) in shape_ids.iter().zip(&positions) {
            if pts.len() != count {
                return Err(Error::ParticleCountMismatch {
                    context: format!("shape {id}"),
                    expected: count,
                    got: pts.len(),
                });
            }
            for (j, p) in pts.iter().enumerate() {
                if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "particle position".into(),
                        context: format!("shape {id}, particle {j}"),
                    });
                }
            }
        }
        Ok(ParticleSystem {
            shape_ids,
            positions,
        })
    }

    pub fn num_shapes(&self) -> usize {
        self.positions.len()
    }

    pub fn num_particles(&self) -> usize {
        self.positions[0].len()
    }

    pub fn shape_ids(&self) -> &[String] {
        &self.shape_ids
    }

    pub fn positions(&self, shape: usize) -> &[Point3<f64>] {
        &self.positions[shape]
    }

    pub fn positions_mut(&mut self, shape: usize) -> &mut [Point3<f64>] {
        &mut self.positions[shape]
    }

    pub fn all_positions(&self) -> &[Vec<Point3<f64>>] {
        &self.positions
    }

    /// Shape `i` flattened to a 3J vector (x₀ y₀ z₀ x₁ …).
    pub fn flatten(&self, shape: usize) -> DVector<f64> {
        let pts = &self.positions[shape];
        let mut v = DVector::zeros(3 * pts.len());
        for (j, p) in pts.iter().enumerate() {
            v[3 * j] = p.x;
            v[3 * j + 1] = p.y;
            v[3 * j + 2] = p.z;
        }
        v
    }

    /// Inverse of [`flatten`](Self::flatten) for a single shape vector.
    pub fn unflatten(v: &DVector<f64>) -> Vec<Point3<f64>> {
        (0..v.len() / 3)
            .map(|j| Point3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]))
            .collect()
    }

    /// Mean of the flattened shape vectors.
    pub fn mean_flat(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(3 * self.num_particles());
        for i in 0..self.num_shapes() {
            acc += self.flatten(i);
        }
        acc / self.num_shapes() as f64
    }
}

/// A cohort of shapes with per-shape geodesic and closest-point indices.
#[derive(Debug)]
pub struct Cohort {
    samples: Vec<ShapeSample>,
    geodesics: Vec<GeodesicIndex>,
    accels: Vec<MeshAccel>,
}

impl Cohort {
    pub fn new(samples: Vec<ShapeSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::CohortTooSmall {
                got: 0,
                required: 1,
            });
        }
        let geodesics = samples
            .iter()
            .map(|s| GeodesicIndex::new(&s.mesh))
            .collect::<Result<Vec<_>>>()?;
        let accels = samples.iter().map(|s| MeshAccel::new(&s.mesh)).collect();
        Ok(Cohort {
            samples,
            geodesics,
            accels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ShapeSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &ShapeSample {
        &self.samples[i]
    }

    pub fn geodesic(&self, i: usize) -> &GeodesicIndex {
        &self.geodesics[i]
    }

    pub fn accel(&self, i: usize) -> &MeshAccel {
        &self.accels[i]
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }
}
