//! Initial particle placement and correspondence.
//!
//! Pipeline: farthest-point sampling spreads particles evenly over every
//! shape; rigid ICP between vertex subsets picks the medoid shape as the
//! reference and yields per-shape alignments; each other shape's particles
//! are then reordered by a Hungarian assignment whose cost combines the
//! difference of sorted within-shape geodesic-distance profiles (a
//! shape-intrinsic structural signature) with the aligned Euclidean gap as a
//! tie-breaker; finally one geodesic-neighborhood repair pass runs.
//!
//! The whole pipeline is deterministic: sampling is seeded from the vertex
//! nearest each mesh's vertex centroid and no randomness is used anywhere.

use std::collections::HashMap;

use nalgebra::{
    DMatrix, Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3,
};
use rayon::prelude::*;

use crate::assignment::hungarian_match;
use crate::error::{Error, Result};
use crate::geodesy::GeodesicIndex;
use crate::regularizer::regularize;
use crate::shape::{Cohort, ParticleSystem};

/// Cap on the per-shape vertex subset used for rigid registration.
pub const ICP_SUBSET: usize = 500;

/// Fixed iteration count for each rigid registration.
pub const ICP_ITERATIONS: usize = 30;

/// Outcome of medoid reference selection.
#[derive(Debug, Clone)]
pub struct ReferenceSelection {
    /// Index of the shape minimizing summed post-registration RMS distance
    /// to all others (ties broken toward the lowest index).
    pub reference: usize,
    /// Rigid transform taking each shape's coordinates into the reference
    /// frame (identity for the reference itself and for diverged pairs).
    pub alignments: Vec<Isometry3<f64>>,
    /// Human-readable notes about diverged registrations.
    pub warnings: Vec<String>,
}

/// Initialized particle system plus provenance.
#[derive(Debug, Clone)]
pub struct InitOutcome {
    pub system: ParticleSystem,
    pub reference: usize,
    pub warnings: Vec<String>,
}

struct IcpResult {
    transform: Isometry3<f64>,
    rms: f64,
    diverged: bool,
}

/// Pick the cohort's medoid under pairwise rigid registration: every pair of
/// vertex subsets is registered with fixed-iteration point-to-point ICP and
/// the shape with the smallest summed RMS to all others wins. A registration
/// whose RMS grows five consecutive iterations counts as diverged and falls
/// back to the unregistered RMS (with a warning).
pub fn select_reference(cohort: &Cohort) -> Result<ReferenceSelection> {
    let n = cohort.len();
    if n < 2 {
        return Err(Error::CohortTooSmall {
            got: n,
            required: 2,
        });
    }
    let subsets: Vec<Vec<Point3<f64>>> = (0..n)
        .map(|i| vertex_subset(cohort.sample(i).mesh.vertices(), ICP_SUBSET))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
        .collect();
    // Each pair registers the higher-index shape onto the lower-index one.
    let registered: Vec<((usize, usize), IcpResult)> = pairs
        .par_iter()
        .map(|&(a, b)| ((a, b), icp(&subsets[b], &subsets[a], ICP_ITERATIONS)))
        .collect();

    let mut rms_sum = vec![0.0f64; n];
    let mut transforms: HashMap<(usize, usize), Isometry3<f64>> = HashMap::new();
    let mut warnings = Vec::new();
    for ((a, b), r) in registered {
        rms_sum[a] += r.rms;
        rms_sum[b] += r.rms;
        if r.diverged {
            warnings.push(format!(
                "registration of shape {} onto shape {} diverged; scored with the unregistered distance",
                cohort.sample(b).id,
                cohort.sample(a).id
            ));
        }
        transforms.insert((a, b), r.transform);
    }
    let mut reference = 0;
    for i in 1..n {
        if rms_sum[i] < rms_sum[reference] {
            reference = i;
        }
    }
    let alignments: Vec<Isometry3<f64>> = (0..n)
        .map(|i| {
            if i == reference {
                Isometry3::identity()
            } else if reference < i {
                transforms[&(reference, i)]
            } else {
                transforms[&(i, reference)].inverse()
            }
        })
        .collect();
    Ok(ReferenceSelection {
        reference,
        alignments,
        warnings,
    })
}

/// Build the initial particle system: evenly spread particles per shape,
/// correspondence against the automatically selected reference via a
/// Hungarian assignment, then one geodesic-neighborhood repair pass.
pub fn initialize(cohort: &Cohort, particle_count: usize) -> Result<InitOutcome> {
    if particle_count < 4 {
        return Err(Error::InvalidArgument(format!(
            "at least 4 particles are required, got {particle_count}"
        )));
    }
    let selection = select_reference(cohort)?;
    let reference = selection.reference;

    let fps: Vec<Vec<Point3<f64>>> = (0..cohort.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<Point3<f64>>> {
            let geo = cohort.geodesic(i);
            let picked = geo.farthest_point_sample(particle_count, centroid_vertex(geo))?;
            Ok(picked.into_iter().map(|v| geo.vertex(v)).collect())
        })
        .collect::<Result<_>>()?;

    // Sorted vectors of within-shape geodesic distances, one per particle.
    let profiles: Vec<Vec<Vec<f64>>> = (0..cohort.len())
        .into_par_iter()
        .map(|i| {
            let m = cohort.geodesic(i).particle_geodesics(&fps[i]);
            (0..particle_count)
                .map(|j| {
                    let mut row: Vec<f64> = (0..particle_count).map(|k| m[(j, k)]).collect();
                    row.sort_by(f64::total_cmp);
                    row
                })
                .collect()
        })
        .collect();

    let lambda = 1.0 / cohort.sample(reference).mesh.bbox_diagonal().max(1e-300);
    let positions: Vec<Vec<Point3<f64>>> = (0..cohort.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<Point3<f64>>> {
            if i == reference {
                return Ok(fps[reference].clone());
            }
            let align = &selection.alignments[i];
            let mut cost = DMatrix::zeros(particle_count, particle_count);
            for j in 0..particle_count {
                for k in 0..particle_count {
                    let structural: f64 = profiles[reference][j]
                        .iter()
                        .zip(&profiles[i][k])
                        .map(|(x, y)| (x - y).abs())
                        .sum();
                    let gap = (fps[reference][j] - align * fps[i][k]).norm();
                    cost[(j, k)] = structural + lambda * gap;
                }
            }
            let perm = hungarian_match(&cost)?;
            Ok(perm.into_iter().map(|k| fps[i][k]).collect())
        })
        .collect::<Result<_>>()?;

    let system = ParticleSystem::new(cohort.ids(), positions)?;
    let system = regularize(&system, cohort, reference)?;
    Ok(InitOutcome {
        system,
        reference,
        warnings: selection.warnings,
    })
}

/// Deterministic, evenly strided vertex subset of at most `cap` points.
fn vertex_subset(vertices: &[Point3<f64>], cap: usize) -> Vec<Point3<f64>> {
    let stride = vertices.len().div_ceil(cap).max(1);
    vertices.iter().step_by(stride).copied().collect()
}

/// Vertex nearest the mesh's vertex centroid; the sampling seed.
fn centroid_vertex(geo: &GeodesicIndex) -> u32 {
    let n = geo.num_vertices();
    let mut c = Vector3::zeros();
    for i in 0..n {
        c += geo.vertex(i as u32).coords;
    }
    geo.nearest_vertex(&Point3::from(c / n as f64)).0
}

/// Best rigid transform taking `src` onto `dst` (paired points, least
/// squares), with the reflection case folded back to a proper rotation.
fn kabsch(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Isometry3<f64> {
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut det_fix = Matrix3::identity();
    det_fix[(2, 2)] = (vt.transpose() * u.transpose()).determinant().signum();
    let r = Rotation3::from_matrix(&(vt.transpose() * det_fix * u.transpose()));
    let t = cd - r * cs;
    Isometry3::from_parts(Translation3::from(t), UnitQuaternion::from_rotation_matrix(&r))
}

fn nearest_in(cloud: &[Point3<f64>], p: &Point3<f64>) -> Point3<f64> {
    let mut best = (f64::INFINITY, cloud[0]);
    for q in cloud {
        let d = (q - p).norm_squared();
        if d < best.0 {
            best = (d, *q);
        }
    }
    best.1
}

fn nn_rms(pts: &[Point3<f64>], dst: &[Point3<f64>]) -> f64 {
    let sum: f64 = pts
        .iter()
        .map(|p| {
            let q = nearest_in(dst, p);
            (q - p).norm_squared()
        })
        .sum();
    (sum / pts.len() as f64).sqrt()
}

/// Point-to-point rigid ICP of `src` onto `dst` for a fixed number of
/// iterations. Five consecutive RMS increases count as divergence: the
/// result then reports the unregistered RMS under the identity transform.
fn icp(src: &[Point3<f64>], dst: &[Point3<f64>], iterations: usize) -> IcpResult {
    let unregistered = nn_rms(src, dst);
    let mut transform = Isometry3::identity();
    let mut rms = unregistered;
    let mut grew = 0usize;
    for _ in 0..iterations {
        let moved: Vec<Point3<f64>> = src.iter().map(|p| transform * p).collect();
        let matched: Vec<Point3<f64>> = moved.iter().map(|p| nearest_in(dst, p)).collect();
        let next = kabsch(src, &matched);
        let next_rms = nn_rms(&src.iter().map(|p| next * p).collect::<Vec<_>>(), dst);
        if next_rms > rms {
            grew += 1;
            if grew >= 5 {
                return IcpResult {
                    transform: Isometry3::identity(),
                    rms: unregistered,
                    diverged: true,
                };
            }
        } else {
            grew = 0;
        }
        transform = next;
        rms = next_rms;
    }
    IcpResult {
        transform,
        rms,
        diverged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizer::{mismatch_report, NEIGHBOR_FACTOR};
    use crate::sdf::{voxelize_sdf, DEFAULT_VOXEL_BUDGET};
    use crate::shape::ShapeSample;
    use crate::synthetic::icosphere;
    use crate::mesh::TriangleMesh;

    fn sample_from(id: &str, mesh: TriangleMesh) -> ShapeSample {
        let sdf = voxelize_sdf(&mesh, 0.1, 0.35, DEFAULT_VOXEL_BUDGET).unwrap();
        ShapeSample::new(id, mesh, sdf).unwrap()
    }

    fn sphere_cohort(n: usize) -> Cohort {
        let mesh = icosphere(2, 1.0).unwrap();
        Cohort::new(
            (0..n)
                .map(|i| sample_from(&format!("s{i}"), mesh.clone()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn kabsch_recovers_a_rigid_motion() {
        let rot = Rotation3::from_axis_angle(&Vector3::x_axis(), 0.9)
            * Rotation3::from_axis_angle(&Vector3::z_axis(), -0.4);
        let t = Vector3::new(0.3, -1.2, 0.7);
        let src: Vec<Point3<f64>> = (0..12)
            .map(|i| {
                let x = (i as f64 * 0.7).sin();
                let y = (i as f64 * 1.3).cos();
                Point3::new(x, y, x * y + 0.1 * i as f64)
            })
            .collect();
        let dst: Vec<Point3<f64>> = src.iter().map(|p| rot * p + t).collect();
        let iso = kabsch(&src, &dst);
        for (s, d) in src.iter().zip(&dst) {
            assert!((iso * s - d).norm() < 1e-9);
        }
    }

    #[test]
    fn medoid_prefers_the_duplicated_radius() {
        let small = icosphere(2, 1.0).unwrap();
        let big = icosphere(2, 2.0).unwrap();
        let cohort = Cohort::new(vec![
            sample_from("a", small.clone()),
            sample_from("b", small),
            sample_from("c", big),
        ])
        .unwrap();
        let sel = select_reference(&cohort).unwrap();
        assert!(sel.reference < 2, "got {}", sel.reference);
    }

    #[test]
    fn single_shape_cohort_is_rejected() {
        let cohort = sphere_cohort(1);
        assert!(matches!(
            select_reference(&cohort),
            Err(Error::CohortTooSmall {
                got: 1,
                required: 2
            })
        ));
    }

    #[test]
    fn identical_shapes_tie_break_to_lowest_index() {
        let cohort = sphere_cohort(3);
        let sel = select_reference(&cohort).unwrap();
        assert_eq!(sel.reference, 0);
        for align in &sel.alignments {
            let delta = (align * Point3::new(0.4, -0.2, 0.8) - Point3::new(0.4, -0.2, 0.8)).norm();
            assert!(delta < 1e-6, "alignment should be near identity, moved {delta}");
        }
    }

    #[test]
    fn identical_cohort_matches_identically() {
        let cohort = sphere_cohort(3);
        let out = initialize(&cohort, 16).unwrap();
        assert!(out.warnings.is_empty());
        for i in 0..3 {
            assert_eq!(out.system.positions(i), out.system.positions(out.reference));
        }
    }

    #[test]
    fn rotated_sphere_correspondence_not_worse_than_naive() {
        let mesh = icosphere(2, 1.0).unwrap();
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI);
        let rotated = TriangleMesh::new(
            mesh.vertices().iter().map(|v| rot * v).collect(),
            mesh.faces().to_vec(),
        )
        .unwrap();
        let cohort =
            Cohort::new(vec![sample_from("a", mesh), sample_from("b", rotated)]).unwrap();

        let j = 24;
        let naive: Vec<Vec<Point3<f64>>> = (0..2)
            .map(|i| {
                let geo = cohort.geodesic(i);
                geo.farthest_point_sample(j, centroid_vertex(geo))
                    .unwrap()
                    .into_iter()
                    .map(|v| geo.vertex(v))
                    .collect()
            })
            .collect();
        let out = initialize(&cohort, j).unwrap();
        let naive_system = ParticleSystem::new(cohort.ids(), naive).unwrap();
        let before = mismatch_report(&naive_system, &cohort, out.reference, NEIGHBOR_FACTOR)
            .unwrap()
            .total_mismatched_particles();
        let after = mismatch_report(&out.system, &cohort, out.reference, NEIGHBOR_FACTOR)
            .unwrap()
            .total_mismatched_particles();
        assert!(after <= before, "mismatched particles {before} -> {after}");
    }

    #[test]
    fn small_particle_budget_stays_on_surface() {
        let cohort = sphere_cohort(2);
        let out = initialize(&cohort, 4).unwrap();
        assert_eq!(out.system.num_particles(), 4);
        for i in 0..2 {
            let sample = cohort.sample(i);
            let tol = 0.75 * sample.sdf.max_spacing();
            for p in out.system.positions(i) {
                assert!(sample.sdf.sample(p).abs() <= tol);
            }
        }
        assert!(matches!(
            initialize(&cohort, 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn initialization_is_deterministic() {
        let cohort = sphere_cohort(2);
        let a = initialize(&cohort, 12).unwrap();
        let b = initialize(&cohort, 12).unwrap();
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.system, b.system);
    }
}
