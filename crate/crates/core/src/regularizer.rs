//! Detection and repair of geodesic-neighborhood mismatches against a
//! reference shape, plus the mismatch-count convergence test.
//!
//! A particle's geodesic neighbors are the particles whose surface distance
//! lies within [`NEIGHBOR_FACTOR`] of its closest one. A particle is
//! mismatched on a shape when some of its reference-shape neighbors are
//! absent from its own neighborhood there. Repair walks each mismatched
//! particle along the surface toward every missing neighbor in turn,
//! stopping at that neighbor's own closest-neighbor distance, processing
//! particles from most to least mismatched.
//!
//! Shapes are repaired independently (and in parallel); within one shape the
//! walks are strictly sequential, each starting from the previous walk's
//! result. Mismatch counts, the processing order, and the stop distances are
//! all frozen at the start of a pass so that one pass is a deterministic
//! function of its input.

use nalgebra::{DMatrix, Point3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodesy::{neighbor_sets, GeodesicIndex};
use crate::mesh::MeshAccel;
use crate::shape::{Cohort, ParticleSystem};

/// A particle counts as a geodesic neighbor when its surface distance is
/// within this factor of the closest neighbor's.
pub const NEIGHBOR_FACTOR: f64 = 1.5;

/// Per-shape, per-particle counts of reference neighbors missing from the
/// shape's own geodesic neighborhoods. The reference shape's row is zero by
/// definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MismatchReport {
    reference: usize,
    counts: Vec<Vec<usize>>,
}

impl MismatchReport {
    /// Index of the reference shape the counts were measured against.
    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn num_shapes(&self) -> usize {
        self.counts.len()
    }

    /// Missing-neighbor count per particle on one shape.
    pub fn particle_counts(&self, shape: usize) -> &[usize] {
        &self.counts[shape]
    }

    /// Number of particles on `shape` with at least one missing neighbor.
    pub fn mismatched_particles(&self, shape: usize) -> usize {
        self.counts[shape].iter().filter(|&&c| c > 0).count()
    }

    /// Mismatched-particle count summed over all shapes.
    pub fn total_mismatched_particles(&self) -> usize {
        (0..self.counts.len())
            .map(|i| self.mismatched_particles(i))
            .sum()
    }

    /// Missing-neighbor count summed over all shapes and particles.
    pub fn total_missing_neighbors(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

/// True when every shape has at most `tolerance` mismatched particles.
pub fn converged(report: &MismatchReport, tolerance: usize) -> bool {
    (0..report.num_shapes()).all(|i| report.mismatched_particles(i) <= tolerance)
}

/// Count, for every shape and particle, how many of the particle's
/// reference-shape geodesic neighbors are missing from its neighborhood on
/// that shape. Neighborhoods use `factor` times the closest-neighbor
/// distance as the cutoff.
pub fn mismatch_report(
    system: &ParticleSystem,
    cohort: &Cohort,
    reference: usize,
    factor: f64,
) -> Result<MismatchReport> {
    check_inputs(system, cohort, reference)?;
    let ref_sets =
        cohort.geodesic(reference).geodesic_neighbors(system.positions(reference), factor)?;
    let counts: Vec<Vec<usize>> = (0..system.num_shapes())
        .into_par_iter()
        .map(|i| -> Result<Vec<usize>> {
            if i == reference {
                return Ok(vec![0; system.num_particles()]);
            }
            let sets = cohort.geodesic(i).geodesic_neighbors(system.positions(i), factor)?;
            Ok(ref_sets
                .iter()
                .zip(&sets)
                .map(|(wanted, own)| {
                    wanted.iter().filter(|n| own.binary_search(n).is_err()).count()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(MismatchReport { reference, counts })
}

/// One repair pass: walk every mismatched particle toward each missing
/// reference neighbor, most-mismatched particles first (ties broken by
/// particle index), leaving it at the missing neighbor's own
/// closest-neighbor distance along the surface path. Walked particles end
/// snapped to the surface; everything else is untouched.
pub fn regularize(
    system: &ParticleSystem,
    cohort: &Cohort,
    reference: usize,
) -> Result<ParticleSystem> {
    check_inputs(system, cohort, reference)?;
    let ref_sets = cohort
        .geodesic(reference)
        .geodesic_neighbors(system.positions(reference), NEIGHBOR_FACTOR)?;
    let positions: Vec<Vec<Point3<f64>>> = (0..system.num_shapes())
        .into_par_iter()
        .map(|i| -> Result<Vec<Point3<f64>>> {
            if i == reference {
                return Ok(system.positions(i).to_vec());
            }
            repair_shape(system.positions(i), &ref_sets, cohort.geodesic(i), cohort.accel(i))
        })
        .collect::<Result<_>>()?;
    ParticleSystem::new(system.shape_ids().to_vec(), positions)
}

fn repair_shape(
    start: &[Point3<f64>],
    ref_sets: &[Vec<usize>],
    geo: &GeodesicIndex,
    accel: &MeshAccel,
) -> Result<Vec<Point3<f64>>> {
    let j_count = start.len();
    let mut pair = geo.particle_geodesics(start);
    let sets = neighbor_sets(&pair, NEIGHBOR_FACTOR)?;
    let d_star: Vec<f64> = (0..j_count)
        .map(|a| {
            (0..j_count)
                .filter(|&b| b != a)
                .map(|b| pair[(a, b)])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let missing: Vec<Vec<usize>> = ref_sets
        .iter()
        .zip(&sets)
        .map(|(wanted, own)| {
            wanted.iter().copied().filter(|n| own.binary_search(n).is_err()).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..j_count).filter(|&j| !missing[j].is_empty()).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(missing[j].len()), j));

    let mut pts = start.to_vec();
    let mut pending = vec![false; j_count];
    for &j in &order {
        pending[j] = true;
    }
    for &j in &order {
        pending[j] = false;
        for &nb in &missing[j] {
            let (p, row) =
                repair_walk(geo, accel, &pts, &pair, &pending, ref_sets, j, nb, d_star[nb])?;
            pts[j] = p;
            for k in 0..j_count {
                pair[(j, k)] = row[k];
                pair[(k, j)] = row[k];
            }
        }
    }
    Ok(pts)
}

/// Number of intermediate landings probed per unit of stop distance when
/// searching for the gentlest landing along a repair walk.
const PROBES_PER_STOP: f64 = 4.0;

/// Upper bound on probed landings per walk, so very long walks stay cheap.
const MAX_PROBES: usize = 16;

/// Move particle `j` along the surface path toward missing neighbor `nb`.
///
/// The destination is the path point `stop_short` before `nb`. Walking that
/// far is right for gross defects but overshoots small ones: it carries `j`
/// past the particles it belongs with and breaks their neighborhoods in
/// turn. So the walk probes intermediate landings as well and settles on the
/// earliest candidate that leaves the shape with the fewest mismatched
/// particles overall, the full-distance landing being the final candidate.
/// Staying put is the baseline candidate and wins ties, so a walk is only
/// taken when it strictly improves the shape.
///
/// Returns the chosen position together with its row of surface distances
/// to the other particles, so the caller can update the pairwise matrix.
#[allow(clippy::too_many_arguments)]
fn repair_walk(
    geo: &GeodesicIndex,
    accel: &MeshAccel,
    pts: &[Point3<f64>],
    pair: &DMatrix<f64>,
    pending: &[bool],
    ref_sets: &[Vec<usize>],
    j: usize,
    nb: usize,
    stop_short: f64,
) -> Result<(Point3<f64>, Vec<f64>)> {
    let stay_row: Vec<f64> = (0..pts.len()).map(|k| pair[(j, k)]).collect();
    let baseline = settled_mismatch(pair, &stay_row, pending, ref_sets, j);
    let mut best = (baseline, pts[j], stay_row);
    if baseline.clean() {
        return Ok((best.1, best.2));
    }

    let target = pts[nb];
    let to_nb = pair[(j, nb)];
    let span = to_nb - stop_short;
    let mut steps = Vec::new();
    // The shortest move that pulls `nb` back under the neighborhood cutoff,
    // assuming the rest of the shape holds still — the gentlest repair a
    // barely-out-of-reach neighbor can get. A second try 10% farther covers
    // path curvature and the snap back to the surface.
    let closest_j = (0..pts.len())
        .filter(|&m| m != j)
        .map(|m| pair[(j, m)])
        .fold(f64::INFINITY, f64::min);
    let s_close = to_nb - NEIGHBOR_FACTOR * closest_j;
    for s in [s_close, 1.1 * s_close] {
        if s > 0.0 && s <= span {
            steps.push(s);
        }
    }
    if span > 0.0 {
        let n = ((span / stop_short * PROBES_PER_STOP).ceil() as usize).clamp(1, MAX_PROBES);
        for k in 1..=n {
            steps.push(span * k as f64 / (n + 1) as f64);
        }
    }
    let mut candidates = Vec::new();
    for s in steps {
        let (q, clamped) = geo.geodesic_walk(accel, &pts[j], &target, s)?;
        if clamped {
            break;
        }
        candidates.push(q);
    }
    let (full, moved) = walk_full(geo, accel, pts, j, &target, stop_short)?;
    if moved {
        candidates.push(full);
    }

    let trace = std::env::var("APSM_TRACE").is_ok();
    if trace {
        eprintln!(
            "  walk j={j} nb={nb} to_nb={to_nb:.3} stop={stop_short:.3} baseline={baseline:?}"
        );
    }
    for q in candidates {
        let row = row_distances(geo, pts, j, &q);
        let score = settled_mismatch(pair, &row, pending, ref_sets, j);
        if trace {
            eprintln!("    cand move={:.3} score={score:?}", (q - pts[j]).norm());
        }
        if score.better_than(&best.0) {
            best = (score, q, row);
        }
    }
    Ok((best.1, best.2))
}

/// Surface distances from `at` (standing in for particle `j`) to every
/// particle, with the same point-to-point metric as the pairwise matrix.
fn row_distances(geo: &GeodesicIndex, pts: &[Point3<f64>], j: usize, at: &Point3<f64>) -> Vec<f64> {
    let (va, ca) = geo.nearest_vertex(at);
    let field = geo.distances_from_vertex(va);
    pts.iter()
        .enumerate()
        .map(|(k, p)| {
            if k == j {
                0.0
            } else {
                let (vk, ck) = geo.nearest_vertex(p);
                ca + field[vk as usize] + ck
            }
        })
        .collect()
}

/// Lexicographic quality of a candidate landing: mismatched particles,
/// then missing neighbors, then how far past their cutoffs the misses sit.
/// The continuous tail distinguishes barely-broken arrangements from badly
/// broken ones when the counts tie.
#[derive(Debug, Default, Clone, Copy, PartialEq)]
struct MismatchScore {
    particles: usize,
    neighbors: usize,
    excess: f64,
    slack: f64,
}

impl MismatchScore {
    fn clean(&self) -> bool {
        self.particles == 0 && self.neighbors == 0
    }

    fn better_than(&self, other: &MismatchScore) -> bool {
        (self.particles, self.neighbors)
            .cmp(&(other.particles, other.neighbors))
            .then(self.excess.partial_cmp(&other.excess).expect("finite excess"))
            // Larger total margin below the cutoffs is more robust.
            .then(other.slack.partial_cmp(&self.slack).expect("finite slack"))
            .is_lt()
    }
}

/// Shape-wide mismatch score — (mismatched particles, missing neighbors) —
/// with particle `j`'s distances taken from `row` instead of the matrix.
///
/// Particles still waiting for their own repair this pass (`pending`) sit
/// where the defect put them, so they are scored carefully rather than
/// taken at face value. They never tighten a neighborhood radius — letting
/// a soon-to-move particle shrink a radius would veto the very landing that
/// resolves an exchange — and their own radii ignore `j` as well, so their
/// rows respond to `j`'s candidate only through plain membership distance.
/// Their remaining misses are measured where everything currently stands;
/// those terms are the same for every candidate and cancel out of the
/// comparison, while the `j`-dependent terms reward landings that hand a
/// pending particle its neighbors back.
fn settled_mismatch(
    pair: &DMatrix<f64>,
    row: &[f64],
    pending: &[bool],
    ref_sets: &[Vec<usize>],
    j: usize,
) -> MismatchScore {
    let j_count = row.len();
    let d = |a: usize, b: usize| -> f64 {
        if a == j {
            row[b]
        } else if b == j {
            row[a]
        } else {
            pair[(a, b)]
        }
    };
    let mut score = MismatchScore::default();
    for k in 0..j_count {
        let mut closest = f64::INFINITY;
        for m in 0..j_count {
            if m != k && !pending[m] && (m != j || !pending[k]) {
                closest = closest.min(d(k, m));
            }
        }
        let cutoff = NEIGHBOR_FACTOR * closest;
        let mut miss = 0;
        for &m in &ref_sets[k] {
            let over = d(k, m) - cutoff;
            if over > 0.0 {
                miss += 1;
                score.excess += over;
            } else {
                score.slack -= over;
            }
        }
        if miss > 0 {
            score.particles += 1;
            score.neighbors += miss;
        }
    }
    score
}

/// Walk particle `j` toward `target`, stopping `stop_short` before it, but
/// never land on top of another particle: two particles repairing toward
/// the same neighbor would otherwise stop at the exact same path point and
/// collapse into a duplicate. Each retry lengthens the stop distance by two
/// clearances — far too little to change the repair geometry, enough to
/// separate the landings. Returns whether the particle actually moved; it
/// stays put when the whole path is within `stop_short` or the corridor
/// stays crowded.
fn walk_full(
    geo: &GeodesicIndex,
    accel: &MeshAccel,
    pts: &[Point3<f64>],
    j: usize,
    target: &Point3<f64>,
    stop_short: f64,
) -> Result<(Point3<f64>, bool)> {
    let clearance = 1e-3 * stop_short;
    for attempt in 0..4 {
        let back_off = stop_short + 2.0 * clearance * attempt as f64;
        let (p, moved) = geo.geodesic_walk_stop_short(accel, &pts[j], target, back_off)?;
        if !moved {
            return Ok((pts[j], false));
        }
        let crowded = pts
            .iter()
            .enumerate()
            .any(|(other, q)| other != j && (p - q).norm() <= clearance);
        if !crowded {
            return Ok((p, true));
        }
    }
    Ok((pts[j], false))
}

fn check_inputs(system: &ParticleSystem, cohort: &Cohort, reference: usize) -> Result<()> {
    if system.num_shapes() != cohort.len() {
        return Err(Error::InvalidArgument(format!(
            "particle system covers {} shapes but the cohort has {}",
            system.num_shapes(),
            cohort.len()
        )));
    }
    if reference >= cohort.len() {
        return Err(Error::InvalidArgument(format!(
            "reference index {reference} out of range for {} shapes",
            cohort.len()
        )));
    }
    Ok(())
}
