//! The three particle-system losses and their analytic gradients.
//!
//! * Sampling loss: softmin-weighted distances from random narrow-band probe
//!   points to the particles, optionally error-weighted by how far the
//!   implicit surface deviates from the true signed distance at each probe.
//! * Correspondence loss: compares each particle's neighborhood to the
//!   template shape's neighborhood after factoring out translation, rotation,
//!   and scale.
//! * Eigenshape loss: differential entropy of the minibatch particle vectors
//!   via the log-determinant of their regularized scatter.
//!
//! Gradient convention: quantities refreshed once per epoch — solved kernel
//! weights, particle normals, neighbor index sets, the softmin temperature,
//! the scatter regularizer, and the running mean — are constants within a
//! step. Every gradient here matches central finite differences under that
//! convention.

use nalgebra::{DMatrix, DVector, Point3, Rotation3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rbf::{eval_rbf, eval_rbf_particle_grad, RbfModel};
use crate::sdf::SignedDistanceVolume;
use crate::shape::ParticleSystem;

/// Random points within signed distance ±s of one shape's surface, with
/// their true signed-distance values.
#[derive(Debug, Clone)]
pub struct NarrowBandSamples {
    points: Vec<Point3<f64>>,
    values: Vec<f64>,
    offset: f64,
}

impl NarrowBandSamples {
    /// Wrap explicit samples; every |value| must be within `offset`.
    pub fn from_parts(points: Vec<Point3<f64>>, values: Vec<f64>, offset: f64) -> Result<Self> {
        if points.is_empty() || points.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "need matching non-empty points and values, got {} and {}",
                points.len(),
                values.len()
            )));
        }
        if !(offset > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "band half-width must be positive, got {offset}"
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.abs() <= offset)) {
            return Err(Error::InvalidArgument(format!(
                "sample {i} lies outside the ±{offset} band (value {})",
                values[i]
            )));
        }
        Ok(NarrowBandSamples {
            points,
            values,
            offset,
        })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Band half-width s the samples were drawn from.
    pub fn offset(&self) -> f64 {
        self.offset
    }
}

/// Rejection-sample `count` uniform points from the grid cells whose corner
/// values reach into the ±s band, keeping points with |D| ≤ s. Deterministic
/// for a fixed seed. Fails when fewer than `count` cells touch the band.
pub fn sample_narrow_band(
    sdf: &SignedDistanceVolume,
    count: usize,
    s: f64,
    rng_seed: u64,
) -> Result<NarrowBandSamples> {
    use rand::{Rng, SeedableRng};
    if count == 0 {
        return Err(Error::InvalidArgument(
            "cannot sample an empty narrow band".into(),
        ));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "band half-width must be positive, got {s}"
        )));
    }
    let [nx, ny, nz] = sdf.dims();
    let mut cells: Vec<[usize; 3]> = Vec::new();
    for ix in 0..nx - 1 {
        for iy in 0..ny - 1 {
            for iz in 0..nz - 1 {
                let mut near = false;
                for (dx, dy, dz) in [
                    (0, 0, 0),
                    (1, 0, 0),
                    (0, 1, 0),
                    (1, 1, 0),
                    (0, 0, 1),
                    (1, 0, 1),
                    (0, 1, 1),
                    (1, 1, 1),
                ] {
                    if sdf.node_value(ix + dx, iy + dy, iz + dz).abs() <= s {
                        near = true;
                        break;
                    }
                }
                if near {
                    cells.push([ix, iy, iz]);
                }
            }
        }
    }
    if cells.len() < count {
        return Err(Error::InvalidVolume(format!(
            "narrow band touches only {} grid cells, need at least {count}",
            cells.len()
        )));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    let spacing = sdf.spacing();
    let origin = sdf.origin();
    let mut points = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let max_attempts = 10_000 * count;
    while points.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidVolume(format!(
                "narrow-band rejection sampling stalled after {attempts} attempts \
                 ({} of {count} accepted)",
                points.len()
            )));
        }
        let cell = cells[rng.gen_range(0..cells.len())];
        let p = Point3::new(
            origin[0] + (cell[0] as f64 + rng.gen::<f64>()) * spacing[0],
            origin[1] + (cell[1] as f64 + rng.gen::<f64>()) * spacing[1],
            origin[2] + (cell[2] as f64 + rng.gen::<f64>()) * spacing[2],
        );
        let d = sdf.sample(&p);
        if d.abs() <= s {
            points.push(p);
            values.push(d);
        }
    }
    NarrowBandSamples::from_parts(points, values, s)
}

/// Median over particles of the Euclidean distance to the closest other
/// particle (mean of the middle pair for even counts). Used as the softmin
/// temperature and as the step-clipping scale.
pub fn median_nearest_spacing(particles: &[Point3<f64>]) -> Result<f64> {
    let j = particles.len();
    if j < 2 {
        return Err(Error::InvalidArgument(format!(
            "nearest spacing needs at least 2 particles, got {j}"
        )));
    }
    let mut nearest: Vec<f64> = particles
        .iter()
        .enumerate()
        .map(|(a, p)| {
            particles
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nearest.sort_by(|a, b| a.total_cmp(b));
    let mid = j / 2;
    Ok(if j % 2 == 1 {
        nearest[mid]
    } else {
        0.5 * (nearest[mid - 1] + nearest[mid])
    })
}

/// Softmin-weighted point-to-particle distances over the narrow band, scaled
/// per probe by `c·e + (1−c)` where `e = [f(b) − D(b)]²` measures how far the
/// implicit surface strays from the true signed distance there. Returns the
/// mean over all probe × particle entries and the analytic gradient with the
/// solved kernel weights held fixed.
pub fn sampling_loss(
    particles: &[Point3<f64>],
    model: &RbfModel,
    band: &NarrowBandSamples,
    c: f64,
    tau: f64,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let j = particles.len();
    let r_count = band.len();
    if j == 0 {
        return Err(Error::InvalidArgument("no particles".into()));
    }
    if r_count == 0 {
        return Err(Error::InvalidArgument("empty narrow band".into()));
    }
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!(
            "adaptivity weight must lie in [0, 1], got {c}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmin temperature must be positive, got {tau}"
        )));
    }

    let dipole_layout = model.sites().len() == 3 * j;
    let norm = 1.0 / (r_count as f64 * j as f64);
    let mut loss = 0.0;
    let mut grads = vec![Vector3::zeros(); j];
    let mut k_row = vec![0.0f64; j];
    let mut sig_row = vec![0.0f64; j];
    for (r, b) in band.points().iter().enumerate() {
        let mut k_min = f64::INFINITY;
        for (m, p) in particles.iter().enumerate() {
            k_row[m] = (p - b).norm();
            k_min = k_min.min(k_row[m]);
        }
        let mut z = 0.0;
        for m in 0..j {
            sig_row[m] = (-(k_row[m] - k_min) / tau).exp();
            z += sig_row[m];
        }
        let mut s_r = 0.0;
        for m in 0..j {
            sig_row[m] /= z;
            s_r += sig_row[m] * k_row[m];
        }
        let (g_r, err_r) = if c > 0.0 {
            let f = eval_rbf(model, b);
            let err = f - band.values()[r];
            (c * err * err + (1.0 - c), err)
        } else {
            (1.0, 0.0)
        };
        loss += s_r * g_r;
        for (m, p) in particles.iter().enumerate() {
            let k = k_row[m];
            if k > 0.0 {
                let u = (p - b) / k;
                // Through the distance itself and through the softmin row.
                let coeff = g_r * sig_row[m] * (1.0 - (k - s_r) / tau);
                grads[m] += coeff * u;
            }
            let w = s_r * c * 2.0 * err_r;
            if w != 0.0 {
                if !dipole_layout {
                    return Err(Error::InvalidArgument(format!(
                        "adaptive sampling gradients need a dipole model over the \
                         {j} particles, got {} kernel sites",
                        model.sites().len()
                    )));
                }
                grads[m] += w * eval_rbf_particle_grad(model, b, m);
            }
        }
    }
    loss *= norm;
    for g in grads.iter_mut() {
        *g *= norm;
    }
    Ok((loss, grads))
}

/// Similarity transform that normalizes a particle neighborhood: translate
/// the particle to the origin, rotate its normal onto (1,0,0), and scale by
/// the reciprocal mean neighbor distance.
#[derive(Debug, Clone)]
pub struct SimilarityTransform {
    pub center: Point3<f64>,
    pub rotation: Rotation3<f64>,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn apply(&self, x: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * (x - self.center)))
    }
}

/// Minimal rotation taking unit `n` onto (1,0,0); the antipodal case breaks
/// the tie with a π turn about (0,0,1).
pub fn rotation_to_x(n: &Vector3<f64>) -> Rotation3<f64> {
    match Rotation3::rotation_between(n, &Vector3::x()) {
        Some(rot) => rot,
        None => Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI),
    }
}

/// Build the normalizing transform for a particle at `p` with unit normal
/// `n` and its neighbor points. Fails when the neighbors coincide with `p`
/// (zero mean distance leaves the scale undefined).
pub fn neighborhood_transform(
    p: &Point3<f64>,
    n: &Vector3<f64>,
    neighbors: &[Point3<f64>],
) -> Result<SimilarityTransform> {
    if neighbors.is_empty() {
        return Err(Error::InvalidArgument("empty neighborhood".into()));
    }
    let mean: f64 =
        neighbors.iter().map(|q| (p - q).norm()).sum::<f64>() / neighbors.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument(
            "neighborhood has zero mean spacing; cannot normalize scale".into(),
        ));
    }
    Ok(SimilarityTransform {
        center: *p,
        rotation: rotation_to_x(n),
        scale: 1.0 / mean,
    })
}

/// Number of neighbors each particle's correspondence neighborhood uses.
pub const NEIGHBORHOOD_SIZE: usize = 6;

/// The template shape's per-particle neighborhoods: for every particle index
/// j, the indices of its 6 nearest template particles plus the template's
/// normals. Rebuilt at the start of each epoch; other shapes reuse these
/// index lists so matching neighborhoods are compared across shapes.
#[derive(Debug, Clone)]
pub struct NeighborhoodTemplate {
    shape: usize,
    neighbors: Vec<[usize; NEIGHBORHOOD_SIZE]>,
    normals: Vec<Vector3<f64>>,
}

impl NeighborhoodTemplate {
    pub fn build(
        shape: usize,
        positions: &[Point3<f64>],
        normals: &[Vector3<f64>],
    ) -> Result<Self> {
        let j = positions.len();
        if j < NEIGHBORHOOD_SIZE + 1 {
            return Err(Error::InvalidArgument(format!(
                "need at least {} particles for {}-neighborhoods, got {j}",
                NEIGHBORHOOD_SIZE + 1,
                NEIGHBORHOOD_SIZE
            )));
        }
        if normals.len() != j {
            return Err(Error::InvalidArgument(format!(
                "{j} particles but {} normals",
                normals.len()
            )));
        }
        let mut lists = Vec::with_capacity(j);
        for (a, p) in positions.iter().enumerate() {
            let mut order: Vec<usize> = (0..j).filter(|&b| b != a).collect();
            order.sort_by(|&x, &y| {
                (positions[x] - p)
                    .norm()
                    .total_cmp(&(positions[y] - p).norm())
                    .then(x.cmp(&y))
            });
            let mut arr = [0usize; NEIGHBORHOOD_SIZE];
            arr.copy_from_slice(&order[..NEIGHBORHOOD_SIZE]);
            lists.push(arr);
        }
        Ok(NeighborhoodTemplate {
            shape,
            neighbors: lists,
            normals: normals.to_vec(),
        })
    }

    pub fn shape(&self) -> usize {
        self.shape
    }

    pub fn neighbors(&self) -> &[[usize; NEIGHBORHOOD_SIZE]] {
        &self.neighbors
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }
}

/// One particle neighborhood mapped through its normalizing transform, with
/// the pieces the gradients reuse.
struct NormalizedNeighborhood {
    /// Transformed neighbor points (before any residual twist).
    points: Vec<Vector3<f64>>,
    /// Combined rotation applied to offsets.
    rotation: Rotation3<f64>,
    scale: f64,
    /// Unit vectors (p_j − p_k)/‖p_j − p_k‖ per neighbor.
    units: Vec<Vector3<f64>>,
}

fn normalize_neighborhood(
    positions: &[Point3<f64>],
    j: usize,
    neighbor_ids: &[usize; NEIGHBORHOOD_SIZE],
    normal: &Vector3<f64>,
) -> Result<NormalizedNeighborhood> {
    let p = positions[j];
    let mut mean = 0.0;
    let mut units = Vec::with_capacity(NEIGHBORHOOD_SIZE);
    for &k in neighbor_ids {
        let d = p - positions[k];
        let len = d.norm();
        mean += len;
        units.push(if len > 0.0 { d / len } else { Vector3::zeros() });
    }
    mean /= NEIGHBORHOOD_SIZE as f64;
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument(
            "neighborhood has zero mean spacing; cannot normalize scale".into(),
        ));
    }
    let rotation = rotation_to_x(normal);
    let scale = 1.0 / mean;
    let points = neighbor_ids
        .iter()
        .map(|&k| scale * (rotation * (positions[k] - p)))
        .collect();
    Ok(NormalizedNeighborhood {
        points,
        rotation,
        scale,
        units,
    })
}

/// Minimize Σ √(c_n − 2ρ_n cos(θ + φ_n)) over the residual twist θ about the
/// x-axis: coarse scan of the period, then golden-section refinement.
fn best_twist(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    use std::f64::consts::TAU;
    // Residuals are formed as differences before squaring. The expanded
    // cosine form c − 2ρcos(θ+φ) cancels catastrophically near perfect
    // alignment, flattening the minimum into round-off noise and capping the
    // recoverable angle at ~1e-8 rad; the difference form stays exact there.
    let terms: Vec<[f64; 5]> = a
        .iter()
        .zip(b)
        .map(|(va, vb)| [va.x - vb.x, va.y, va.z, vb.y, vb.z])
        .collect();
    let f = |theta: f64| -> f64 {
        let (sin, cos) = theta.sin_cos();
        terms
            .iter()
            .map(|&[dx, ya, za, yb, zb]| {
                let dy = ya * cos - za * sin - yb;
                let dz = ya * sin + za * cos - zb;
                (dx * dx + dy * dy + dz * dz).sqrt()
            })
            .sum()
    };
    const GRID: usize = 128;
    let mut best = (0usize, f64::INFINITY);
    for g in 0..GRID {
        let v = f(TAU * g as f64 / GRID as f64);
        if v < best.1 {
            best = (g, v);
        }
    }
    let step = TAU / GRID as f64;
    let mut lo = TAU * best.0 as f64 / GRID as f64 - step;
    let mut hi = lo + 2.0 * step;
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > 1e-14 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Neighborhood-correspondence loss over the minibatch shapes against the
/// template, with analytic gradients aligned with `minibatch` order.
///
/// For every shape i and particle j, shape i's neighborhood (the template's
/// neighbor indices evaluated on shape i) and the template's neighborhood are
/// both normalized by their similarity transforms; the residual twist about
/// the normal axis — which the normalizing rotation cannot fix — is aligned
/// by minimizing the summed point distances, making matching neighborhoods
/// score zero under any rigid motion plus uniform scaling. Gradients hold the
/// optimal twist fixed (envelope rule), treat normals and neighbor sets as
/// constants, and flow into template particles only when the template is in
/// the minibatch.
pub fn correspondence_loss(
    system: &ParticleSystem,
    normals: &[Vec<Vector3<f64>>],
    minibatch: &[usize],
    template: &NeighborhoodTemplate,
) -> Result<(f64, Vec<Vec<Vector3<f64>>>)> {
    let t = template.shape();
    let t_positions = system.positions(t);
    let j_count = system.num_particles();
    if template.neighbors().len() != j_count {
        return Err(Error::ParticleCountMismatch {
            context: "correspondence template".into(),
            expected: j_count,
            got: template.neighbors().len(),
        });
    }

    // Template-side neighborhoods, shared by every minibatch shape.
    let t_side: Vec<NormalizedNeighborhood> = (0..j_count)
        .map(|j| {
            normalize_neighborhood(t_positions, j, &template.neighbors()[j], &template.normals()[j])
        })
        .collect::<Result<_>>()?;

    let template_slot = minibatch.iter().position(|&i| i == t);
    let q = NEIGHBORHOOD_SIZE as f64;

    struct ShapeTerm {
        loss: f64,
        grad: Vec<Vector3<f64>>,
        template_grad: Vec<Vector3<f64>>,
    }

    let terms: Vec<Result<ShapeTerm>> = minibatch
        .par_iter()
        .map(|&i| {
            let mut term = ShapeTerm {
                loss: 0.0,
                grad: vec![Vector3::zeros(); j_count],
                template_grad: vec![Vector3::zeros(); j_count],
            };
            if i == t {
                return Ok(term);
            }
            let positions = system.positions(i);
            for j in 0..j_count {
                let ids = &template.neighbors()[j];
                let own = normalize_neighborhood(positions, j, ids, &normals[i][j])?;
                let tpl = &t_side[j];
                let theta = best_twist(&own.points, &tpl.points);
                let twist = Rotation3::from_axis_angle(&Vector3::x_axis(), theta);
                let combined = twist * own.rotation;
                for (slot, &k) in ids.iter().enumerate() {
                    let a = twist * own.points[slot];
                    let b = tpl.points[slot];
                    let diff = a - b;
                    let len = diff.norm();
                    term.loss += len;
                    // Neighborhoods are normalized to mean distance 1, so a
                    // residual this small is numerical noise (e.g. the tiny
                    // nonzero twist the minimizer returns on an exact match)
                    // and its direction is meaningless; zero is a valid
                    // subgradient of the norm there, and the only one that
                    // keeps matched neighborhoods stationary.
                    if len <= 1e-9 {
                        continue;
                    }
                    let e = diff / len;
                    // Own side: rotation path and scale path.
                    let back = combined.inverse_transform_vector(&e);
                    term.grad[k] += own.scale * back;
                    term.grad[j] -= own.scale * back;
                    let along = e.dot(&a) * own.scale / q;
                    for (slot2, &k2) in ids.iter().enumerate() {
                        term.grad[j] -= along * own.units[slot2];
                        term.grad[k2] += along * own.units[slot2];
                    }
                    // Template side, mirrored signs.
                    let t_back = tpl.rotation.inverse_transform_vector(&e);
                    term.template_grad[k] -= tpl.scale * t_back;
                    term.template_grad[j] += tpl.scale * t_back;
                    let t_along = e.dot(&b) * tpl.scale / q;
                    for (slot2, &k2) in ids.iter().enumerate() {
                        term.template_grad[j] += t_along * tpl.units[slot2];
                        term.template_grad[k2] -= t_along * tpl.units[slot2];
                    }
                }
            }
            Ok(term)
        })
        .collect();

    let mut loss = 0.0;
    let mut grads = vec![vec![Vector3::zeros(); j_count]; minibatch.len()];
    let mut template_total = vec![Vector3::zeros(); j_count];
    for (slot, term) in terms.into_iter().enumerate() {
        let term = term?;
        loss += term.loss;
        grads[slot] = term.grad;
        for (acc, g) in template_total.iter_mut().zip(&term.template_grad) {
            *acc += *g;
        }
    }
    if let Some(slot) = template_slot {
        for (acc, g) in grads[slot].iter_mut().zip(&template_total) {
            *acc += *g;
        }
    }
    Ok((loss, grads))
}

/// Regularizer for the minibatch scatter: 1e-6 × mean diagonal, floored so
/// the log-determinant stays finite for zero-variance minibatches.
pub fn scatter_epsilon(trace: f64, dim: usize) -> f64 {
    (1e-6 * trace / dim as f64).max(1e-30)
}

/// Differential-entropy loss of the minibatch particle vectors: ½·log det of
/// the regularized scatter (1/(3JK))·Σ (P_k − μ)(P_k − μ)ᵀ + ε·I. The running
/// mean μ and ε are constants in the gradient; pass `epsilon = None` to use
/// [`scatter_epsilon`] of the current scatter.
pub fn eigenshape_loss(
    batch: &[DVector<f64>],
    mu: &DVector<f64>,
    epsilon: Option<f64>,
) -> Result<(f64, Vec<DVector<f64>>)> {
    let k_count = batch.len();
    if k_count < 2 {
        return Err(Error::CohortTooSmall {
            got: k_count,
            required: 2,
        });
    }
    let dim = mu.len();
    for (k, p) in batch.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::ParticleCountMismatch {
                context: format!("entropy minibatch entry {k}"),
                expected: dim,
                got: p.len(),
            });
        }
    }
    let norm = 1.0 / (dim as f64 * k_count as f64);
    let devs: Vec<DVector<f64>> = batch.iter().map(|p| p - mu).collect();
    let mut scatter = DMatrix::zeros(dim, dim);
    for d in &devs {
        scatter.ger(norm, d, d, 1.0);
    }
    let eps = epsilon.unwrap_or_else(|| scatter_epsilon(scatter.trace(), dim));
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scatter regularizer must be positive, got {eps}"
        )));
    }

    let eigen = nalgebra::SymmetricEigen::new(scatter);
    let mut loss = 0.0;
    let mut inv_vals = DVector::zeros(dim);
    for (i, &lam) in eigen.eigenvalues.iter().enumerate() {
        let lam = lam.max(0.0) + eps;
        loss += 0.5 * lam.ln();
        inv_vals[i] = 1.0 / lam;
    }
    let grads = devs
        .iter()
        .map(|d| {
            let in_basis = eigen.eigenvectors.tr_mul(d);
            &eigen.eigenvectors * in_basis.component_mul(&inv_vals) * norm
        })
        .collect();
    Ok((loss, grads))
}

/// Weights of the combined loss; `c` steers the sampling loss between pure
/// coverage (0) and reconstruction-error emphasis (1).
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub c: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.c) {
            return Err(Error::InvalidArgument(format!(
                "adaptivity weight must lie in [0, 1], got {}",
                self.c
            )));
        }
        Ok(())
    }
}

/// Per-shape inputs the combined loss needs besides particle positions.
pub struct ShapeLossInputs<'a> {
    pub model: &'a RbfModel,
    pub band: &'a NarrowBandSamples,
    pub normals: &'a [Vector3<f64>],
}

/// Weighted value of each active loss term; the components sum to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub sampling: f64,
    pub eigenshape: f64,
    pub correspondence: f64,
}

/// Weighted sum α·Σ sampling + β·eigenshape + γ·correspondence over one
/// minibatch, with per-shape gradients for every shape in the system (zero
/// outside the minibatch). Epoch 1 is the burn-in: only the sampling term is
/// active. A size-1 minibatch skips the eigenshape term (it needs ≥ 2
/// shapes for a scatter). The template may be omitted only while γ = 0
/// (e.g. when there are too few particles to form neighborhoods).
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    system: &ParticleSystem,
    inputs: &[ShapeLossInputs],
    template: Option<&NeighborhoodTemplate>,
    minibatch: &[usize],
    weights: &LossWeights,
    tau: f64,
    mu: &DVector<f64>,
    epsilon: Option<f64>,
    epoch: usize,
) -> Result<(LossBreakdown, Vec<Vec<Vector3<f64>>>)> {
    weights.validate()?;
    if inputs.len() != system.num_shapes() {
        return Err(Error::InvalidArgument(format!(
            "{} shapes but {} loss inputs",
            system.num_shapes(),
            inputs.len()
        )));
    }
    let j_count = system.num_particles();
    let mut breakdown = LossBreakdown::default();
    let mut grads = vec![vec![Vector3::zeros(); j_count]; system.num_shapes()];

    let sampling: Vec<Result<(f64, Vec<Vector3<f64>>)>> = minibatch
        .par_iter()
        .map(|&i| {
            sampling_loss(
                system.positions(i),
                inputs[i].model,
                inputs[i].band,
                weights.c,
                tau,
            )
        })
        .collect();
    for (&i, term) in minibatch.iter().zip(sampling) {
        let (l, g) = term?;
        breakdown.sampling += weights.alpha * l;
        for (acc, gi) in grads[i].iter_mut().zip(g) {
            *acc += weights.alpha * gi;
        }
    }

    if epoch > 1 {
        if minibatch.len() >= 2 && weights.beta > 0.0 {
            let batch: Vec<DVector<f64>> =
                minibatch.iter().map(|&i| system.flatten(i)).collect();
            let (l, g) = eigenshape_loss(&batch, mu, epsilon)?;
            breakdown.eigenshape = weights.beta * l;
            for (&i, gk) in minibatch.iter().zip(g) {
                for (m, acc) in grads[i].iter_mut().enumerate() {
                    *acc += weights.beta
                        * Vector3::new(gk[3 * m], gk[3 * m + 1], gk[3 * m + 2]);
                }
            }
        }
        if weights.gamma > 0.0 {
            let template = template.ok_or_else(|| {
                Error::InvalidArgument(
                    "the neighborhood loss is weighted but no template was supplied".into(),
                )
            })?;
            let all_normals: Vec<Vec<Vector3<f64>>> = (0..system.num_shapes())
                .map(|i| inputs[i].normals.to_vec())
                .collect();
            let (l, g) = correspondence_loss(system, &all_normals, minibatch, template)?;
            breakdown.correspondence = weights.gamma * l;
            for (&i, gi) in minibatch.iter().zip(g) {
                for (acc, gm) in grads[i].iter_mut().zip(gi) {
                    *acc += weights.gamma * gm;
                }
            }
        }
    }

    breakdown.total = breakdown.sampling + breakdown.eigenshape + breakdown.correspondence;
    Ok((breakdown, grads))
}
