//! Two-stage minibatched gradient descent over the combined loss.
//!
//! Each epoch refreshes the per-shape implicit-surface models, narrow-band
//! samples, particle normals, the template shape's neighborhoods, and the
//! softmin temperature, then walks shuffled minibatches of shapes with plain
//! gradient steps. Every iteration ends with a surface snap of the shapes
//! that moved. Stage 1 keeps adaptivity off and periodically runs the
//! geodesic-neighborhood repair pass, stopping once the mismatch count is
//! within tolerance; stage 2 turns adaptivity on, drops the repair pass, and
//! stops early when particles effectively stop moving.
//!
//! Determinism: band sampling and minibatch shuffling derive their streams
//! from the one config seed, and gradient reductions happen in a fixed
//! order, so a run is reproducible bit for bit with any thread count.

use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{
    median_nearest_spacing, sample_narrow_band, total_loss, LossBreakdown, LossWeights,
    NarrowBandSamples, NeighborhoodTemplate, ShapeLossInputs, NEIGHBORHOOD_SIZE,
};
use crate::rbf::{Kernel, RbfModel};
use crate::regularizer::{converged, mismatch_report, regularize, NEIGHBOR_FACTOR};
use crate::shape::{Cohort, ParticleSystem, ShapeSample, DEGENERATE_GRADIENT};

/// Snapped particles must satisfy |D(p)| ≤ this fraction of the volume's
/// grid spacing.
pub const SNAP_TOLERANCE_FACTOR: f64 = 0.25;

/// Exponential decay of the running mean that centers the eigenshape loss.
pub const RUNNING_MEAN_DECAY: f64 = 0.9;

/// Gradient steps are clipped to this multiple of a shape's median particle
/// spacing so one step cannot jump out of the narrow band.
pub const STEP_CLIP_SPACINGS: f64 = 2.0;

/// Hyperparameters for both optimization stages.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationConfig {
    /// Plain gradient-descent step size.
    pub learning_rate: f64,
    /// Sampling-loss weight during stage 1 / stage 2.
    pub alpha_stage1: f64,
    pub alpha_stage2: f64,
    /// Eigenshape-loss weight.
    pub beta: f64,
    /// Neighborhood-correspondence-loss weight.
    pub gamma: f64,
    /// Stage-2 adaptivity in (0, 1].
    pub c_stage2: f64,
    /// Stage 1 runs the neighborhood repair pass every this many epochs.
    pub regularizer_interval: usize,
    /// Stage-1 epoch cap when the mismatch tolerance is never met.
    pub stage1_max_epochs: usize,
    /// Fixed stage-2 epoch count (barring the movement early stop).
    pub stage2_epochs: usize,
    /// Shapes per gradient step; 0 picks min(cohort size, 8).
    pub minibatch: usize,
    /// Narrow-band sample count per shape, as a multiple of the particle
    /// count.
    pub band_samples_per_particle: usize,
    /// Narrow-band half-width per shape, as a multiple of the volume's grid
    /// spacing; also the dipole offset of the implicit-surface models.
    pub band_offset_spacings: f64,
    /// Neighborhood size of the correspondence loss (fixed at 6).
    pub neighborhood_size: usize,
    /// Stage 1 converges when every shape has at most this many particles
    /// with missing reference neighbors.
    pub mismatch_tolerance: usize,
    /// Stage 2 stops early when no particle moved farther than this in an
    /// epoch.
    pub movement_tolerance: f64,
    /// Radial kernel of the implicit-surface models.
    pub kernel: Kernel,
    /// Master seed for band resampling and minibatch shuffling.
    pub seed: u64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        OptimizationConfig {
            learning_rate: 1.0,
            alpha_stage1: 10.0,
            alpha_stage2: 5.0,
            beta: 0.01,
            gamma: 0.01,
            c_stage2: 0.5,
            regularizer_interval: 25,
            stage1_max_epochs: 500,
            stage2_epochs: 200,
            minibatch: 0,
            band_samples_per_particle: 4,
            band_offset_spacings: 2.0,
            neighborhood_size: NEIGHBORHOOD_SIZE,
            mismatch_tolerance: 0,
            movement_tolerance: 1e-4,
            kernel: Kernel::Triharmonic,
            seed: 0,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("learning_rate", self.learning_rate)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("alpha_stage1", self.alpha_stage1),
            ("alpha_stage2", self.alpha_stage2),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("movement_tolerance", self.movement_tolerance),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        if !(self.c_stage2 > 0.0 && self.c_stage2 <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "stage-2 adaptivity must lie in (0, 1], got {}",
                self.c_stage2
            )));
        }
        if self.regularizer_interval == 0 || self.stage1_max_epochs == 0 || self.stage2_epochs == 0
        {
            return Err(Error::InvalidArgument(
                "epoch counts and the repair interval must be at least 1".into(),
            ));
        }
        if self.minibatch == 1 {
            return Err(Error::InvalidArgument(
                "minibatch size must be 0 (auto) or at least 2".into(),
            ));
        }
        if self.band_samples_per_particle == 0 {
            return Err(Error::InvalidArgument(
                "need at least one band sample per particle".into(),
            ));
        }
        if !(self.band_offset_spacings > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "band half-width multiple must be positive, got {}",
                self.band_offset_spacings
            )));
        }
        if self.neighborhood_size != NEIGHBORHOOD_SIZE {
            return Err(Error::InvalidArgument(format!(
                "neighborhood size is fixed at {NEIGHBORHOOD_SIZE}, got {}",
                self.neighborhood_size
            )));
        }
        Ok(())
    }

    fn resolve_minibatch(&self, shapes: usize) -> usize {
        if self.minibatch == 0 {
            shapes.min(8)
        } else {
            self.minibatch.min(shapes)
        }
    }
}

/// One CSV-ready progress row: per-epoch mean loss values over the epoch's
/// iterations, the largest particle displacement of any iteration, and the
/// latest known mismatched-particle count (stage 1 refreshes it at repair
/// checkpoints; elsewhere the last value is carried forward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub total: f64,
    pub sampling: f64,
    pub eigenshape: f64,
    pub correspondence: f64,
    pub max_movement: f64,
    pub mismatched_particles: Option<usize>,
    /// Largest |signed distance| / grid spacing over every particle of every
    /// shape stepped this epoch, measured right after its projection back to
    /// the surface. Stays at most `SNAP_TOLERANCE_FACTOR` by construction.
    pub worst_snap_ratio: f64,
}

/// Result of one optimization stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub system: ParticleSystem,
    pub records: Vec<EpochRecord>,
    /// Stage 1: the mismatch tolerance was met at a repair checkpoint.
    /// Stage 2: particle movement fell below the movement tolerance early.
    pub converged: bool,
    pub epochs_run: usize,
    /// Particles that needed the nearest-vertex snap fallback.
    pub snap_fallbacks: usize,
}

/// Project every particle back onto its shape's surface: Newton steps along
/// the distance gradient until |D| is negligible, falling back to the
/// nearest mesh vertex where the gradient degenerates (near the medial
/// axis) or the steps stall above tolerance. Returns the snapped system and
/// how many particles needed the fallback.
pub fn snap_to_surface(system: &ParticleSystem, cohort: &Cohort) -> Result<(ParticleSystem, usize)> {
    if system.num_shapes() != cohort.len() {
        return Err(Error::InvalidArgument(format!(
            "particle system covers {} shapes but the cohort has {}",
            system.num_shapes(),
            cohort.len()
        )));
    }
    let mut out = system.clone();
    let mut fallbacks = 0usize;
    for i in 0..cohort.len() {
        fallbacks += snap_shape(out.positions_mut(i), cohort.sample(i));
    }
    Ok((out, fallbacks))
}

fn snap_shape(positions: &mut [Point3<f64>], sample: &ShapeSample) -> usize {
    positions
        .iter_mut()
        .map(|p| {
            let (q, fell_back) = snap_point(sample, p);
            *p = q;
            usize::from(fell_back)
        })
        .sum()
}

fn snap_point(sample: &ShapeSample, p: &Point3<f64>) -> (Point3<f64>, bool) {
    let spacing = sample.sdf.max_spacing();
    let tol = SNAP_TOLERANCE_FACTOR * spacing;
    let negligible = 1e-12 * spacing;
    let mut q = *p;
    let mut d = sample.sdf.sample(&q);
    for _ in 0..8 {
        if d.abs() <= negligible {
            break;
        }
        let g = sample.sdf.gradient(&q);
        let n = g.norm();
        if n < DEGENERATE_GRADIENT {
            return (vertex_fallback(sample, &q), true);
        }
        let next = q - g * (d / n);
        let next_d = sample.sdf.sample(&next);
        if next_d.abs() >= d.abs() {
            break;
        }
        q = next;
        d = next_d;
    }
    if d.abs() > tol {
        return (vertex_fallback(sample, &q), true);
    }
    (q, false)
}

fn vertex_fallback(sample: &ShapeSample, p: &Point3<f64>) -> Point3<f64> {
    let (v, _) = sample.mesh.nearest_vertex(p);
    sample.mesh.vertices()[v]
}

/// Stage 1: correspondence-building descent with adaptivity off and the
/// neighborhood repair pass every `regularizer_interval` epochs; stops when
/// the mismatch tolerance is met at a checkpoint or at the epoch cap.
pub fn run_stage1(
    cohort: &Cohort,
    system: &ParticleSystem,
    reference: usize,
    config: &OptimizationConfig,
) -> Result<StageOutcome> {
    let weights = LossWeights {
        alpha: config.alpha_stage1,
        beta: config.beta,
        gamma: config.gamma,
        c: 0.0,
    };
    run_stage(cohort, system, reference, config, StageParams {
        stage: 1,
        weights,
        max_epochs: config.stage1_max_epochs,
        repair_interval: Some(config.regularizer_interval),
        movement_stop: None,
    })
}

/// Stage 2: adaptivity on (`c_stage2`), no repair pass, fixed epoch count
/// with an early stop once the largest per-epoch particle movement drops
/// below the movement tolerance.
pub fn run_stage2(
    cohort: &Cohort,
    system: &ParticleSystem,
    reference: usize,
    config: &OptimizationConfig,
) -> Result<StageOutcome> {
    let weights = LossWeights {
        alpha: config.alpha_stage2,
        beta: config.beta,
        gamma: config.gamma,
        c: config.c_stage2,
    };
    run_stage(cohort, system, reference, config, StageParams {
        stage: 2,
        weights,
        max_epochs: config.stage2_epochs,
        repair_interval: None,
        movement_stop: Some(config.movement_tolerance),
    })
}

struct StageParams {
    stage: usize,
    weights: LossWeights,
    max_epochs: usize,
    repair_interval: Option<usize>,
    movement_stop: Option<f64>,
}

struct EpochData {
    models: Vec<RbfModel>,
    bands: Vec<NarrowBandSamples>,
    normals: Vec<Vec<Vector3<f64>>>,
    template: Option<NeighborhoodTemplate>,
    tau: f64,
    step_clips: Vec<f64>,
}

fn run_stage(
    cohort: &Cohort,
    start: &ParticleSystem,
    reference: usize,
    config: &OptimizationConfig,
    params: StageParams,
) -> Result<StageOutcome> {
    config.validate()?;
    if start.num_shapes() != cohort.len() {
        return Err(Error::InvalidArgument(format!(
            "particle system covers {} shapes but the cohort has {}",
            start.num_shapes(),
            cohort.len()
        )));
    }
    if reference >= cohort.len() {
        return Err(Error::InvalidArgument(format!(
            "reference index {reference} out of range for {} shapes",
            cohort.len()
        )));
    }

    let shapes = cohort.len();
    let k = config.resolve_minibatch(shapes);
    let mut system = start.clone();
    let mut mu = system.mean_flat();
    let mut records = Vec::new();
    let mut snap_fallbacks = 0usize;
    let mut mismatched: Option<usize> = None;
    let mut stage_converged = false;
    let mut epochs_run = 0usize;

    for epoch in 1..=params.max_epochs {
        epochs_run = epoch;
        let data = refresh_epoch(cohort, &system, reference, config, &params, epoch)?;

        let mut order: Vec<usize> = (0..shapes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            params.stage as u64,
            epoch as u64,
            u64::MAX,
        ));
        order.shuffle(&mut rng);

        let mut epoch_max_move = 0.0f64;
        let mut epoch_worst_snap = 0.0f64;
        let mut loss_sum = LossBreakdown::default();
        let mut iterations = 0usize;
        for chunk in order.chunks(k) {
            let inputs: Vec<ShapeLossInputs> = (0..shapes)
                .map(|i| ShapeLossInputs {
                    model: &data.models[i],
                    band: &data.bands[i],
                    normals: &data.normals[i],
                })
                .collect();
            let (breakdown, grads) = total_loss(
                &system,
                &inputs,
                data.template.as_ref(),
                chunk,
                &params.weights,
                data.tau,
                &mu,
                None,
                epoch,
            )?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite {
                    what: "total loss".into(),
                    context: format!(
                        "stage {} epoch {epoch} shapes {:?}",
                        params.stage, chunk
                    ),
                });
            }
            loss_sum.total += breakdown.total;
            loss_sum.sampling += breakdown.sampling;
            loss_sum.eigenshape += breakdown.eigenshape;
            loss_sum.correspondence += breakdown.correspondence;
            iterations += 1;

            for &i in chunk {
                let before: Vec<Point3<f64>> = system.positions(i).to_vec();
                {
                    let pos = system.positions_mut(i);
                    for (m, p) in pos.iter_mut().enumerate() {
                        let mut step = grads[i][m] * (-config.learning_rate);
                        let len = step.norm();
                        if len > data.step_clips[i] {
                            step *= data.step_clips[i] / len;
                        }
                        *p += step;
                    }
                    snap_fallbacks += snap_shape(pos, cohort.sample(i));
                }
                let spacing = cohort.sample(i).sdf.max_spacing();
                for (old, new) in before.iter().zip(system.positions(i)) {
                    epoch_max_move = epoch_max_move.max((new - old).norm());
                    let residual = cohort.sample(i).sdf.sample(new).abs();
                    epoch_worst_snap = epoch_worst_snap.max(residual / spacing);
                }
            }
        }

        let mean = 1.0 / iterations.max(1) as f64;
        let mut record = EpochRecord {
            stage: params.stage,
            epoch,
            total: loss_sum.total * mean,
            sampling: loss_sum.sampling * mean,
            eigenshape: loss_sum.eigenshape * mean,
            correspondence: loss_sum.correspondence * mean,
            max_movement: epoch_max_move,
            mismatched_particles: mismatched,
            worst_snap_ratio: epoch_worst_snap,
        };

        if let Some(interval) = params.repair_interval {
            if epoch % interval == 0 {
                system = regularize(&system, cohort, reference)?;
                let report = mismatch_report(&system, cohort, reference, NEIGHBOR_FACTOR)?;
                mismatched = Some(report.total_mismatched_particles());
                record.mismatched_particles = mismatched;
                if converged(&report, config.mismatch_tolerance) {
                    stage_converged = true;
                }
            }
        }

        mu = mu * RUNNING_MEAN_DECAY + system.mean_flat() * (1.0 - RUNNING_MEAN_DECAY);
        records.push(record);

        if stage_converged {
            break;
        }
        if let Some(tol) = params.movement_stop {
            if epoch_max_move < tol {
                stage_converged = true;
                break;
            }
        }
    }

    Ok(StageOutcome {
        system,
        records,
        converged: stage_converged,
        epochs_run,
        snap_fallbacks,
    })
}

fn refresh_epoch(
    cohort: &Cohort,
    system: &ParticleSystem,
    reference: usize,
    config: &OptimizationConfig,
    params: &StageParams,
    epoch: usize,
) -> Result<EpochData> {
    let shapes = cohort.len();
    let j = system.num_particles();
    let band_count = config.band_samples_per_particle * j;

    struct PerShape {
        model: RbfModel,
        band: NarrowBandSamples,
        normals: Vec<Vector3<f64>>,
        step_clip: f64,
    }
    let per_shape: Vec<PerShape> = (0..shapes)
        .into_par_iter()
        .map(|i| -> Result<PerShape> {
            let sample = cohort.sample(i);
            let positions = system.positions(i);
            let normals: Vec<Vector3<f64>> =
                positions.iter().map(|p| sample.normal_at(p)).collect();
            let s = config.band_offset_spacings * sample.sdf.max_spacing();
            let model = RbfModel::fit(positions, &normals, s, config.kernel)?;
            // One band seed for the whole epoch (not per shape): a cohort of
            // identical shapes then sees identical samples and stays a
            // symmetric fixed point instead of drifting apart; distinct
            // shapes still get distinct samples from their own geometry.
            let band = sample_narrow_band(
                &sample.sdf,
                band_count,
                s,
                derive_seed(config.seed, params.stage as u64, epoch as u64, 0),
            )?;
            let step_clip = STEP_CLIP_SPACINGS * median_nearest_spacing(positions)?;
            Ok(PerShape {
                model,
                band,
                normals,
                step_clip,
            })
        })
        .collect::<Result<_>>()?;

    let mut models = Vec::with_capacity(shapes);
    let mut bands = Vec::with_capacity(shapes);
    let mut normals = Vec::with_capacity(shapes);
    let mut step_clips = Vec::with_capacity(shapes);
    for ps in per_shape {
        models.push(ps.model);
        bands.push(ps.band);
        normals.push(ps.normals);
        step_clips.push(ps.step_clip);
    }

    let template = if params.weights.gamma > 0.0 {
        Some(NeighborhoodTemplate::build(
            reference,
            system.positions(reference),
            &normals[reference],
        )?)
    } else {
        None
    };
    let tau = median_nearest_spacing(system.positions(reference))?;

    Ok(EpochData {
        models,
        bands,
        normals,
        template,
        tau,
        step_clips,
    })
}

/// SplitMix-style mixer giving every (seed, stage, epoch, shape) tuple its
/// own reproducible RNG stream.
fn derive_seed(base: u64, stage: u64, epoch: u64, shape: u64) -> u64 {
    let mut x = base
        ^ stage.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ epoch.wrapping_mul(0xE703_7ED1_A0B4_28DB)
        ^ shape.wrapping_mul(0x8EBC_6AF0_9C88_C6E3);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
