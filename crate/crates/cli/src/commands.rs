//! The six subcommands. Each returns the process exit code on success;
//! hard failures propagate as `CliError`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use apsm_core::init::initialize;
use apsm_core::io;
use apsm_core::metrics::{
    compactness, fit_pca, generalization, specificity, surface_to_surface, warp_mesh,
    SpecificitySampling,
};
use apsm_core::optimizer::{run_stage1, run_stage2, StageOutcome};
use apsm_core::regularizer::{converged, mismatch_report, NEIGHBOR_FACTOR};
use apsm_core::synthetic::{self, Family};

use crate::config::{self, CohortConfig, ShapeEntry};
use crate::errors::{CliError, CliResult, Ctx};
use crate::pipeline::{load_cohort, load_particles_for, resolve_reference, write_reference};
use crate::report::{curve_csv, line_plot_svg, progress_csv, write_text};

/// Particle count preseeded into the config that `generate-synthetic` writes.
const GENERATED_PARTICLE_COUNT: usize = 64;

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn generate_synthetic(
    family: &str,
    count: usize,
    seed: u64,
    subdivisions: usize,
    out_dir: &Path,
) -> CliResult<u8> {
    let family: Family = family.parse().ctx(|| "parsing family".into())?;
    let shapes = synthetic::generate(family, count, subdivisions, seed)
        .ctx(|| format!("generating {count} {} shapes", family.name()))?;

    let mut entries = Vec::with_capacity(shapes.len());
    let mut param_keys = BTreeSet::new();
    for shape in &shapes {
        param_keys.extend(shape.params.keys().cloned());
    }
    let mut manifest = String::from("id,family");
    for key in &param_keys {
        let _ = write!(manifest, ",{key}");
    }
    manifest.push('\n');

    ensure_dir(&out_dir.join("meshes"))?;
    for shape in &shapes {
        let mesh_rel = format!("meshes/{}.obj", shape.id);
        io::save_mesh(&out_dir.join(&mesh_rel), &shape.mesh)
            .ctx(|| format!("writing mesh for '{}'", shape.id))?;
        let mut mask = String::new();
        for v in &shape.feature_mask {
            let _ = writeln!(mask, "{v}");
        }
        write_text(&out_dir.join(format!("masks/{}.txt", shape.id)), &mask)?;
        let _ = write!(manifest, "{},{}", shape.id, family.name());
        for key in &param_keys {
            match shape.params.get(key) {
                Some(v) => {
                    let _ = write!(manifest, ",{v}");
                }
                None => manifest.push(','),
            }
        }
        manifest.push('\n');
        entries.push(ShapeEntry {
            id: None,
            mesh: PathBuf::from(mesh_rel),
            sdf: None,
        });
    }
    write_text(&out_dir.join("manifest.csv"), &manifest)?;

    let cohort = CohortConfig::with_defaults(entries, GENERATED_PARTICLE_COUNT, seed);
    write_text(&out_dir.join("cohort.toml"), &cohort.to_toml_string()?)?;

    log::info!(
        "wrote {} {} meshes, masks, manifest.csv, and cohort.toml to {}",
        shapes.len(),
        family.name(),
        out_dir.display()
    );
    Ok(0)
}

pub fn init(config_path: &Path) -> CliResult<u8> {
    let loaded = config::load_config(config_path)?;
    let cohort = load_cohort(&loaded)?;
    let outcome = initialize(&cohort, loaded.config.particle_count)
        .ctx(|| "initialization".into())?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    let out_dir = loaded.output_dir();
    write_reference(&out_dir, &cohort.sample(outcome.reference).id)?;
    io::save_particles(&outcome.system, &out_dir.join("particles_init"))
        .ctx(|| "saving initial particles".into())?;
    log::info!(
        "initialized {} particles on {} shapes (reference '{}'); artifacts in {}",
        loaded.config.particle_count,
        cohort.len(),
        cohort.sample(outcome.reference).id,
        out_dir.display()
    );
    Ok(0)
}

pub fn optimize(config_path: &Path) -> CliResult<u8> {
    let start = Instant::now();
    let loaded = config::load_config(config_path)?;
    let cohort = load_cohort(&loaded)?;
    let core_cfg = loaded.core_config();
    let out_dir = loaded.output_dir();

    let outcome = initialize(&cohort, loaded.config.particle_count)
        .ctx(|| "initialization".into())?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    let reference = outcome.reference;
    write_reference(&out_dir, &cohort.sample(reference).id)?;
    io::save_particles(&outcome.system, &out_dir.join("particles_init"))
        .ctx(|| "saving initial particles".into())?;
    log::info!(
        "initialized (reference '{}'); starting stage 1",
        cohort.sample(reference).id
    );

    let stage1 = run_stage1(&cohort, &outcome.system, reference, &core_cfg)
        .ctx(|| "stage 1".into())?;
    io::save_particles(&stage1.system, &out_dir.join("particles_stage1"))
        .ctx(|| "saving stage-1 particles".into())?;
    log_stage(&stage1, 1, "mismatch tolerance met");

    let stage2 = run_stage2(&cohort, &stage1.system, reference, &core_cfg)
        .ctx(|| "stage 2".into())?;
    io::save_particles(&stage2.system, &out_dir.join("particles_final"))
        .ctx(|| "saving final particles".into())?;
    log_stage(&stage2, 2, "movement below tolerance");

    let mut records = stage1.records;
    records.extend(stage2.records);
    write_text(&out_dir.join("progress.csv"), &progress_csv(&records))?;

    let report = mismatch_report(&stage2.system, &cohort, reference, NEIGHBOR_FACTOR)
        .ctx(|| "final mismatch report".into())?;
    log::info!(
        "finished in {:.1}s; final mismatched particles: {}; artifacts in {}",
        start.elapsed().as_secs_f64(),
        report.total_mismatched_particles(),
        out_dir.display()
    );
    Ok(0)
}

fn log_stage(outcome: &StageOutcome, stage: usize, stop_reason: &str) {
    if outcome.converged {
        log::info!(
            "stage {stage}: {stop_reason} after {} epochs ({} snap fallbacks)",
            outcome.epochs_run,
            outcome.snap_fallbacks
        );
    } else {
        log::warn!(
            "stage {stage}: ran all {} epochs without early convergence ({} snap fallbacks)",
            outcome.epochs_run,
            outcome.snap_fallbacks
        );
    }
}

pub struct EvaluateArgs {
    pub config: PathBuf,
    pub particles: Option<PathBuf>,
    pub reference: Option<String>,
    pub modes: Option<usize>,
    pub specificity_samples: usize,
    pub sampling: SpecificitySampling,
    pub out_dir: Option<PathBuf>,
    pub plots: bool,
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<u8> {
    let loaded = config::load_config(&args.config)?;
    let cohort = load_cohort(&loaded)?;
    let particles_dir = args
        .particles
        .clone()
        .unwrap_or_else(|| loaded.output_dir().join("particles_final"));
    let system = load_particles_for(&cohort, &particles_dir)?;
    let reference = resolve_reference(&loaded, &cohort, args.reference.as_deref())?;
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| loaded.output_dir().join("evaluation"));
    let seed = loaded.config.seed;

    let model = fit_pca(&system).ctx(|| "fitting the linear shape model".into())?;
    let compact = compactness(&model).ctx(|| "compactness".into())?;
    let compact_pts: Vec<(f64, f64)> = compact
        .iter()
        .enumerate()
        .map(|(m, &v)| ((m + 1) as f64, v))
        .collect();
    write_text(
        &out_dir.join("compactness.csv"),
        &curve_csv("modes", "cumulative_variance_fraction", &compact_pts),
    )?;

    let general: Vec<f64> = if cohort.len() >= 3 {
        generalization(&system).ctx(|| "generalization".into())?
    } else {
        log::warn!("generalization needs at least 3 shapes; skipping");
        Vec::new()
    };
    let general_pts: Vec<(f64, f64)> = general
        .iter()
        .enumerate()
        .map(|(m, &v)| (m as f64, v))
        .collect();
    write_text(
        &out_dir.join("generalization.csv"),
        &curve_csv("modes", "mean_reconstruction_error", &general_pts),
    )?;

    let mode_cap = args
        .modes
        .unwrap_or_else(|| model.num_modes())
        .min(model.num_modes());
    let mut specificity_pts = Vec::with_capacity(mode_cap);
    for m in 1..=mode_cap {
        let value = specificity(&model, &system, m, args.specificity_samples, args.sampling, seed)
            .ctx(|| format!("specificity with {m} modes"))?;
        specificity_pts.push((m as f64, value));
    }
    write_text(
        &out_dir.join("specificity.csv"),
        &curve_csv("modes", "specificity", &specificity_pts),
    )?;

    let ref_mesh = &cohort.sample(reference).mesh;
    let ref_particles = system.positions(reference);
    let mut s2s_csv = String::from("shape_id,mean_distance,max_distance\n");
    let mut s2s_rows = Vec::with_capacity(cohort.len());
    for i in 0..cohort.len() {
        let id = &cohort.sample(i).id;
        let warped = warp_mesh(ref_mesh, ref_particles, system.positions(i))
            .ctx(|| format!("warping the reference mesh onto '{id}'"))?;
        let d = surface_to_surface(&cohort.sample(i).mesh, &warped);
        let _ = writeln!(s2s_csv, "{},{},{}", id, d.mean(), d.max());
        s2s_rows.push((id.clone(), d.mean(), d.max()));
    }
    write_text(&out_dir.join("surface_to_surface.csv"), &s2s_csv)?;

    if args.plots {
        write_text(
            &out_dir.join("compactness.svg"),
            &line_plot_svg("Compactness", "modes", "cumulative variance fraction", &compact_pts),
        )?;
        write_text(
            &out_dir.join("generalization.svg"),
            &line_plot_svg("Generalization", "modes", "mean reconstruction error", &general_pts),
        )?;
        write_text(
            &out_dir.join("specificity.svg"),
            &line_plot_svg("Specificity", "modes", "specificity", &specificity_pts),
        )?;
    }

    let mut summary = String::new();
    let _ = writeln!(summary, "shapes: {}", cohort.len());
    let _ = writeln!(summary, "particles per shape: {}", system.num_particles());
    let _ = writeln!(summary, "reference: {}", cohort.sample(reference).id);
    let _ = writeln!(summary, "linear model modes: {}", model.num_modes());
    let _ = writeln!(summary, "\ncompactness (cumulative variance fraction):");
    for (m, v) in &compact_pts {
        let _ = writeln!(summary, "  {:>3} mode(s): {v:.6}", *m as usize);
    }
    let _ = writeln!(summary, "\ngeneralization (leave-one-out mean reconstruction error):");
    if general_pts.is_empty() {
        let _ = writeln!(summary, "  skipped: needs at least 3 shapes");
    }
    for (m, v) in &general_pts {
        let _ = writeln!(summary, "  {:>3} mode(s): {v:.6e}", *m as usize);
    }
    let _ = writeln!(
        summary,
        "\nspecificity ({}, {} samples, seed {seed}):",
        args.sampling.name(),
        args.specificity_samples
    );
    for (m, v) in &specificity_pts {
        let _ = writeln!(summary, "  {:>3} mode(s): {v:.6e}", *m as usize);
    }
    let _ = writeln!(summary, "\nsurface-to-surface reconstruction distance (mean / max):");
    let mut overall = 0.0;
    for (id, mean, max) in &s2s_rows {
        let _ = writeln!(summary, "  {id}: {mean:.6e} / {max:.6e}");
        overall += mean;
    }
    let _ = writeln!(
        summary,
        "overall mean reconstruction distance: {:.6e}",
        overall / s2s_rows.len() as f64
    );
    write_text(&out_dir.join("summary.txt"), &summary)?;

    log::info!(
        "evaluation of {} written to {}",
        particles_dir.display(),
        out_dir.display()
    );
    Ok(0)
}

pub fn check_correspondence(
    config_path: &Path,
    particles: Option<&Path>,
    tolerance: Option<usize>,
    reference: Option<&str>,
) -> CliResult<u8> {
    let loaded = config::load_config(config_path)?;
    let cohort = load_cohort(&loaded)?;
    let particles_dir = particles
        .map(Path::to_path_buf)
        .unwrap_or_else(|| loaded.output_dir().join("particles_final"));
    let system = load_particles_for(&cohort, &particles_dir)?;
    let reference = resolve_reference(&loaded, &cohort, reference)?;
    let tolerance = tolerance.unwrap_or(loaded.config.optimization.mismatch_tolerance);

    let report = mismatch_report(&system, &cohort, reference, NEIGHBOR_FACTOR)
        .ctx(|| "building the mismatch report".into())?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut csv = String::from("shape_id,particle,missing_neighbors\n");
    for i in 0..report.num_shapes() {
        let id = &cohort.sample(i).id;
        for (j, count) in report.particle_counts(i).iter().enumerate() {
            let _ = writeln!(csv, "{id},{j},{count}");
        }
    }
    out.write_all(csv.as_bytes())
        .map_err(|e| CliError::msg(format!("could not write to stdout: {e}")))?;

    let ok = converged(&report, tolerance);
    log::info!(
        "{} mismatched particles across {} shapes (worst shape {}, tolerance {}): {}",
        report.total_mismatched_particles(),
        report.num_shapes(),
        (0..report.num_shapes())
            .map(|i| report.mismatched_particles(i))
            .max()
            .unwrap_or(0),
        tolerance,
        if ok { "converged" } else { "not converged" }
    );
    Ok(if ok { 0 } else { 1 })
}

pub fn reconstruct(
    config_path: &Path,
    particles: Option<&Path>,
    reference: Option<&str>,
    out_dir: Option<&Path>,
) -> CliResult<u8> {
    let loaded = config::load_config(config_path)?;
    let cohort = load_cohort(&loaded)?;
    let particles_dir = particles
        .map(Path::to_path_buf)
        .unwrap_or_else(|| loaded.output_dir().join("particles_final"));
    let system = load_particles_for(&cohort, &particles_dir)?;
    let reference = resolve_reference(&loaded, &cohort, reference)?;
    let out_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| loaded.output_dir().join("reconstructed"));

    ensure_dir(&out_dir)?;
    let ref_mesh = &cohort.sample(reference).mesh;
    let ref_particles = system.positions(reference);
    for i in 0..cohort.len() {
        let id = &cohort.sample(i).id;
        let warped = warp_mesh(ref_mesh, ref_particles, system.positions(i))
            .ctx(|| format!("warping the reference mesh onto '{id}'"))?;
        io::save_mesh(&out_dir.join(format!("{id}.obj")), &warped)
            .ctx(|| format!("writing reconstruction for '{id}'"))?;
    }
    log::info!(
        "wrote {} reconstructed meshes to {} (reference '{}')",
        cohort.len(),
        out_dir.display(),
        cohort.sample(reference).id
    );
    Ok(0)
}
