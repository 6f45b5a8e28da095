//! Shared plumbing between subcommands: building the in-memory cohort from a
//! config, remembering which shape is the reference, and reloading particle
//! files in cohort order.

use std::fs;
use std::path::{Path, PathBuf};

use apsm_core::io;
use apsm_core::sdf::{voxelize_sdf, SignedDistanceVolume, DEFAULT_VOXEL_BUDGET};
use apsm_core::shape::{Cohort, ParticleSystem, ShapeSample};
use rayon::prelude::*;

use crate::config::LoadedConfig;
use crate::errors::{CliError, CliResult, Ctx};

/// Load every shape (mesh plus volume, voxelizing where no volume file is
/// given) and assemble the cohort. Shape order follows the config.
pub fn load_cohort(loaded: &LoadedConfig) -> CliResult<Cohort> {
    let samples: Vec<ShapeSample> = (0..loaded.config.shapes.len())
        .into_par_iter()
        .map(|i| load_shape(loaded, i))
        .collect::<CliResult<_>>()?;
    Cohort::new(samples).ctx(|| "building cohort".into())
}

fn load_shape(loaded: &LoadedConfig, i: usize) -> CliResult<ShapeSample> {
    let id = loaded.shape_id(i)?;
    let mesh_path = loaded.mesh_path(i);
    let mesh =
        io::load_mesh(&mesh_path).ctx(|| format!("shape '{id}': loading {}", mesh_path.display()))?;
    let sdf: SignedDistanceVolume = match loaded.sdf_path(i) {
        Some(path) => io::load_sdf_volume(&path)
            .ctx(|| format!("shape '{id}': loading {}", path.display()))?,
        None => {
            let vox = &loaded.config.voxelization;
            let spacing = vox.spacing_fraction * mesh.bbox_diagonal();
            let padding = vox.padding_spacings * spacing;
            voxelize_sdf(&mesh, spacing, padding, DEFAULT_VOXEL_BUDGET)
                .ctx(|| format!("shape '{id}': voxelizing {}", mesh_path.display()))?
        }
    };
    ShapeSample::new(id.clone(), mesh, sdf).ctx(|| format!("shape '{id}'"))
}

/// Where the optimize/init commands record the reference shape id.
pub fn reference_file(output_dir: &Path) -> PathBuf {
    output_dir.join("reference.txt")
}

pub fn write_reference(output_dir: &Path, id: &str) -> CliResult<()> {
    let path = reference_file(output_dir);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(&path, format!("{id}\n")).map_err(|e| CliError::io(&path, e))
}

fn index_of_id(cohort: &Cohort, id: &str) -> CliResult<usize> {
    cohort
        .samples()
        .iter()
        .position(|s| s.id == id)
        .ok_or_else(|| CliError::msg(format!("no shape with id '{id}' in the cohort")))
}

/// Pick the reference shape for commands that consume particle files:
/// an explicit `--reference` id wins; otherwise the id recorded by a
/// previous `optimize`/`init` run; otherwise medoid selection from scratch.
pub fn resolve_reference(
    loaded: &LoadedConfig,
    cohort: &Cohort,
    flag: Option<&str>,
) -> CliResult<usize> {
    if let Some(id) = flag {
        return index_of_id(cohort, id);
    }
    let path = reference_file(&loaded.output_dir());
    if path.is_file() {
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let id = text.trim();
        if id.is_empty() {
            return Err(CliError::msg(format!("{} is empty", path.display())));
        }
        return index_of_id(cohort, id);
    }
    let selection =
        apsm_core::init::select_reference(cohort).ctx(|| "selecting reference shape".into())?;
    for w in &selection.warnings {
        log::warn!("{w}");
    }
    Ok(selection.reference)
}

/// Load a particle directory and reorder it to cohort order, requiring a
/// one-to-one match between particle files and shape ids.
pub fn load_particles_for(cohort: &Cohort, dir: &Path) -> CliResult<ParticleSystem> {
    let on_disk = io::load_particles(dir).ctx(|| format!("loading particles from {}", dir.display()))?;
    let mut remaining: Vec<Option<usize>> = vec![None; cohort.len()];
    for (k, id) in on_disk.shape_ids().iter().enumerate() {
        match cohort.samples().iter().position(|s| &s.id == id) {
            Some(i) if remaining[i].is_none() => remaining[i] = Some(k),
            Some(_) => {
                return Err(CliError::msg(format!(
                    "duplicate particle file for shape '{id}' in {}",
                    dir.display()
                )))
            }
            None => {
                return Err(CliError::msg(format!(
                    "particle file '{id}' in {} matches no shape in the config",
                    dir.display()
                )))
            }
        }
    }
    let mut ids = Vec::with_capacity(cohort.len());
    let mut positions = Vec::with_capacity(cohort.len());
    for (i, slot) in remaining.iter().enumerate() {
        let id = &cohort.sample(i).id;
        let k = slot.ok_or_else(|| {
            CliError::msg(format!(
                "no particle file for shape '{id}' in {}",
                dir.display()
            ))
        })?;
        ids.push(id.clone());
        positions.push(on_disk.positions(k).to_vec());
    }
    ParticleSystem::new(ids, positions).ctx(|| format!("particles in {}", dir.display()))
}
