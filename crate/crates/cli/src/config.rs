//! Cohort configuration: a single TOML file describing the input shapes,
//! the particle count, and every tunable of the optimization pipeline.
//!
//! Parsing fills in defaults for everything except the shape list and the
//! particle count, so a minimal config is just those two. Serializing a
//! parsed config writes every field back out explicitly, and parsing that
//! output reproduces the same value (round-trip identity).

use std::fs;
use std::path::{Path, PathBuf};

use apsm_core::optimizer::OptimizationConfig;
use apsm_core::rbf::Kernel;
use serde::{Deserialize, Serialize};

use crate::errors::{CliError, CliResult, Ctx};

/// One input shape: a closed surface mesh plus an optional precomputed
/// signed-distance volume. Shapes without a volume are voxelized at load
/// time using the `[voxelization]` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeEntry {
    /// Shape identifier; defaults to the mesh file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Mesh path (`.obj` or `.ply`), relative to the config file.
    pub mesh: PathBuf,
    /// Optional signed-distance volume path, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdf: Option<PathBuf>,
}

/// Mirror of the library's optimization settings (minus the seed, which
/// lives at the top level of the config). Every field has the library
/// default, so the `[optimization]` table may be partial or absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationSettings {
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_alpha_stage1")]
    pub alpha_stage1: f64,
    #[serde(default = "d_alpha_stage2")]
    pub alpha_stage2: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_c_stage2")]
    pub c_stage2: f64,
    #[serde(default = "d_regularizer_interval")]
    pub regularizer_interval: usize,
    #[serde(default = "d_stage1_max_epochs")]
    pub stage1_max_epochs: usize,
    #[serde(default = "d_stage2_epochs")]
    pub stage2_epochs: usize,
    #[serde(default = "d_minibatch")]
    pub minibatch: usize,
    #[serde(default = "d_band_samples_per_particle")]
    pub band_samples_per_particle: usize,
    #[serde(default = "d_band_offset_spacings")]
    pub band_offset_spacings: f64,
    #[serde(default = "d_neighborhood_size")]
    pub neighborhood_size: usize,
    #[serde(default = "d_mismatch_tolerance")]
    pub mismatch_tolerance: usize,
    #[serde(default = "d_movement_tolerance")]
    pub movement_tolerance: f64,
    #[serde(default = "d_kernel")]
    pub kernel: KernelChoice,
}

fn lib_defaults() -> OptimizationConfig {
    OptimizationConfig::default()
}

fn d_learning_rate() -> f64 {
    lib_defaults().learning_rate
}
fn d_alpha_stage1() -> f64 {
    lib_defaults().alpha_stage1
}
fn d_alpha_stage2() -> f64 {
    lib_defaults().alpha_stage2
}
fn d_beta() -> f64 {
    lib_defaults().beta
}
fn d_gamma() -> f64 {
    lib_defaults().gamma
}
fn d_c_stage2() -> f64 {
    lib_defaults().c_stage2
}
fn d_regularizer_interval() -> usize {
    lib_defaults().regularizer_interval
}
fn d_stage1_max_epochs() -> usize {
    lib_defaults().stage1_max_epochs
}
fn d_stage2_epochs() -> usize {
    lib_defaults().stage2_epochs
}
fn d_minibatch() -> usize {
    lib_defaults().minibatch
}
fn d_band_samples_per_particle() -> usize {
    lib_defaults().band_samples_per_particle
}
fn d_band_offset_spacings() -> f64 {
    lib_defaults().band_offset_spacings
}
fn d_neighborhood_size() -> usize {
    lib_defaults().neighborhood_size
}
fn d_mismatch_tolerance() -> usize {
    lib_defaults().mismatch_tolerance
}
fn d_movement_tolerance() -> f64 {
    lib_defaults().movement_tolerance
}
fn d_kernel() -> KernelChoice {
    KernelChoice::from_core(lib_defaults().kernel)
}

impl Default for OptimizationSettings {
    fn default() -> Self {
        OptimizationSettings {
            learning_rate: d_learning_rate(),
            alpha_stage1: d_alpha_stage1(),
            alpha_stage2: d_alpha_stage2(),
            beta: d_beta(),
            gamma: d_gamma(),
            c_stage2: d_c_stage2(),
            regularizer_interval: d_regularizer_interval(),
            stage1_max_epochs: d_stage1_max_epochs(),
            stage2_epochs: d_stage2_epochs(),
            minibatch: d_minibatch(),
            band_samples_per_particle: d_band_samples_per_particle(),
            band_offset_spacings: d_band_offset_spacings(),
            neighborhood_size: d_neighborhood_size(),
            mismatch_tolerance: d_mismatch_tolerance(),
            movement_tolerance: d_movement_tolerance(),
            kernel: d_kernel(),
        }
    }
}

impl OptimizationSettings {
    /// Assemble the library configuration, injecting the top-level seed.
    pub fn to_core(&self, seed: u64) -> OptimizationConfig {
        OptimizationConfig {
            learning_rate: self.learning_rate,
            alpha_stage1: self.alpha_stage1,
            alpha_stage2: self.alpha_stage2,
            beta: self.beta,
            gamma: self.gamma,
            c_stage2: self.c_stage2,
            regularizer_interval: self.regularizer_interval,
            stage1_max_epochs: self.stage1_max_epochs,
            stage2_epochs: self.stage2_epochs,
            minibatch: self.minibatch,
            band_samples_per_particle: self.band_samples_per_particle,
            band_offset_spacings: self.band_offset_spacings,
            neighborhood_size: self.neighborhood_size,
            mismatch_tolerance: self.mismatch_tolerance,
            movement_tolerance: self.movement_tolerance,
            kernel: self.kernel.to_core(),
            seed,
        }
    }
}

/// Radial kernel of the implicit-surface models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    Biharmonic,
    Triharmonic,
}

impl KernelChoice {
    pub fn to_core(self) -> Kernel {
        match self {
            KernelChoice::Biharmonic => Kernel::Biharmonic,
            KernelChoice::Triharmonic => Kernel::Triharmonic,
        }
    }

    pub fn from_core(k: Kernel) -> Self {
        match k {
            Kernel::Biharmonic => KernelChoice::Biharmonic,
            Kernel::Triharmonic => KernelChoice::Triharmonic,
        }
    }
}

/// Grid settings used when a shape entry has no precomputed volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelizationSettings {
    /// Node spacing as a fraction of the mesh bounding-box diagonal.
    #[serde(default = "d_spacing_fraction")]
    pub spacing_fraction: f64,
    /// Grid padding around the bounding box, in multiples of the spacing.
    /// Must comfortably exceed the narrow-band half-width (twice the spacing
    /// by default) so band samples never leave the grid.
    #[serde(default = "d_padding_spacings")]
    pub padding_spacings: f64,
}

fn d_spacing_fraction() -> f64 {
    0.03
}
fn d_padding_spacings() -> f64 {
    3.5
}

impl Default for VoxelizationSettings {
    fn default() -> Self {
        VoxelizationSettings {
            spacing_fraction: d_spacing_fraction(),
            padding_spacings: d_padding_spacings(),
        }
    }
}

/// The whole cohort description. Scalar fields first so TOML serialization
/// emits them before the tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    /// Number of corresponding particles per shape.
    pub particle_count: usize,
    /// Master seed for every stochastic choice in the pipeline.
    #[serde(default)]
    pub seed: u64,
    /// Artifact directory, relative to the config file.
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
    /// Input shapes; at least two.
    pub shapes: Vec<ShapeEntry>,
    #[serde(default)]
    pub optimization: OptimizationSettings,
    #[serde(default)]
    pub voxelization: VoxelizationSettings,
}

fn d_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl CohortConfig {
    /// A config with library defaults everywhere but the given shapes,
    /// particle count, and seed.
    pub fn with_defaults(shapes: Vec<ShapeEntry>, particle_count: usize, seed: u64) -> Self {
        CohortConfig {
            particle_count,
            seed,
            output_dir: d_output_dir(),
            shapes,
            optimization: OptimizationSettings::default(),
            voxelization: VoxelizationSettings::default(),
        }
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> CliResult<()> {
        if self.shapes.len() < 2 {
            return Err(CliError::msg(format!(
                "config lists {} shape(s); at least 2 are required",
                self.shapes.len()
            )));
        }
        if self.particle_count == 0 {
            return Err(CliError::msg("particle_count must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.shapes {
            let id = entry.resolved_id()?;
            if !seen.insert(id.clone()) {
                return Err(CliError::msg(format!("duplicate shape id '{id}'")));
            }
        }
        for (name, v) in [
            ("spacing_fraction", self.voxelization.spacing_fraction),
            ("padding_spacings", self.voxelization.padding_spacings),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CliError::msg(format!(
                    "voxelization.{name} must be positive and finite, got {v}"
                )));
            }
        }
        self.optimization
            .to_core(self.seed)
            .validate()
            .ctx(|| "optimization settings".into())?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::msg(format!("could not serialize config: {e}")))
    }
}

impl ShapeEntry {
    /// Explicit id, or the mesh file stem.
    pub fn resolved_id(&self) -> CliResult<String> {
        let id = match &self.id {
            Some(id) => id.clone(),
            None => self
                .mesh
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_owned)
                .unwrap_or_default(),
        };
        if id.is_empty() {
            return Err(CliError::msg(format!(
                "shape entry '{}' has no usable id",
                self.mesh.display()
            )));
        }
        if id.contains('/') || id.contains('\\') || id == "." || id == ".." {
            return Err(CliError::msg(format!(
                "shape id '{id}' is not a valid file stem"
            )));
        }
        Ok(id)
    }
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: CohortConfig,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn shape_id(&self, i: usize) -> CliResult<String> {
        self.config.shapes[i].resolved_id()
    }

    pub fn mesh_path(&self, i: usize) -> PathBuf {
        self.base.join(&self.config.shapes[i].mesh)
    }

    pub fn sdf_path(&self, i: usize) -> Option<PathBuf> {
        self.config.shapes[i].sdf.as_ref().map(|p| self.base.join(p))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base.join(&self.config.output_dir)
    }

    pub fn core_config(&self) -> OptimizationConfig {
        self.config.optimization.to_core(self.config.seed)
    }
}

/// Parse, validate, and check that every referenced file exists.
pub fn load_config(path: &Path) -> CliResult<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let config: CohortConfig = toml::from_str(&text).map_err(|e| {
        CliError::msg(format!("could not parse config {}: {e}", path.display()))
    })?;
    config.validate()?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let loaded = LoadedConfig { config, base };
    for i in 0..loaded.config.shapes.len() {
        let mesh = loaded.mesh_path(i);
        if !mesh.is_file() {
            return Err(CliError::msg(format!(
                "mesh file does not exist: {}",
                mesh.display()
            )));
        }
        if let Some(sdf) = loaded.sdf_path(i) {
            if !sdf.is_file() {
                return Err(CliError::msg(format!(
                    "signed-distance volume does not exist: {}",
                    sdf.display()
                )));
            }
        }
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        particle_count = 32
        [[shapes]]
        mesh = "a.obj"
        [[shapes]]
        mesh = "b.obj"
    "#;

    #[test]
    fn minimal_config_gets_library_defaults() {
        let c: CohortConfig = toml::from_str(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.particle_count, 32);
        assert_eq!(c.seed, 0);
        assert_eq!(c.output_dir, PathBuf::from("out"));
        assert_eq!(c.shapes[0].resolved_id().unwrap(), "a");
        let core = c.optimization.to_core(c.seed);
        let defaults = OptimizationConfig::default();
        assert_eq!(format!("{core:?}"), format!("{defaults:?}"));
    }

    #[test]
    fn partial_optimization_table_keeps_other_defaults() {
        let text = format!("{MINIMAL}\n[optimization]\ngamma = 0.25\nkernel = \"biharmonic\"");
        let c: CohortConfig = toml::from_str(&text).unwrap();
        assert_eq!(c.optimization.gamma, 0.25);
        assert_eq!(c.optimization.kernel, KernelChoice::Biharmonic);
        assert_eq!(c.optimization.alpha_stage1, d_alpha_stage1());
        assert_eq!(c.optimization.stage2_epochs, d_stage2_epochs());
    }

    #[test]
    fn round_trip_is_identity() {
        let first: CohortConfig = toml::from_str(MINIMAL).unwrap();
        let serialized = first.to_toml_string().unwrap();
        let second: CohortConfig = toml::from_str(&serialized).unwrap();
        assert_eq!(first, second);
        let third: CohortConfig = toml::from_str(&second.to_toml_string().unwrap()).unwrap();
        assert_eq!(second, third);
    }

    #[test]
    fn serialized_config_spells_out_every_default() {
        let c: CohortConfig = toml::from_str(MINIMAL).unwrap();
        let text = c.to_toml_string().unwrap();
        for key in [
            "particle_count",
            "seed",
            "output_dir",
            "learning_rate",
            "alpha_stage1",
            "alpha_stage2",
            "beta",
            "gamma",
            "c_stage2",
            "regularizer_interval",
            "stage1_max_epochs",
            "stage2_epochs",
            "minibatch",
            "band_samples_per_particle",
            "band_offset_spacings",
            "neighborhood_size",
            "mismatch_tolerance",
            "movement_tolerance",
            "kernel",
            "spacing_fraction",
            "padding_spacings",
        ] {
            assert!(text.contains(key), "missing '{key}' in:\n{text}");
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let one_shape: CohortConfig =
            toml::from_str("particle_count = 8\n[[shapes]]\nmesh = \"a.obj\"").unwrap();
        assert!(one_shape.validate().is_err());

        let dup = r#"
            particle_count = 8
            [[shapes]]
            id = "x"
            mesh = "a.obj"
            [[shapes]]
            id = "x"
            mesh = "b.obj"
        "#;
        let dup: CohortConfig = toml::from_str(dup).unwrap();
        assert!(dup.validate().unwrap_err().to_string().contains("duplicate"));

        let bad_opt = format!("{MINIMAL}\n[optimization]\nlearning_rate = -1.0");
        let bad_opt: CohortConfig = toml::from_str(&bad_opt).unwrap();
        assert!(bad_opt.validate().is_err());

        let zero_j: CohortConfig = toml::from_str(
            "particle_count = 0\n[[shapes]]\nmesh = \"a.obj\"\n[[shapes]]\nmesh = \"b.obj\"",
        )
        .unwrap();
        assert!(zero_j.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\ntypo_field = 3");
        assert!(toml::from_str::<CohortConfig>(&text).is_err());
        let text = format!("{MINIMAL}\n[optimization]\nlearning_rte = 0.1");
        assert!(toml::from_str::<CohortConfig>(&text).is_err());
    }

    #[test]
    fn load_config_requires_existing_meshes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.toml");
        fs::write(&path, MINIMAL).unwrap();
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
        assert!(err.contains("a.obj") || err.contains("b.obj"), "{err}");
    }
}
