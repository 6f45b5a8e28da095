//! End-to-end tests of the `apsm` binary: every subcommand is exercised
//! through the real executable, checking artifacts and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use apsm_core::io;
use apsm_core::synthetic::icosphere;

fn apsm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_apsm"));
    // Keep test logs quiet but deterministic.
    c.env("RUST_LOG", "info");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("could not launch apsm")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Write `count` copies of a unit sphere and a config with shrunk epoch
/// budgets; returns the config path.
fn write_sphere_cohort(dir: &Path, count: usize, particle_count: usize) -> PathBuf {
    let mesh = icosphere(2, 1.0).unwrap();
    let mut shapes = String::new();
    for i in 0..count {
        let name = format!("sphere-{i}.obj");
        io::save_mesh(&dir.join(&name), &mesh).unwrap();
        shapes.push_str(&format!("[[shapes]]\nmesh = \"{name}\"\n"));
    }
    let config = format!(
        "particle_count = {particle_count}\n\
         seed = 11\n\
         output_dir = \"out\"\n\
         {shapes}\
         [optimization]\n\
         stage1_max_epochs = 30\n\
         regularizer_interval = 10\n\
         stage2_epochs = 8\n"
    );
    let path = dir.join("cohort.toml");
    fs::write(&path, config).unwrap();
    path
}

#[test]
fn identical_spheres_pipeline_completes_with_zero_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_sphere_cohort(dir.path(), 5, 32);

    let out = run(apsm().arg("optimize").arg(&config).arg("--serial"));
    assert!(
        out.status.success(),
        "optimize failed:\n{}",
        stderr_of(&out)
    );
    let out_dir = dir.path().join("out");
    for sub in ["particles_init", "particles_stage1", "particles_final"] {
        for i in 0..5 {
            let f = out_dir.join(sub).join(format!("sphere-{i}.particles"));
            assert!(f.is_file(), "missing {}", f.display());
        }
    }
    assert!(out_dir.join("progress.csv").is_file());
    assert_eq!(
        fs::read_to_string(out_dir.join("reference.txt")).unwrap().trim(),
        "sphere-0"
    );
    let progress = fs::read_to_string(out_dir.join("progress.csv")).unwrap();
    assert!(progress.starts_with(
        "stage,epoch,total,sampling,eigenshape,correspondence,max_movement,worst_snap_ratio,\
         mismatched_particles"
    ));
    assert!(progress.lines().count() >= 3);

    // An identical cohort stays perfectly matched: exit 0 at tolerance 0.
    let check = run(apsm()
        .arg("check-correspondence")
        .arg(&config)
        .arg("--tolerance")
        .arg("0"));
    assert!(
        check.status.success(),
        "check-correspondence failed:\n{}",
        stderr_of(&check)
    );
    let csv = String::from_utf8_lossy(&check.stdout).into_owned();
    assert!(csv.starts_with("shape_id,particle,missing_neighbors"));
    assert_eq!(csv.lines().count(), 1 + 5 * 32);
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",0"), "unexpected mismatch row: {line}");
    }

    // Evaluation artifacts land next to the particles.
    let eval = run(apsm().arg("evaluate").arg(&config));
    assert!(eval.status.success(), "evaluate failed:\n{}", stderr_of(&eval));
    let eval_dir = out_dir.join("evaluation");
    for f in [
        "compactness.csv",
        "generalization.csv",
        "specificity.csv",
        "surface_to_surface.csv",
        "summary.txt",
        "compactness.svg",
        "generalization.svg",
        "specificity.svg",
    ] {
        assert!(eval_dir.join(f).is_file(), "missing evaluation artifact {f}");
    }
    // Identical shapes reconstruct their own surface almost exactly.
    let s2s = fs::read_to_string(eval_dir.join("surface_to_surface.csv")).unwrap();
    for line in s2s.lines().skip(1) {
        let mean: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(mean < 0.05, "surface distance too large: {line}");
    }

    // Reconstruction writes one warped mesh per member.
    let rec = run(apsm().arg("reconstruct").arg(&config));
    assert!(rec.status.success(), "reconstruct failed:\n{}", stderr_of(&rec));
    for i in 0..5 {
        let f = out_dir.join("reconstructed").join(format!("sphere-{i}.obj"));
        assert!(f.is_file(), "missing {}", f.display());
        io::load_mesh(&f).unwrap();
    }
}

#[test]
fn missing_mesh_fails_validation_before_any_compute() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cohort.toml");
    fs::write(
        &config,
        "particle_count = 8\n[[shapes]]\nmesh = \"ghost.obj\"\n[[shapes]]\nmesh = \"ghost2.obj\"\n",
    )
    .unwrap();
    let out = run(apsm().arg("optimize").arg(&config));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("ghost"), "{}", stderr_of(&out));
    assert!(
        !dir.path().join("out").exists(),
        "output directory should not be created on validation failure"
    );
}

#[test]
fn numerical_blowup_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    // Two different ellipsoids so the correspondence residuals are nonzero,
    // with an absurd weight that overflows the total loss.
    let a = icosphere(1, 1.0).unwrap();
    let mut b = icosphere(1, 1.0).unwrap();
    let stretched: Vec<_> = b
        .vertices()
        .iter()
        .map(|p| nalgebra::Point3::new(1.4 * p.x, p.y, p.z))
        .collect();
    b = apsm_core::mesh::TriangleMesh::new(stretched, b.faces().to_vec()).unwrap();
    io::save_mesh(&dir.path().join("a.obj"), &a).unwrap();
    io::save_mesh(&dir.path().join("b.obj"), &b).unwrap();
    let config = dir.path().join("cohort.toml");
    fs::write(
        &config,
        "particle_count = 12\n\
         [[shapes]]\nmesh = \"a.obj\"\n\
         [[shapes]]\nmesh = \"b.obj\"\n\
         [optimization]\n\
         gamma = 1e308\n\
         stage1_max_epochs = 6\n\
         regularizer_interval = 6\n\
         stage2_epochs = 2\n",
    )
    .unwrap();
    let out = run(apsm().arg("optimize").arg(&config).arg("--serial"));
    assert_eq!(out.status.code(), Some(2), "stderr:\n{}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("finite") || stderr_of(&out).contains("singular"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn generated_cohorts_are_seed_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let (g1, g2, g3) = (
        dir.path().join("run1"),
        dir.path().join("run2"),
        dir.path().join("run3"),
    );
    for (target, seed) in [(&g1, 9u64), (&g2, 9), (&g3, 10)] {
        let out = run(apsm()
            .args(["generate-synthetic", "sphere-bump"])
            .arg(target)
            .args(["--count", "3", "--subdivisions", "2", "--seed"])
            .arg(seed.to_string()));
        assert!(out.status.success(), "{}", stderr_of(&out));
    }
    let manifest1 = fs::read(g1.join("manifest.csv")).unwrap();
    let manifest2 = fs::read(g2.join("manifest.csv")).unwrap();
    let manifest3 = fs::read(g3.join("manifest.csv")).unwrap();
    assert_eq!(manifest1, manifest2, "same seed must give identical manifests");
    assert_ne!(manifest1, manifest3, "different seeds must differ");
    let mesh1 = fs::read(g1.join("meshes/sphere-bump-000.obj")).unwrap();
    let mesh2 = fs::read(g2.join("meshes/sphere-bump-000.obj")).unwrap();
    assert_eq!(mesh1, mesh2);

    // The bump family ships a non-empty vertex mask per member.
    for i in 0..3 {
        let mask = fs::read_to_string(g1.join(format!("masks/sphere-bump-00{i}.txt"))).unwrap();
        assert!(!mask.trim().is_empty(), "mask {i} is empty");
        for line in mask.lines() {
            let _: usize = line.parse().expect("mask entries are vertex indices");
        }
    }

    // The pre-filled config is immediately usable: shrink the particle count
    // and run the initializer through the binary.
    let toml_path = g1.join("cohort.toml");
    let text = fs::read_to_string(&toml_path)
        .unwrap()
        .replace("particle_count = 64", "particle_count = 12");
    fs::write(&toml_path, text).unwrap();
    let out = run(apsm().arg("init").arg(&toml_path));
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(g1.join("out/particles_init/sphere-bump-000.particles").is_file());
    assert!(g1.join("out/reference.txt").is_file());
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let help = run(apsm().arg("--help"));
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("generate-synthetic"));

    let bogus = run(apsm().arg("does-not-exist"));
    assert_eq!(bogus.status.code(), Some(1));

    let conflict = run(apsm().args(["optimize", "x.toml", "--serial", "--threads", "2"]));
    assert_eq!(conflict.status.code(), Some(1));
}
