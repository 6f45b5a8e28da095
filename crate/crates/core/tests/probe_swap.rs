use apsm_core::init::initialize;
use apsm_core::regularizer::{mismatch_report, regularize, NEIGHBOR_FACTOR};
use apsm_core::sdf::{voxelize_sdf, DEFAULT_VOXEL_BUDGET};
use apsm_core::shape::{Cohort, ParticleSystem, ShapeSample};
use apsm_core::synthetic::icosphere;
use nalgebra::Point3;
use std::time::Instant;

fn sweep(subdiv: usize, j: usize, i: usize) {
    let mesh = icosphere(subdiv, 1.0).unwrap();
    let samples: Vec<ShapeSample> = (0..i)
        .map(|k| {
            let spacing = 0.03 * mesh.bbox_diagonal();
            let sdf = voxelize_sdf(&mesh, spacing, 3.5 * spacing, DEFAULT_VOXEL_BUDGET).unwrap();
            ShapeSample::new(format!("s{k}"), mesh.clone(), sdf).unwrap()
        })
        .collect();
    let cohort = Cohort::new(samples).unwrap();
    let init = initialize(&cohort, j).unwrap();
    let reference = init.reference;
    let victim = (reference + 1) % i;
    let base = init.system.all_positions().to_vec();
    let pair = cohort.geodesic(victim).particle_geodesics(&base[victim]);
    let closest: Vec<(usize, f64)> = (0..j)
        .map(|a| {
            (0..j)
                .filter(|&b| b != a)
                .map(|b| (b, pair[(a, b)]))
                .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
                .unwrap()
        })
        .collect();
    let mut by_spacing: Vec<usize> = (0..j).collect();
    by_spacing.sort_by(|&a, &b| closest[a].1.partial_cmp(&closest[b].1).unwrap());
    for pick in [j / 4, 3 * j / 8, j / 2, 5 * j / 8, 3 * j / 4, 7 * j / 8, j - 1] {
        let t0 = Instant::now();
        let a = by_spacing[pick];
        let b = closest[a].0;
        let mut positions = base.clone();
        positions[victim].swap(a, b);
        let mut sys = ParticleSystem::new(init.system.shape_ids().to_vec(), positions).unwrap();
        let mut counts = vec![];
        for _ in 0..4 {
            let rep = mismatch_report(&sys, &cohort, reference, NEIGHBOR_FACTOR).unwrap();
            counts.push(rep.total_mismatched_particles());
            if *counts.last().unwrap() == 0 {
                break;
            }
            sys = regularize(&sys, &cohort, reference).unwrap();
        }
        println!(
            "J={j} subdiv={subdiv} pick q{pick}: swap {a}<->{b} (gap {:.3}) totals {counts:?}  ({:.2}s)",
            closest[a].1,
            t0.elapsed().as_secs_f64()
        );
        // Dump the stuck terminal state of the victim shape.
        let pts = &sys.all_positions()[victim];
        let geo = cohort.geodesic(victim);
        let pm = geo.particle_geodesics(pts);
        let ref_pair = cohort.geodesic(reference).particle_geodesics(&base[reference]);
        let ref_sets: Vec<Vec<usize>> = (0..j)
            .map(|k| {
                let c = (0..j)
                    .filter(|&m| m != k)
                    .map(|m| ref_pair[(k, m)])
                    .fold(f64::INFINITY, f64::min);
                (0..j)
                    .filter(|&m| m != k && ref_pair[(k, m)] <= NEIGHBOR_FACTOR * c)
                    .collect()
            })
            .collect();
        for k in 0..j {
            let c = (0..j)
                .filter(|&m| m != k)
                .map(|m| pm[(k, m)])
                .fold(f64::INFINITY, f64::min);
            let cutoff = NEIGHBOR_FACTOR * c;
            let miss: Vec<(usize, f64)> = ref_sets[k]
                .iter()
                .filter(|&&m| pm[(k, m)] > cutoff)
                .map(|&m| (m, pm[(k, m)]))
                .collect();
            if !miss.is_empty() {
                println!("  flagged {k}: closest {c:.3} cutoff {cutoff:.3} missing {miss:?}");
            }
        }
        for k in 0..j {
            let disp = (pts[k] - base[victim][k]).norm();
            if disp > 0.05 {
                println!("  off-home {k}: disp {disp:.3}");
            }
        }
    }
}

#[test]
fn probe() {
    sweep(4, 64, 10);
}
