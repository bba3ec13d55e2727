//! Sequential against rayon for the data-parallel kernels.

use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sandbot_core::exec::Parallelism;
use sandbot_core::kinematics::{JointConfig, Reachability, RobotModel};
use sandbot_core::perception::{auto_register, simulate_scan, PoseNudge};
use sandbot_core::scenario::Scenario;
use sandbot_core::workpiece::SurfaceGrid;

const MODES: [Parallelism; 2] = [Parallelism::Sequential, Parallelism::Parallel];

fn setup() -> (Scenario, RobotModel, SurfaceGrid, JointConfig) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/structured_panel.json");
    let sc = Scenario::from_path(&path).unwrap();
    let robot = sc.load_robot(None).unwrap();
    let grid = sc.build_grid().unwrap();
    let q = sc.initial_config.clone().unwrap();
    (sc, robot, grid, q)
}

fn reachability(c: &mut Criterion) {
    let (_, robot, grid, _) = setup();
    let [hu, hv] = grid.geometry.half_extent();
    let points: Vec<_> = (0..20)
        .flat_map(|j| (0..20).map(move |i| [-hu + 2.0 * hu * i as f64 / 19.0, -hv + 2.0 * hv * j as f64 / 19.0]))
        .map(|uv| grid.surface_target(uv, Some([1.0, 0.0])))
        .collect();
    let reach = Reachability::new(&robot);
    let mut g = c.benchmark_group("reachability_grid_400");
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| reach.grid(black_box(&points), &sandbot_core::pose::Pose::identity(), mode).unwrap())
        });
    }
    g.finish();
}

fn scan(c: &mut Criterion) {
    let (sc, robot, grid, q) = setup();
    let mut g = c.benchmark_group("scan");
    g.sample_size(20);
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| simulate_scan(&robot, &grid, std::slice::from_ref(&q), &sc.scan.camera, 0.002, 7, mode).unwrap())
        });
    }
    g.finish();
}

fn registration_trials(c: &mut Criterion) {
    let (sc, robot, grid, q) = setup();
    let cloud = simulate_scan(&robot, &grid, &[q], &sc.scan.camera, 0.002, 7, Parallelism::Sequential).unwrap().cloud;
    let truth = grid.object_pose;
    let inits: Vec<_> = (0..8)
        .map(|k| {
            let s = (k as f64 - 3.5) / 3.5;
            PoseNudge { translation_m: [0.015 * s, -0.01 * s, 0.005], rotation_rad: [0.0, 0.02 * s, 0.06 * s] }.apply(&truth)
        })
        .collect();
    let mut g = c.benchmark_group("registration_trials_8");
    g.sample_size(10);
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| mode.map(&inits, |init| auto_register(&cloud, &grid.geometry, init, &sc.registration).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, reachability, scan, registration_trials);
criterion_main!(benches);
