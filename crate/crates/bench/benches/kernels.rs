//! Measurements of the kernels that dominate a solver run: operator
//! assembly, the dense and iterative linear-solve paths, one implicit time
//! step, the a posteriori indicator, and refine-then-transfer mesh traffic.

use std::f64::consts::PI;
use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use bihdg::estimators::{elliptic_estimate, EstimatorConstants};
use bihdg::forms::{assemble_stiffness, backward_euler_step, PenaltyConfig};
use bihdg::linalg::solve_spd;
use bihdg::mesh::Mesh;
use bihdg::space::{project_callable, DgSpace};

fn space_at(level: u8, degree: usize) -> Arc<DgSpace> {
    let mesh = Arc::new(Mesh::unit_square(level).expect("level mesh"));
    DgSpace::new(mesh, degree).expect("space")
}

fn bump(x: f64, y: f64) -> f64 {
    (PI * x).sin().powi(2) * (PI * y).sin().powi(2)
}

fn assembly(c: &mut Criterion) {
    let pen = PenaltyConfig::default();
    for (level, degree) in [(4u8, 2usize), (4, 3)] {
        let space = space_at(level, degree);
        c.bench_function(&format!("assemble_stiffness/level{level}_r{degree}"), |b| {
            b.iter(|| assemble_stiffness(black_box(&space), &pen).expect("assembles"))
        });
    }
}

fn linear_solves(c: &mut Criterion) {
    let pen = PenaltyConfig::default();
    // level 5 stays on the direct factorization path, level 6 crosses into
    // the preconditioned iterative path
    for level in [5u8, 6] {
        let space = space_at(level, 2);
        let mut system = assemble_stiffness(&space, &pen).expect("assembles");
        system.shift_diagonal(1.0 / 1e-3);
        let rhs = vec![1.0; space.ndofs()];
        c.bench_function(&format!("solve_shifted/level{level}_r2"), |b| {
            b.iter(|| {
                solve_spd(black_box(&system), black_box(&rhs), space.dim_local(), 1e-10)
                    .expect("solves")
            })
        });
    }
}

fn time_step(c: &mut Criterion) {
    let space = space_at(4, 2);
    let u_prev = project_callable(&space, bump, 8).expect("projects");
    let pen = PenaltyConfig::default();
    let forcing: bihdg::forms::SpaceFn = Arc::new(|x, y| (20.0 * x * y).sin());
    c.bench_function("backward_euler_step/level4_r2", |b| {
        b.iter(|| {
            backward_euler_step(black_box(&u_prev), 1e-3, &forcing, &space, &pen)
                .expect("steps")
        })
    });
}

fn indicator(c: &mut Criterion) {
    let space = space_at(4, 2);
    let u = project_callable(&space, bump, 8).expect("projects");
    let pen = PenaltyConfig::default();
    let consts = EstimatorConstants::default();
    let phi = |x: f64, y: f64| (3.0 * x - y).cos();
    c.bench_function("elliptic_estimate/level4_r2", |b| {
        b.iter(|| elliptic_estimate(black_box(&u), &phi, &pen, &consts, 10).expect("estimates"))
    });
}

fn refine_and_transfer(c: &mut Criterion) {
    let space = space_at(4, 2);
    let u = project_callable(&space, bump, 8).expect("projects");
    let mesh = space.mesh();
    // mark the lower-left quadrant, about a quarter of the elements
    let marked: Vec<_> = (0..mesh.n_elems())
        .filter(|&k| {
            let c = mesh.elem_coords(k);
            let cx = (c[0][0] + c[1][0] + c[2][0]) / 3.0;
            let cy = (c[0][1] + c[1][1] + c[2][1]) / 3.0;
            cx < 0.5 && cy < 0.5
        })
        .map(|k| mesh.elem(k).path)
        .collect();
    c.bench_function("bisect_and_transfer/level4_r2", |b| {
        b.iter(|| {
            let refined = Arc::new(mesh.bisect(black_box(&marked)).expect("bisects"));
            let target = DgSpace::new(refined, 2).expect("space");
            u.transfer(&target).expect("transfers")
        })
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = assembly, linear_solves, time_step, indicator, refine_and_transfer
}
criterion_main!(kernels);
