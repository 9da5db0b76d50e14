//! Convergence studies and report emission.
//!
//! A *uniform run* integrates the scheme on a fixed mesh with a fixed step
//! size; a *study* sweeps a range of refinement levels with the step tied to
//! the mesh size by a power law and tabulates errors, estimator totals,
//! convergence orders, and inverse effectivity indices. The adaptive study
//! wraps one of the step-control drivers and pairs it with a uniform run of
//! matched accuracy to compare space-time degrees of freedom.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::{
    explicit_time_step_control, implicit_time_step_control, AdaptiveConfig, EvolutionProblem,
    LogEntry, RunLog,
};
use crate::error::{Error, Result};
use crate::estimators::{
    coarsening_estimators, data_estimators, elliptic_estimate, eoc, extra_space_estimator,
    g_l2_difference_sq, iei, time_estimators, ErrorAccumulator, EstimatorConstants,
    EstimatorState, EtaTildeMode, NormFlavor, StepEstimators, StepRecord,
};
use crate::forms::{
    assemble_load, assemble_stiffness, g_initial, time_averaged_load, GRep, PenaltyConfig,
    SpaceFn, DEFAULT_SOLVE_TOL,
};
use crate::linalg::solve_spd;
use crate::mesh::Mesh;
use crate::problems::Example;
use crate::quadrature::default_volume_degree;
use crate::space::{l2_error_callable, project_callable, DgSpace, FeFunction};

const TIME_REL_EPS: f64 = 1e-12;

/// Power law tying the time step to the mesh size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtLaw {
    H3,
    H2,
}

impl DtLaw {
    pub fn lambda(self, h: f64) -> f64 {
        match self {
            DtLaw::H3 => h * h * h,
            DtLaw::H2 => h * h,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DtLaw::H3 => "h3",
            DtLaw::H2 => "h2",
        }
    }
}

/// Which adaptive driver an adaptive study runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverKind {
    Implicit,
    Explicit,
}

impl DriverKind {
    pub fn name(self) -> &'static str {
        match self {
            DriverKind::Implicit => "adaptive-implicit",
            DriverKind::Explicit => "adaptive-explicit",
        }
    }
}

/// Largest element diameter of the mesh.
pub fn max_h(mesh: &Mesh) -> f64 {
    mesh.elems().iter().map(|e| e.h).fold(0.0, f64::max)
}

/// The mesh whose elements have diameter 2^{−i/2−1}.
pub fn level_mesh(level: u8) -> Result<Mesh> {
    Mesh::unit_square(level)
}

/// Integrate the scheme on a fixed mesh with fixed step size (the final step
/// is clipped to land on the final time), collecting the same per-step
/// records the adaptive drivers produce.
#[allow(clippy::too_many_arguments)]
pub fn uniform_run(
    problem: &EvolutionProblem,
    mesh: &Mesh,
    degree: usize,
    pen: &PenaltyConfig,
    lambda: f64,
    final_time: f64,
    norm: NormFlavor,
    eta_tilde: EtaTildeMode,
) -> Result<RunLog> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive and finite, got {lambda}"
        )));
    }
    let consts = EstimatorConstants::default();
    let quad = default_volume_degree(degree);
    let clock = Instant::now();
    let space = DgSpace::new(Arc::new(mesh.clone()), degree)?;
    let nl = space.dim_local();
    let ndofs = space.ndofs();

    let u0 = project_callable(&space, |x, y| (problem.initial)(x, y), quad)?;
    let e0 = l2_error_callable(&u0, |x, y| (problem.initial)(x, y), quad)?;
    let stiffness = assemble_stiffness(&space, pen)?;
    let forcing0 = problem.forcing.clone();
    let f_at_zero: SpaceFn = Arc::new(move |x, y| forcing0(x, y, 0.0));
    let mut g_prev = g_initial(&u0, &stiffness, f_at_zero)?;
    let field0 = elliptic_estimate(&u0, &g_prev, pen, &consts, quad)?;
    let mut state = EstimatorState::default();
    state.seed_initial_space(field0.total);
    let mut errors = problem.exact.as_ref().map(|_| ErrorAccumulator::default());

    let mut entries = vec![LogEntry {
        step: StepRecord {
            n: 0,
            t: 0.0,
            lambda: 0.0,
            est: StepEstimators {
                space_indicator: field0.total,
                ..StepEstimators::default()
            },
            e_coarsen: 0.0,
            e_time: 0.0,
            e_space: state.acc.e_space(norm),
            err_linf_l2: e0,
            err_l2_l2: 0.0,
            iei: iei(e0, 0.0, state.acc.e_space(norm)).unwrap_or(f64::NAN),
            dofs: ndofs,
        },
        rejections: 0,
        wall_seconds: clock.elapsed().as_secs_f64(),
    }];

    let mut shifted = stiffness.clone();
    shifted.shift_diagonal(1.0 / lambda);
    let mut shift_for = lambda;
    let mut u_prev = u0;
    let mut t = 0.0;
    let mut n = 1;
    let mut solves = 0;
    while final_time - t > TIME_REL_EPS * final_time {
        let step_clock = Instant::now();
        let lam = lambda.min(final_time - t);
        if lam != shift_for {
            shifted = stiffness.clone();
            shifted.shift_diagonal(1.0 / lam);
            shift_for = lam;
        }
        let f_tilde = time_averaged_load(problem.forcing.clone(), t, lam)?;
        let load = assemble_load(&space, |x, y| f_tilde(x, y), quad)?;
        let rhs: Vec<f64> = u_prev
            .coeffs
            .iter()
            .zip(&load)
            .map(|(&c, &l)| c / lam + l)
            .collect();
        let coeffs = solve_spd(&shifted, &rhs, nl, DEFAULT_SOLVE_TOL)?;
        solves += 1;
        let u = FeFunction::from_coeffs(space.clone(), coeffs);
        let mut g_coeffs = stiffness.matvec(&u.coeffs);
        for (c, l) in g_coeffs.iter_mut().zip(&load) {
            *c -= *l;
        }
        let g = GRep {
            fe: FeFunction::from_coeffs(space.clone(), g_coeffs),
            analytic: f_tilde.clone(),
        };

        let (gamma_inf, gamma_2) = coarsening_estimators(&u_prev, &u_prev, lam, state.hist_gamma);
        let g_diff = g_l2_difference_sq(&g, &g_prev, quad)?;
        let (eta_inf, eta_2) = time_estimators(g_diff, lam, state.hist_eta);
        let forcing = problem.forcing.clone();
        let (beta_inf, beta_2) = data_estimators(
            &move |x: f64, y: f64, tt: f64| forcing(x, y, tt),
            &f_tilde,
            &space,
            t,
            lam,
            quad,
        )?;
        let eta_tilde_val =
            extra_space_estimator(&u, &u_prev, &g, &g_prev, pen, &consts, eta_tilde, quad)?;
        let field = elliptic_estimate(&u, &g, pen, &consts, quad)?;
        let est = StepEstimators {
            gamma_inf,
            gamma_2,
            eta_inf,
            eta_2,
            beta_inf,
            beta_2,
            eta_tilde: eta_tilde_val,
            space_indicator: field.total,
        };
        state.commit(&est, lam);
        if let (Some(errs), Some(exact)) = (&mut errors, &problem.exact) {
            let e = exact.clone();
            errs.push_interval(
                &u_prev,
                &u,
                &move |x: f64, y: f64, tt: f64| e(x, y, tt),
                t,
                lam,
                quad,
            )?;
        }
        let (err_linf, err_l2) = match &errors {
            Some(a) => (a.linf_l2, a.l2_l2_sq.sqrt()),
            None => (f64::NAN, f64::NAN),
        };
        let err_for_iei = match norm {
            NormFlavor::LinfL2 => err_linf,
            NormFlavor::L2L2 => err_l2,
        };
        entries.push(LogEntry {
            step: StepRecord {
                n,
                t: t + lam,
                lambda: lam,
                est,
                e_coarsen: state.acc.e_coarsen(norm),
                e_time: state.acc.e_time(norm),
                e_space: state.acc.e_space(norm),
                err_linf_l2: err_linf,
                err_l2_l2: err_l2,
                iei: iei(err_for_iei, state.acc.e_time(norm), state.acc.e_space(norm))
                    .unwrap_or(f64::NAN),
                dofs: ndofs,
            },
            rejections: 0,
            wall_seconds: step_clock.elapsed().as_secs_f64(),
        });
        u_prev = u;
        g_prev = g;
        t += lam;
        n += 1;
    }
    let total_dofs = ndofs * entries.len();
    Ok(RunLog {
        entries,
        rejected_steps: 0,
        solves,
        total_dofs,
        unconverged_space_steps: 0,
        initial_error: e0,
        state,
        errors,
        norm,
        u_final: u_prev,
    })
}

/// One line of a level study.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub level: u8,
    pub h: f64,
    /// Nominal step size by the law (the run clips its final step).
    pub lambda: f64,
    pub steps: usize,
    pub dofs: usize,
    pub total_dofs: usize,
    pub e0: f64,
    pub err_linf_l2: f64,
    pub err_l2_l2: f64,
    /// Orders against the previous row; NaN on the first row.
    pub eoc_linf: f64,
    pub eoc_l2: f64,
    pub e_coarsen_inf: f64,
    pub e_time_inf: f64,
    pub e_space_inf: f64,
    pub e_coarsen_2: f64,
    pub e_time_2: f64,
    pub e_space_2: f64,
    pub iei_inf: f64,
    pub iei_2: f64,
}

pub const STUDY_CSV_HEADER: &str = "level,h,lambda,steps,dofs,total_dofs,e0,err_linf_l2,err_l2_l2,eoc_linf,eoc_l2,e_coarsen_inf,e_time_inf,e_space_inf,e_coarsen_2,e_time_2,e_space_2,iei_inf,iei_2";

impl StudyRow {
    pub fn csv_line(&self) -> String {
        // the order columns stay empty where no previous level exists
        let eoc = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.10e}") };
        format!(
            "{},{:.10e},{:.10e},{},{},{},{:.10e},{:.10e},{:.10e},{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            self.level,
            self.h,
            self.lambda,
            self.steps,
            self.dofs,
            self.total_dofs,
            self.e0,
            self.err_linf_l2,
            self.err_l2_l2,
            eoc(self.eoc_linf),
            eoc(self.eoc_l2),
            self.e_coarsen_inf,
            self.e_time_inf,
            self.e_space_inf,
            self.e_coarsen_2,
            self.e_time_2,
            self.e_space_2,
            self.iei_inf,
            self.iei_2
        )
    }
}

pub fn study_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from(STUDY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Inputs of a uniform level sweep.
#[derive(Debug, Clone)]
pub struct UniformStudySpec {
    pub example: Example,
    pub degree: usize,
    /// Inclusive level range.
    pub levels: (u8, u8),
    pub dt_law: DtLaw,
    pub pen: PenaltyConfig,
    pub final_time: f64,
    pub norm: NormFlavor,
    pub eta_tilde: EtaTildeMode,
    /// Levels whose spatial dof count exceeds this are skipped.
    pub max_dofs: usize,
}

/// Outcome of a level sweep: one row and one full step log per level.
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub logs: Vec<RunLog>,
    /// True when the level range was cut short by the dof cap.
    pub truncated: bool,
}

fn row_from_log(log: &RunLog, level: u8, h: f64, lambda: f64, dofs: usize) -> StudyRow {
    let (err_linf, err_l2) = log.final_errors();
    let acc = &log.state.acc;
    StudyRow {
        level,
        h,
        lambda,
        steps: log.entries.len() - 1,
        dofs,
        total_dofs: log.total_dofs,
        e0: log.initial_error,
        err_linf_l2: err_linf,
        err_l2_l2: err_l2,
        eoc_linf: f64::NAN,
        eoc_l2: f64::NAN,
        e_coarsen_inf: acc.e_coarsen(NormFlavor::LinfL2),
        e_time_inf: acc.e_time(NormFlavor::LinfL2),
        e_space_inf: acc.e_space(NormFlavor::LinfL2),
        e_coarsen_2: acc.e_coarsen(NormFlavor::L2L2),
        e_time_2: acc.e_time(NormFlavor::L2L2),
        e_space_2: acc.e_space(NormFlavor::L2L2),
        iei_inf: iei(
            err_linf,
            acc.e_time(NormFlavor::LinfL2),
            acc.e_space(NormFlavor::LinfL2),
        )
        .unwrap_or(f64::NAN),
        iei_2: iei(
            err_l2,
            acc.e_time(NormFlavor::L2L2),
            acc.e_space(NormFlavor::L2L2),
        )
        .unwrap_or(f64::NAN),
    }
}

/// Fill the order columns of a row sequence from its error and h columns.
pub fn fill_eoc(rows: &mut [StudyRow]) {
    let hs: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let linf: Vec<f64> = rows.iter().map(|r| r.err_linf_l2).collect();
    let l2: Vec<f64> = rows.iter().map(|r| r.err_l2_l2).collect();
    for i in 1..rows.len() {
        rows[i].eoc_linf = eoc(&linf, &hs, i - 1);
        rows[i].eoc_l2 = eoc(&l2, &hs, i - 1);
    }
}

pub fn uniform_study(spec: &UniformStudySpec) -> Result<StudyReport> {
    let problem = EvolutionProblem {
        initial: spec.example.initial_fn(),
        forcing: spec.example.forcing_fn(),
        exact: Some(spec.example.exact_fn()),
    };
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    let mut truncated = false;
    for level in spec.levels.0..=spec.levels.1 {
        let mesh = level_mesh(level)?;
        let space_dofs = mesh.n_elems() * (spec.degree + 1) * (spec.degree + 2) / 2;
        if space_dofs > spec.max_dofs {
            truncated = true;
            break;
        }
        let h = max_h(&mesh);
        let lambda = spec.dt_law.lambda(h);
        let log = uniform_run(
            &problem,
            &mesh,
            spec.degree,
            &spec.pen,
            lambda,
            spec.final_time,
            spec.norm,
            spec.eta_tilde,
        )?;
        rows.push(row_from_log(&log, level, h, lambda, space_dofs));
        logs.push(log);
    }
    fill_eoc(&mut rows);
    Ok(StudyReport {
        rows,
        logs,
        truncated,
    })
}

/// Inputs of an adaptive driver study.
#[derive(Debug, Clone)]
pub struct AdaptiveStudySpec {
    pub example: Example,
    pub degree: usize,
    pub kind: DriverKind,
    /// Level of the starting mesh (same indexing as the uniform studies).
    pub start_level: u8,
    pub config: AdaptiveConfig,
    pub pen: PenaltyConfig,
    /// Level range tried for the matched-error uniform comparison;
    /// None skips the pairing.
    pub pairing_levels: Option<(u8, u8)>,
    pub dt_law: DtLaw,
}

/// A uniform run whose final error was steered to match an adaptive run's.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedUniform {
    pub level: u8,
    pub lambda: f64,
    pub err_linf_l2: f64,
    pub total_dofs: usize,
    /// Adaptive total dofs over uniform total dofs.
    pub dof_ratio: f64,
    /// Whether the errors agree within ten percent.
    pub matched: bool,
}

pub struct AdaptiveStudyReport {
    pub log: RunLog,
    pub summary: Summary,
    pub paired: Option<PairedUniform>,
}

/// Outcome of one error-only pairing probe.
struct ProbeRun {
    err: f64,
    total_dofs: usize,
    lambda_first: f64,
}

/// The trajectory of `uniform_run` with all estimator work skipped: the
/// pairing search only needs the exact error and the dof count.
fn probe_uniform(
    problem: &EvolutionProblem,
    level: u8,
    degree: usize,
    pen: &PenaltyConfig,
    lambda: f64,
    final_time: f64,
) -> Result<ProbeRun> {
    let exact = match &problem.exact {
        Some(e) => e.clone(),
        None => {
            return Err(Error::InvalidArgument(
                "the pairing search needs an exact solution".into(),
            ))
        }
    };
    let quad = default_volume_degree(degree);
    let mesh = level_mesh(level)?;
    let space = DgSpace::new(Arc::new(mesh), degree)?;
    let nl = space.dim_local();
    let stiffness = assemble_stiffness(&space, pen)?;
    let mut shifted = stiffness.clone();
    shifted.shift_diagonal(1.0 / lambda);
    let mut shift_for = lambda;
    let mut errors = ErrorAccumulator::default();
    let mut u_prev = project_callable(&space, |x, y| (problem.initial)(x, y), quad)?;
    let mut t = 0.0;
    let mut steps = 0usize;
    while final_time - t > TIME_REL_EPS * final_time {
        let lam = lambda.min(final_time - t);
        if lam != shift_for {
            shifted = stiffness.clone();
            shifted.shift_diagonal(1.0 / lam);
            shift_for = lam;
        }
        let f_tilde = time_averaged_load(problem.forcing.clone(), t, lam)?;
        let load = assemble_load(&space, |x, y| f_tilde(x, y), quad)?;
        let rhs: Vec<f64> = u_prev
            .coeffs
            .iter()
            .zip(&load)
            .map(|(&c, &l)| c / lam + l)
            .collect();
        let coeffs = solve_spd(&shifted, &rhs, nl, DEFAULT_SOLVE_TOL)?;
        let u = FeFunction::from_coeffs(space.clone(), coeffs);
        let e = exact.clone();
        errors.push_interval(&u_prev, &u, &move |x: f64, y: f64, tt: f64| e(x, y, tt), t, lam, quad)?;
        u_prev = u;
        t += lam;
        steps += 1;
    }
    Ok(ProbeRun {
        err: errors.linf_l2,
        total_dofs: (steps + 1) * space.ndofs(),
        lambda_first: lambda.min(final_time),
    })
}

/// Steer a uniform run to the adaptive run's final error: sweep the levels
/// at the law step until one reaches the target, then adjust the step size
/// on the stopping level until the final errors agree within ten percent.
/// On a fixed mesh the error is nearly affine in the step size and only
/// falls to that mesh's resolution floor, so two probes calibrate the
/// model, decide reachability, and a secant step lands on the target.
fn pair_uniform(
    problem: &EvolutionProblem,
    spec: &AdaptiveStudySpec,
    err_target: f64,
    final_time: f64,
) -> Result<Option<PairedUniform>> {
    let (lo, hi) = match spec.pairing_levels {
        Some(p) => p,
        None => return Ok(None),
    };
    if !err_target.is_finite() || err_target <= 0.0 || problem.exact.is_none() {
        return Ok(None);
    }
    let within = |e: f64| (e - err_target).abs() <= 0.1 * err_target;
    let closeness = |e: f64| (e / err_target).ln().abs();

    let mut best: Option<(u8, ProbeRun)> = None;
    let mut level = lo;
    let mut law;
    let mut law_err;
    loop {
        let h = max_h(&level_mesh(level)?);
        law = spec.dt_law.lambda(h).min(final_time);
        let run = probe_uniform(problem, level, spec.degree, &spec.pen, law, final_time)?;
        law_err = run.err;
        if best.as_ref().is_none_or(|(_, b)| closeness(run.err) < closeness(b.err)) {
            best = Some((level, run));
        }
        if law_err <= 1.1 * err_target || level == hi {
            break;
        }
        level += 1;
    }

    if !within(law_err) {
        // on a fixed mesh the error is close to affine in the step size,
        // err(lambda) = floor + slope*lambda, so two probes calibrate a
        // model that predicts both reachability and the matching step
        let lambda_min = law / 32.0;
        let mut pts: Vec<(f64, f64)> = vec![(law, law_err)];
        let second = if law_err > err_target { law / 2.0 } else { (2.0 * law).min(final_time) };
        let mut search_failed = false;
        if second > lambda_min && (second - law).abs() > 1e-12 * law {
            let run = probe_uniform(problem, level, spec.degree, &spec.pen, second, final_time)?;
            pts.push((second, run.err));
            if best.as_ref().is_none_or(|(_, b)| closeness(run.err) < closeness(b.err)) {
                best = Some((level, run));
            }
        } else {
            search_failed = true;
        }
        let mut iters = 0;
        while !search_failed && iters < 8 {
            let (l1, e1) = pts[pts.len() - 2];
            let (l2, e2) = pts[pts.len() - 1];
            if within(e2) {
                break;
            }
            let slope = (e2 - e1) / (l2 - l1);
            if !(slope > 0.0) {
                break; // the error no longer responds to the step size
            }
            let floor = e2 - slope * l2;
            // the smallest error any step on this mesh can reach
            let reachable = floor + slope * lambda_min;
            if reachable > 1.1 * err_target {
                break;
            }
            let next = ((err_target - floor) / slope)
                .clamp(lambda_min, final_time)
                .clamp(l2 / 8.0, l2 * 8.0);
            if (next - l2).abs() <= 1e-9 * l2 {
                break;
            }
            let run = probe_uniform(problem, level, spec.degree, &spec.pen, next, final_time)?;
            pts.push((next, run.err));
            if best.as_ref().is_none_or(|(_, b)| closeness(run.err) < closeness(b.err)) {
                best = Some((level, run));
            }
            iters += 1;
        }
    }

    let (level, run) = match best {
        Some(b) => b,
        None => return Ok(None),
    };
    Ok(Some(PairedUniform {
        level,
        lambda: run.lambda_first,
        err_linf_l2: run.err,
        total_dofs: run.total_dofs,
        dof_ratio: f64::NAN, // filled by the caller
        matched: within(run.err),
    }))
}

pub fn adaptive_study(spec: &AdaptiveStudySpec) -> Result<AdaptiveStudyReport> {
    let problem = EvolutionProblem {
        initial: spec.example.initial_fn(),
        forcing: spec.example.forcing_fn(),
        exact: Some(spec.example.exact_fn()),
    };
    let mesh0 = level_mesh(spec.start_level)?;
    let log = match spec.kind {
        DriverKind::Implicit => {
            implicit_time_step_control(&problem, &mesh0, spec.degree, &spec.pen, &spec.config)?
        }
        DriverKind::Explicit => {
            explicit_time_step_control(&problem, &mesh0, spec.degree, &spec.pen, &spec.config)?
        }
    };
    let summary = summarize(
        &log,
        spec.example.name(),
        spec.degree,
        spec.kind.name(),
    );
    let mut paired = pair_uniform(
        &problem,
        spec,
        log.final_errors().0,
        spec.config.final_time,
    )?;
    if let Some(p) = &mut paired {
        p.dof_ratio = log.total_dofs as f64 / p.total_dofs as f64;
    }
    Ok(AdaptiveStudyReport {
        log,
        summary,
        paired,
    })
}

/// Machine-readable run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalErrors {
    pub e0: f64,
    pub linf_l2: f64,
    pub l2_l2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccumulatorReport {
    pub e_coarsen_inf: f64,
    pub e_time_inf: f64,
    pub e_space_inf: f64,
    pub e_coarsen_2: f64,
    pub e_time_2: f64,
    pub e_space_2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub example: String,
    pub r: usize,
    pub mode: String,
    pub final_errors: FinalErrors,
    pub accumulators: AccumulatorReport,
    pub total_dofs: usize,
    pub rejected_steps: usize,
}

pub fn summarize(log: &RunLog, example: &str, r: usize, mode: &str) -> Summary {
    let (linf, l2) = log.final_errors();
    let acc = &log.state.acc;
    Summary {
        example: example.to_string(),
        r,
        mode: mode.to_string(),
        final_errors: FinalErrors {
            e0: log.initial_error,
            linf_l2: linf,
            l2_l2: l2,
        },
        accumulators: AccumulatorReport {
            e_coarsen_inf: acc.e_coarsen(NormFlavor::LinfL2),
            e_time_inf: acc.e_time(NormFlavor::LinfL2),
            e_space_inf: acc.e_space(NormFlavor::LinfL2),
            e_coarsen_2: acc.e_coarsen(NormFlavor::L2L2),
            e_time_2: acc.e_time(NormFlavor::L2L2),
            e_space_2: acc.e_space(NormFlavor::L2L2),
        },
        total_dofs: log.total_dofs,
        rejected_steps: log.rejected_steps,
    }
}

/// Write the per-level table, each level's step log, and the summary of the
/// finest computed level.
pub fn emit_uniform_report(report: &StudyReport, spec: &UniformStudySpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("study.csv"), study_csv(&report.rows))?;
    for (row, log) in report.rows.iter().zip(&report.logs) {
        std::fs::write(dir.join(format!("steps_level{}.csv", row.level)), log.csv())?;
    }
    if let Some(last) = report.logs.last() {
        let summary = summarize(last, spec.example.name(), spec.degree, "uniform");
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
    }
    Ok(())
}

/// Write the step log, summary, and (when computed) the pairing record.
pub fn emit_adaptive_report(report: &AdaptiveStudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("steps.csv"), report.log.csv())?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&report.summary).expect("summary serializes"),
    )?;
    if let Some(p) = &report.paired {
        std::fs::write(
            dir.join("pairing.json"),
            serde_json::to_string_pretty(p).expect("pairing serializes"),
        )?;
    }
    Ok(())
}
