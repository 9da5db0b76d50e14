//! Marking, mesh coarsening, and the two adaptive time-stepping drivers.
//!
//! The drivers advance the backward Euler scheme while keeping three running
//! indicator families (coarsening, time, space) below user tolerances. The
//! implicit driver repeats a step with half the step size until its local
//! time indicator fits; the explicit driver never repeats and instead rescales
//! the next step by √2.

use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::estimators::{
    coarsening_estimators, data_estimators, elliptic_estimate, extra_space_estimator,
    g_l2_difference_sq, iei, time_estimators, EllipticIndicatorField, ErrorAccumulator,
    EstimatorConstants, EstimatorState, EtaTildeMode, NormFlavor, StepEstimators, StepRecord,
    CSV_HEADER,
};
use crate::forms::{
    assemble_stiffness, backward_euler_step, g_initial, g_representation, time_averaged_load,
    GRep, PenaltyConfig, SpaceFn, SpaceTimeFn,
};
use crate::mesh::{ElemPath, Mesh};
use crate::quadrature::default_volume_degree;
use crate::space::{project_callable, ref_to_physical, DgSpace, FeFunction};
use crate::quadrature;

/// Relative slack when deciding whether the trajectory has reached the final
/// time; avoids a spurious last step of roundoff length.
const TIME_REL_EPS: f64 = 1e-12;

/// Tolerances and step-size parameters shared by the adaptive drivers.
///
/// In the L∞(L²) flavor the per-step time indicator includes the extra space
/// term, which in per-step mode equals the squared space indicator. The space
/// loop therefore has to aim below the time tolerance — keep `tol_space`
/// at most about half of `tol_time`, or the implicit driver can end up
/// rejecting a step that no amount of step shortening will fix.
#[derive(Debug, Clone)]
pub struct AdaptiveConfig {
    /// Acceptance threshold for the per-step time indicator.
    pub tol_time: f64,
    /// Growth threshold of the explicit driver (steps below it lengthen).
    pub tol_time_min: f64,
    /// Target for the space indicator inside each step's refinement loop.
    pub tol_space: f64,
    /// Coarsening threshold, relative to the mean local indicator.
    pub tol_coarse: f64,
    /// Interpolation tolerance for the initial iterate.
    pub tol_initial: f64,
    /// First step size; also sets the underflow floor `lambda0 / 2^max_halvings`.
    pub lambda0: f64,
    pub final_time: f64,
    /// Dörfler bulk fraction.
    pub xi_refine: f64,
    /// Cap on refine iterations inside one step (and on initial refinement).
    pub max_space_iters: usize,
    /// Number of halvings after which a rejected step aborts the run.
    pub max_halvings: u32,
    pub eta_tilde: EtaTildeMode,
    /// Which norm flavor drives acceptance and the reported accumulations.
    pub norm: NormFlavor,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            tol_time: 1e-2,
            tol_time_min: 2.5e-3,
            tol_space: 5e-3,
            tol_coarse: 0.1,
            tol_initial: 5e-3,
            lambda0: 1e-2,
            final_time: 1.0,
            xi_refine: 0.75,
            max_space_iters: 8,
            max_halvings: 20,
            eta_tilde: EtaTildeMode::PerStep,
            norm: NormFlavor::LinfL2,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_time", self.tol_time),
            ("tol_time_min", self.tol_time_min),
            ("tol_space", self.tol_space),
            ("tol_initial", self.tol_initial),
            ("lambda0", self.lambda0),
            ("final_time", self.final_time),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() && v != f64::INFINITY {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.tol_coarse >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tol_coarse must be nonnegative, got {}",
                self.tol_coarse
            )));
        }
        if self.tol_time_min >= self.tol_time {
            return Err(Error::InvalidArgument(format!(
                "tol_time_min = {} must stay below tol_time = {}",
                self.tol_time_min, self.tol_time
            )));
        }
        if !(self.xi_refine > 0.0 && self.xi_refine <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "xi_refine must lie in (0, 1], got {}",
                self.xi_refine
            )));
        }
        Ok(())
    }

    fn lambda_floor(&self) -> f64 {
        self.lambda0 * (0.5f64).powi(self.max_halvings as i32)
    }
}

/// The continuous problem a driver integrates: initial state, source term,
/// and optionally the exact solution for error reporting.
#[derive(Clone)]
pub struct EvolutionProblem {
    pub initial: SpaceFn,
    pub forcing: SpaceTimeFn,
    pub exact: Option<SpaceTimeFn>,
}

/// One accepted step of a driver run.
#[derive(Debug, Clone)]
pub struct LogEntry {
    pub step: StepRecord,
    /// Rejected attempts that preceded this acceptance.
    pub rejections: usize,
    /// Wall-clock seconds for the step including its rejected attempts.
    pub wall_seconds: f64,
}

/// Full history of a driver run.
#[derive(Clone)]
pub struct RunLog {
    /// Entry 0 describes the initial iterate (zero step length).
    pub entries: Vec<LogEntry>,
    pub rejected_steps: usize,
    /// Linear systems solved, counting space-loop and rejected attempts.
    pub solves: usize,
    /// Σₙ dofs over the accepted trajectory, initial iterate included.
    pub total_dofs: usize,
    /// Steps whose refinement loop hit `max_space_iters` above tolerance.
    pub unconverged_space_steps: usize,
    /// L² interpolation error of the initial iterate.
    pub initial_error: f64,
    pub state: EstimatorState,
    pub errors: Option<ErrorAccumulator>,
    pub norm: NormFlavor,
    /// Final iterate of the run.
    pub u_final: FeFunction,
}

impl RunLog {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push_str(",rejections,wall_seconds\n");
        for e in &self.entries {
            out.push_str(&e.step.csv_line());
            out.push_str(&format!(",{},{:.3e}\n", e.rejections, e.wall_seconds));
        }
        out
    }

    /// Final (L∞(L²), L²(L²)) errors; NaN when no exact solution was given.
    pub fn final_errors(&self) -> (f64, f64) {
        match &self.errors {
            Some(a) => (a.linf_l2, a.l2_l2_sq.sqrt()),
            None => (f64::NAN, f64::NAN),
        }
    }

    pub fn sum_lambda(&self) -> f64 {
        self.entries.iter().map(|e| e.step.lambda).sum()
    }

    /// Smallest accepted step size (entries after the initial one).
    pub fn min_lambda(&self) -> f64 {
        self.entries[1..]
            .iter()
            .map(|e| e.step.lambda)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Dörfler bulk marking. Walks the indicators in descending order (ties by
/// element id) and keeps marking until the running sum has crossed
/// `xi` times the total — the crossing element is included. An all-zero
/// field selects nothing.
pub fn dorfler_mark(indicators: &[f64], xi: f64) -> Vec<usize> {
    let total: f64 = indicators.iter().sum();
    let target = xi * total;
    let mut order: Vec<usize> = (0..indicators.len()).collect();
    order.sort_by(|&a, &b| {
        indicators[b]
            .partial_cmp(&indicators[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut sum = 0.0;
    let mut marked = Vec::new();
    for k in order {
        if sum >= target {
            break;
        }
        sum += indicators[k];
        marked.push(k);
    }
    marked
}

/// Merge element pairs whose indicators fall below `tol_coarse` times the
/// mean local indicator. A zero tolerance disables coarsening; elements
/// without a mergeable sibling are left alone.
pub fn space_coarsening(indicators: &[f64], tol_coarse: f64, mesh: &Mesh) -> Result<Mesh> {
    if indicators.len() != mesh.n_elems() {
        return Err(Error::InvalidArgument(format!(
            "{} indicators for a mesh with {} elements",
            indicators.len(),
            mesh.n_elems()
        )));
    }
    let total: f64 = indicators.iter().sum();
    let threshold = tol_coarse * total / mesh.n_elems() as f64;
    let marked: Vec<ElemPath> = indicators
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v < threshold)
        .map(|(k, _)| mesh.elem(k).path)
        .collect();
    if marked.is_empty() {
        return Ok(mesh.clone());
    }
    mesh.coarsen(&marked)
}

/// Output of the per-step space loop.
pub struct SpaceStep {
    pub u: FeFunction,
    /// Projection of the previous iterate onto the accepted mesh.
    pub projected_prev: FeFunction,
    pub g: GRep,
    pub indicator: EllipticIndicatorField,
    /// Solve-estimate rounds taken.
    pub iterations: usize,
    /// Whether the space indicator reached `tol_space`.
    pub converged: bool,
    pub solves: usize,
}

/// One backward Euler step with mesh adaptation: coarsen by the previous
/// step's local indicators, then solve / estimate / mark / refine until the
/// space indicator fits the tolerance or the iteration cap is reached.
pub fn space_adaptivity(
    u_prev: &FeFunction,
    f_tilde: &SpaceFn,
    lambda: f64,
    coarsen_from: Option<&[f64]>,
    pen: &PenaltyConfig,
    consts: &EstimatorConstants,
    config: &AdaptiveConfig,
) -> Result<SpaceStep> {
    let degree = u_prev.space().degree();
    let quad = default_volume_degree(degree);
    let mut current: Arc<Mesh> = match coarsen_from {
        Some(ind) => Arc::new(space_coarsening(
            ind,
            config.tol_coarse,
            u_prev.space().mesh(),
        )?),
        None => u_prev.space().mesh().clone(),
    };
    let mut iterations = 0;
    let mut solves = 0;
    loop {
        let space = DgSpace::new(current.clone(), degree)?;
        let step = backward_euler_step(u_prev, lambda, f_tilde, &space, pen)?;
        solves += 1;
        iterations += 1;
        let g = g_representation(&step, f_tilde.clone());
        let field = elliptic_estimate(&step.u, &g, pen, consts, quad)?;
        let converged = field.total <= config.tol_space;
        if converged || iterations >= config.max_space_iters {
            return Ok(SpaceStep {
                u: step.u,
                projected_prev: step.projected_prev,
                g,
                indicator: field,
                iterations,
                converged,
                solves,
            });
        }
        let marked = dorfler_mark(&field.local, config.xi_refine);
        if marked.is_empty() {
            return Ok(SpaceStep {
                u: step.u,
                projected_prev: step.projected_prev,
                g,
                indicator: field,
                iterations,
                converged,
                solves,
            });
        }
        let paths: Vec<ElemPath> = marked.iter().map(|&k| current.elem(k).path).collect();
        current = Arc::new(current.bisect(&paths)?);
    }
}

/// Interpolate the initial state, refining where the local interpolation
/// error concentrates, until its global L² error fits the tolerance.
/// Returns the projected iterate and the achieved error.
pub fn initial_space_adaptivity(
    u0: &SpaceFn,
    mesh0: &Mesh,
    degree: usize,
    xi_refine: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(FeFunction, f64)> {
    let quad = default_volume_degree(degree);
    let rule = quadrature::triangle_rule(quad.min(20))?;
    let mut current = Arc::new(mesh0.clone());
    let mut iters = 0;
    loop {
        let space = DgSpace::new(current.clone(), degree)?;
        let proj = project_callable(&space, |x, y| u0(x, y), quad)?;
        let per_elem: Vec<f64> = (0..current.n_elems())
            .map(|k| {
                let coords = current.elem_coords(k);
                let jac = 2.0 * current.elem(k).area;
                let mut acc = 0.0;
                for (p, &w) in rule.points.iter().zip(&rule.weights) {
                    let xy = ref_to_physical(&coords, *p);
                    let d = u0(xy[0], xy[1]) - proj.eval_in(k, xy[0], xy[1]).value;
                    acc += w * jac * d * d;
                }
                acc
            })
            .collect();
        let err = per_elem.iter().sum::<f64>().sqrt();
        iters += 1;
        if err <= tol || iters >= max_iters {
            return Ok((proj, err));
        }
        let marked = dorfler_mark(&per_elem, xi_refine);
        if marked.is_empty() {
            return Ok((proj, err));
        }
        let paths: Vec<ElemPath> = marked.iter().map(|&k| current.elem(k).path).collect();
        current = Arc::new(current.bisect(&paths)?);
    }
}

/// Everything a driver computes while attempting one step at a given size.
struct Attempt {
    space_step: SpaceStep,
    est: StepEstimators,
    /// The per-step time indicator in the configured norm flavor.
    e_time_step: f64,
}

#[allow(clippy::too_many_arguments)]
fn attempt_step(
    u_prev: &FeFunction,
    g_prev: &GRep,
    problem: &EvolutionProblem,
    t: f64,
    lambda: f64,
    coarsen_from: Option<&[f64]>,
    pen: &PenaltyConfig,
    consts: &EstimatorConstants,
    config: &AdaptiveConfig,
    state: &EstimatorState,
) -> Result<Attempt> {
    let f_tilde = time_averaged_load(problem.forcing.clone(), t, lambda)?;
    let sstep = space_adaptivity(u_prev, &f_tilde, lambda, coarsen_from, pen, consts, config)?;
    let quad = default_volume_degree(u_prev.space().degree());
    let (gamma_inf, gamma_2) =
        coarsening_estimators(u_prev, &sstep.projected_prev, lambda, state.hist_gamma);
    let g_diff = g_l2_difference_sq(&sstep.g, g_prev, quad)?;
    let (eta_inf, eta_2) = time_estimators(g_diff, lambda, state.hist_eta);
    let forcing = problem.forcing.clone();
    let (beta_inf, beta_2) = data_estimators(
        &move |x: f64, y: f64, tt: f64| forcing(x, y, tt),
        &f_tilde,
        sstep.u.space(),
        t,
        lambda,
        quad,
    )?;
    let eta_tilde = extra_space_estimator(
        &sstep.u,
        u_prev,
        &sstep.g,
        g_prev,
        pen,
        consts,
        config.eta_tilde,
        quad,
    )?;
    let est = StepEstimators {
        gamma_inf,
        gamma_2,
        eta_inf,
        eta_2,
        beta_inf,
        beta_2,
        eta_tilde,
        space_indicator: sstep.indicator.total,
    };
    let e_time_step = match config.norm {
        NormFlavor::LinfL2 => ((eta_inf + beta_inf) * lambda + eta_tilde).sqrt(),
        NormFlavor::L2L2 => ((eta_2 + beta_2) * lambda).sqrt(),
    };
    Ok(Attempt {
        space_step: sstep,
        est,
        e_time_step,
    })
}

/// Shared driver state after the initial interpolation.
struct DriverInit {
    u: FeFunction,
    g: GRep,
    field: EllipticIndicatorField,
    log: RunLog,
}

fn initialize_run(
    problem: &EvolutionProblem,
    mesh0: &Mesh,
    degree: usize,
    pen: &PenaltyConfig,
    consts: &EstimatorConstants,
    config: &AdaptiveConfig,
) -> Result<DriverInit> {
    config.validate()?;
    let clock = Instant::now();
    let (u0, e0) = initial_space_adaptivity(
        &problem.initial,
        mesh0,
        degree,
        config.xi_refine,
        config.tol_initial,
        config.max_space_iters,
    )?;
    let quad = default_volume_degree(degree);
    let stiffness = assemble_stiffness(u0.space(), pen)?;
    let forcing = problem.forcing.clone();
    let f_at_zero: SpaceFn = Arc::new(move |x, y| forcing(x, y, 0.0));
    let g0 = g_initial(&u0, &stiffness, f_at_zero)?;
    let field0 = elliptic_estimate(&u0, &g0, pen, consts, quad)?;
    let mut state = EstimatorState::default();
    state.seed_initial_space(field0.total);
    let errors = problem.exact.as_ref().map(|_| ErrorAccumulator::default());
    let dofs0 = u0.space().ndofs();
    let record0 = StepRecord {
        n: 0,
        t: 0.0,
        lambda: 0.0,
        est: StepEstimators {
            space_indicator: field0.total,
            ..StepEstimators::default()
        },
        e_coarsen: 0.0,
        e_time: 0.0,
        e_space: state.acc.e_space(config.norm),
        err_linf_l2: e0,
        err_l2_l2: 0.0,
        iei: iei(e0, 0.0, state.acc.e_space(config.norm)).unwrap_or(f64::NAN),
        dofs: dofs0,
    };
    let log = RunLog {
        entries: vec![LogEntry {
            step: record0,
            rejections: 0,
            wall_seconds: clock.elapsed().as_secs_f64(),
        }],
        rejected_steps: 0,
        solves: 0,
        total_dofs: dofs0,
        unconverged_space_steps: 0,
        initial_error: e0,
        state,
        errors,
        norm: config.norm,
        u_final: u0.clone(),
    };
    Ok(DriverInit {
        u: u0,
        g: g0,
        field: field0,
        log,
    })
}

/// Append an accepted step to the log and advance the driver state.
#[allow(clippy::too_many_arguments)]
fn commit_step(
    log: &mut RunLog,
    attempt: Attempt,
    problem: &EvolutionProblem,
    u_prev: &FeFunction,
    n: usize,
    t_start: f64,
    lambda: f64,
    rejections: usize,
    clock: Instant,
    config: &AdaptiveConfig,
) -> Result<(FeFunction, GRep, Vec<f64>)> {
    log.state.commit(&attempt.est, lambda);
    let quad = default_volume_degree(u_prev.space().degree());
    if let (Some(errors), Some(exact)) = (&mut log.errors, &problem.exact) {
        let e = exact.clone();
        errors.push_interval(
            u_prev,
            &attempt.space_step.u,
            &move |x: f64, y: f64, tt: f64| e(x, y, tt),
            t_start,
            lambda,
            quad,
        )?;
    }
    let (err_linf, err_l2) = match &log.errors {
        Some(a) => (a.linf_l2, a.l2_l2_sq.sqrt()),
        None => (f64::NAN, f64::NAN),
    };
    let err_for_iei = match config.norm {
        NormFlavor::LinfL2 => err_linf,
        NormFlavor::L2L2 => err_l2,
    };
    let acc = &log.state.acc;
    let dofs = attempt.space_step.u.space().ndofs();
    let record = StepRecord {
        n,
        t: t_start + lambda,
        lambda,
        est: attempt.est,
        e_coarsen: acc.e_coarsen(config.norm),
        e_time: acc.e_time(config.norm),
        e_space: acc.e_space(config.norm),
        err_linf_l2: err_linf,
        err_l2_l2: err_l2,
        iei: iei(err_for_iei, acc.e_time(config.norm), acc.e_space(config.norm))
            .unwrap_or(f64::NAN),
        dofs,
    };
    log.entries.push(LogEntry {
        step: record,
        rejections,
        wall_seconds: clock.elapsed().as_secs_f64(),
    });
    log.rejected_steps += rejections;
    log.solves += attempt.space_step.solves;
    log.total_dofs += dofs;
    if !attempt.space_step.converged {
        log.unconverged_space_steps += 1;
    }
    let indicators = attempt.space_step.indicator.local.clone();
    log.u_final = attempt.space_step.u.clone();
    Ok((attempt.space_step.u, attempt.space_step.g, indicators))
}

/// Implicit step-size control: a step whose time indicator exceeds the
/// tolerance is thrown away and retried with half the step size; each
/// acceptance doubles the next step. Aborts when the size falls below
/// `lambda0 / 2^max_halvings`.
pub fn implicit_time_step_control(
    problem: &EvolutionProblem,
    mesh0: &Mesh,
    degree: usize,
    pen: &PenaltyConfig,
    config: &AdaptiveConfig,
) -> Result<RunLog> {
    let consts = EstimatorConstants::default();
    let init = initialize_run(problem, mesh0, degree, pen, &consts, config)?;
    let mut log = init.log;
    let mut u_prev = init.u;
    let mut g_prev = init.g;
    let mut coarsen_ind = Some(init.field.local.clone());
    let floor = config.lambda_floor();
    let mut lambda_next = config.lambda0;
    let mut t = 0.0;
    let mut n = 1;
    while config.final_time - t > TIME_REL_EPS * config.final_time {
        let clock = Instant::now();
        let mut lambda = lambda_next.min(config.final_time - t);
        let mut rejections = 0;
        loop {
            let attempt = attempt_step(
                &u_prev, &g_prev, problem, t, lambda,
                coarsen_ind.as_deref(), pen, &consts, config, &log.state,
            )?;
            if attempt.e_time_step > config.tol_time {
                log.solves += attempt.space_step.solves;
                rejections += 1;
                lambda *= 0.5;
                if lambda < floor {
                    return Err(Error::TimeStepUnderflow { lambda, floor });
                }
                continue;
            }
            let (u, g, ind) = commit_step(
                &mut log, attempt, problem, &u_prev, n, t, lambda, rejections, clock, config,
            )?;
            u_prev = u;
            g_prev = g;
            coarsen_ind = Some(ind);
            t += lambda;
            lambda_next = 2.0 * lambda;
            break;
        }
        n += 1;
    }
    Ok(log)
}

/// Explicit step-size control: every step is kept; the next step shrinks by
/// √2 when the indicator overshoots `tol_time`, grows by √2 when it falls
/// below `tol_time_min`, and is carried over otherwise. Tolerance
/// satisfaction is therefore best-effort, never guaranteed.
pub fn explicit_time_step_control(
    problem: &EvolutionProblem,
    mesh0: &Mesh,
    degree: usize,
    pen: &PenaltyConfig,
    config: &AdaptiveConfig,
) -> Result<RunLog> {
    let consts = EstimatorConstants::default();
    let init = initialize_run(problem, mesh0, degree, pen, &consts, config)?;
    let mut log = init.log;
    let mut u_prev = init.u;
    let mut g_prev = init.g;
    let mut coarsen_ind = Some(init.field.local.clone());
    let floor = config.lambda_floor();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut lambda_next = config.lambda0;
    let mut t = 0.0;
    let mut n = 1;
    while config.final_time - t > TIME_REL_EPS * config.final_time {
        let clock = Instant::now();
        let lambda = lambda_next.min(config.final_time - t);
        let attempt = attempt_step(
            &u_prev, &g_prev, problem, t, lambda,
            coarsen_ind.as_deref(), pen, &consts, config, &log.state,
        )?;
        let e_time_step = attempt.e_time_step;
        let (u, g, ind) = commit_step(
            &mut log, attempt, problem, &u_prev, n, t, lambda, 0, clock, config,
        )?;
        u_prev = u;
        g_prev = g;
        coarsen_ind = Some(ind);
        t += lambda;
        lambda_next = if e_time_step > config.tol_time {
            lambda / sqrt2
        } else if e_time_step < config.tol_time_min {
            lambda * sqrt2
        } else {
            lambda
        };
        if lambda_next < floor {
            return Err(Error::TimeStepUnderflow {
                lambda: lambda_next,
                floor,
            });
        }
        n += 1;
    }
    Ok(log)
}
