//! Interior-penalty bilinear form for the bi-Laplacian, the discrete
//! elliptic operator it induces, and the backward Euler step built on both.
//!
//! The form on a broken polynomial space is
//!
//! ```text
//! B(w, v) = ∫_Ω Δw Δv
//!         + Σ_edges ∫ {{∇Δw}}·[[v]] + {{∇Δv}}·[[w]]
//!                   − {{Δw}} [[∇v]] − {{Δv}} [[∇w]]
//!                   + σ [[w]]·[[v]] + ξ [[∇w]] [[∇v]]
//! ```
//!
//! with value jumps vector-valued ([[v]] = v⁺n⁺ + v⁻n⁻), normal-derivative
//! jumps scalar, and averages plain means (one-sided on the boundary). The
//! penalties scale as σ = σ₀ 𝐡⁻³ and ξ = ξ₀ 𝐡⁻¹ in the face size 𝐡.

use std::sync::Arc;

use rayon::prelude::*;

use crate::linalg::{self, CooBuilder, CsrMatrix};
use crate::quadrature::{self, default_volume_degree};
use crate::space::{project_callable, ref_to_physical, BasisEval, DgSpace, FeFunction, MAX_LOCAL_DIM};
use crate::{Error, Result};

/// Function of space alone, shareable across threads.
pub type SpaceFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Function of space and time.
pub type SpaceTimeFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Relative residual target for the iterative solver path.
pub const DEFAULT_SOLVE_TOL: f64 = 1e-10;

/// Penalty coefficients of the form. `sigma0` weights value jumps, `xi0`
/// normal-derivative jumps; both must be positive for coercivity.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyConfig {
    pub sigma0: f64,
    pub xi0: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig { sigma0: 20.0, xi0: 20.0 }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma0 > 0.0 && self.xi0 > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "penalty coefficients must be positive, got sigma0 = {}, xi0 = {}",
                self.sigma0, self.xi0
            )))
        }
    }

    /// σ(𝐡) = σ₀ 𝐡⁻³
    pub fn sigma(&self, h: f64) -> f64 {
        self.sigma0 / (h * h * h)
    }

    /// ξ(𝐡) = ξ₀ 𝐡⁻¹
    pub fn xi(&self, h: f64) -> f64 {
        self.xi0 / h
    }
}

/// Per-side trace factors of every local basis function at one edge point.
/// `jmp`/`jgr` carry the side sign of the jump, `avl`/`agl` the averaging
/// weight, so form entries are plain products of these.
#[derive(Clone)]
struct SideFactors {
    jmp: [f64; MAX_LOCAL_DIM],
    jgr: [f64; MAX_LOCAL_DIM],
    avl: [f64; MAX_LOCAL_DIM],
    agl: [f64; MAX_LOCAL_DIM],
}

impl SideFactors {
    fn new() -> Self {
        SideFactors {
            jmp: [0.0; MAX_LOCAL_DIM],
            jgr: [0.0; MAX_LOCAL_DIM],
            avl: [0.0; MAX_LOCAL_DIM],
            agl: [0.0; MAX_LOCAL_DIM],
        }
    }

    fn fill(&mut self, ev: &BasisEval, n: [f64; 2], sign: f64, avg: f64) {
        for i in 0..ev.n {
            self.jmp[i] = sign * ev.val[i];
            self.jgr[i] = sign * (ev.gx[i] * n[0] + ev.gy[i] * n[1]);
            self.avl[i] = avg * ev.lap[i];
            self.agl[i] = avg * (ev.glx[i] * n[0] + ev.gly[i] * n[1]);
        }
    }
}

/// Accumulate the quadrature-point contribution into a dense local block.
/// Grouping the six terms pairwise keeps the block bitwise symmetric.
fn accumulate_edge_block(
    block: &mut [f64],
    nl: usize,
    w: f64,
    sigma: f64,
    xi: f64,
    rows: &SideFactors,
    cols: &SideFactors,
) {
    for i in 0..nl {
        for j in 0..nl {
            let consistency = cols.agl[j] * rows.jmp[i] + rows.agl[i] * cols.jmp[j];
            let adjoint = cols.avl[j] * rows.jgr[i] + rows.avl[i] * cols.jgr[j];
            let penalty = sigma * (cols.jmp[j] * rows.jmp[i]) + xi * (cols.jgr[j] * rows.jgr[i]);
            block[i * nl + j] += w * ((consistency - adjoint) + penalty);
        }
    }
}

struct EdgeBlocks {
    b00: Vec<f64>,
    /// Off-diagonal couple (rows in side 0, cols in side 1); present iff interior.
    b01: Option<Vec<f64>>,
    b11: Option<Vec<f64>>,
}

/// Assemble the stiffness matrix of the interior-penalty form on `space`.
/// Deterministic: per-entity blocks are computed in parallel but merged in a
/// fixed order, and the result is bitwise symmetric.
pub fn assemble_stiffness(space: &Arc<DgSpace>, pen: &PenaltyConfig) -> Result<CsrMatrix> {
    pen.validate()?;
    let mesh = space.mesh().clone();
    let nl = space.dim_local();
    let n = space.ndofs();
    let vol_rule = quadrature::triangle_rule(2 * space.degree())?;
    let edge_rule = quadrature::edge_rule(2 * space.degree() + 2)?;

    let vol_blocks: Vec<Vec<f64>> = (0..mesh.n_elems())
        .into_par_iter()
        .map(|k| {
            let coords = mesh.elem_coords(k);
            let jac = 2.0 * mesh.elem(k).area;
            let mut block = vec![0.0; nl * nl];
            let mut ev = BasisEval::default();
            for (p, &w) in vol_rule.points.iter().zip(&vol_rule.weights) {
                let xy = ref_to_physical(&coords, *p);
                space.basis_at(k, xy[0], xy[1], &mut ev);
                let wj = w * jac;
                for i in 0..nl {
                    for j in 0..nl {
                        block[i * nl + j] += wj * (ev.lap[i] * ev.lap[j]);
                    }
                }
            }
            block
        })
        .collect();

    let edge_blocks: Vec<EdgeBlocks> = mesh
        .edges()
        .par_iter()
        .map(|e| {
            let normal = space.edge_normal(e);
            let hf = mesh.face_weight(e);
            let sigma = pen.sigma(hf);
            let xi = pen.xi(hf);
            let a = mesh.vert(e.v[0]);
            let b = mesh.vert(e.v[1]);
            let k0 = e.elems[0] as usize;
            let mut ev = BasisEval::default();
            let mut f0 = SideFactors::new();
            let mut b00 = vec![0.0; nl * nl];
            if e.boundary {
                for (t, &w) in edge_rule.points.iter().zip(&edge_rule.weights) {
                    let x = a[0] + t * (b[0] - a[0]);
                    let y = a[1] + t * (b[1] - a[1]);
                    space.basis_at(k0, x, y, &mut ev);
                    f0.fill(&ev, normal, 1.0, 1.0);
                    accumulate_edge_block(&mut b00, nl, w * e.len, sigma, xi, &f0, &f0);
                }
                EdgeBlocks { b00, b01: None, b11: None }
            } else {
                let k1 = e.elems[1] as usize;
                let mut f1 = SideFactors::new();
                let mut b01 = vec![0.0; nl * nl];
                let mut b11 = vec![0.0; nl * nl];
                for (t, &w) in edge_rule.points.iter().zip(&edge_rule.weights) {
                    let x = a[0] + t * (b[0] - a[0]);
                    let y = a[1] + t * (b[1] - a[1]);
                    space.basis_at(k0, x, y, &mut ev);
                    f0.fill(&ev, normal, 1.0, 0.5);
                    space.basis_at(k1, x, y, &mut ev);
                    f1.fill(&ev, normal, -1.0, 0.5);
                    let wl = w * e.len;
                    accumulate_edge_block(&mut b00, nl, wl, sigma, xi, &f0, &f0);
                    accumulate_edge_block(&mut b01, nl, wl, sigma, xi, &f0, &f1);
                    accumulate_edge_block(&mut b11, nl, wl, sigma, xi, &f1, &f1);
                }
                EdgeBlocks { b00, b01: Some(b01), b11: Some(b11) }
            }
        })
        .collect();

    let mut coo = CooBuilder::new(n);
    for i in 0..n {
        coo.push_structural(i, i, 0.0);
    }
    for (k, block) in vol_blocks.iter().enumerate() {
        let dofs = space.elem_dofs(k);
        coo.push_block(dofs.clone(), dofs, block);
    }
    for (e, blocks) in mesh.edges().iter().zip(&edge_blocks) {
        let d0 = space.elem_dofs(e.elems[0] as usize);
        coo.push_block(d0.clone(), d0.clone(), &blocks.b00);
        if let (Some(b01), Some(b11)) = (&blocks.b01, &blocks.b11) {
            let d1 = space.elem_dofs(e.elems[1] as usize);
            coo.push_block(d0.clone(), d1.clone(), b01);
            // mirror of the coupling block: the form is symmetric, so the
            // transpose is pushed rather than recomputed (bitwise symmetry)
            let mut b10 = vec![0.0; nl * nl];
            for i in 0..nl {
                for j in 0..nl {
                    b10[j * nl + i] = b01[i * nl + j];
                }
            }
            coo.push_block(d1.clone(), d0, &b10);
            coo.push_block(d1.clone(), d1, b11);
        }
    }
    Ok(coo.build())
}

/// Mass matrix of the space. The basis is orthonormal per element, so this is
/// the identity; kept as a function to make the time-stepping code read like
/// the scheme it implements.
pub fn assemble_mass(space: &DgSpace) -> CsrMatrix {
    CsrMatrix::identity(space.ndofs())
}

/// Load vector ℓ(φ)_i = ∫_Ω φ φ_i, i.e. the moments of φ.
pub fn assemble_load<F>(space: &Arc<DgSpace>, phi: F, quad_degree: usize) -> Result<Vec<f64>>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    Ok(project_callable(space, phi, quad_degree)?.coeffs)
}

/// Apply the discrete elliptic operator: the function A u ∈ S defined by
/// ⟨A u, v⟩ = B(u, v) for all v. With an orthonormal basis its coefficient
/// vector is just the stiffness matrix times the coefficients of u.
pub fn apply_discrete_elliptic(stiffness: &CsrMatrix, u: &FeFunction) -> FeFunction {
    FeFunction::from_coeffs(u.space().clone(), stiffness.matvec(&u.coeffs))
}

/// Solve the discrete biharmonic problem B(u, v) = ℓ(φ)(v) for all v.
/// Returns the solution together with the assembled stiffness matrix.
pub fn solve_elliptic<F>(
    space: &Arc<DgSpace>,
    phi: F,
    pen: &PenaltyConfig,
) -> Result<(FeFunction, CsrMatrix)>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    let stiffness = assemble_stiffness(space, pen)?;
    let load = assemble_load(space, phi, default_volume_degree(space.degree()))?;
    let coeffs = linalg::solve_spd(&stiffness, &load, space.dim_local(), DEFAULT_SOLVE_TOL)?;
    Ok((FeFunction::from_coeffs(space.clone(), coeffs), stiffness))
}

/// Everything one backward Euler step produces that later stages consume.
pub struct StepResult {
    /// The new iterate Uⁿ.
    pub u: FeFunction,
    /// Projection of the previous iterate onto the current space, Πⁿ Uⁿ⁻¹.
    pub projected_prev: FeFunction,
    /// Stiffness matrix on the current space (unshifted).
    pub stiffness: CsrMatrix,
    /// Projected time-averaged load Πⁿ f̃ⁿ.
    pub projected_load: FeFunction,
}

/// One backward Euler step of length `lambda` on `space`:
///
/// ```text
/// ⟨(Uⁿ − Πⁿ Uⁿ⁻¹)/λ, V⟩ + B(Uⁿ, V) = ⟨f̃ⁿ, V⟩   for all V
/// ```
///
/// `u_prev` may live on a different mesh of the same family; it is projected
/// exactly first.
pub fn backward_euler_step(
    u_prev: &FeFunction,
    lambda: f64,
    f_tilde: &SpaceFn,
    space: &Arc<DgSpace>,
    pen: &PenaltyConfig,
) -> Result<StepResult> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "time step must be positive and finite, got {lambda}"
        )));
    }
    let projected_prev = u_prev.transfer(space)?;
    let stiffness = assemble_stiffness(space, pen)?;
    let load = assemble_load(space, |x, y| f_tilde(x, y), default_volume_degree(space.degree()))?;
    let mut system = stiffness.clone();
    system.shift_diagonal(1.0 / lambda);
    let rhs: Vec<f64> = projected_prev
        .coeffs
        .iter()
        .zip(&load)
        .map(|(p, l)| p / lambda + l)
        .collect();
    // tighter than the default so downstream residual-based quantities are
    // limited by discretisation, not algebra
    let coeffs = linalg::solve_spd(&system, &rhs, space.dim_local(), 1e-12)?;
    Ok(StepResult {
        u: FeFunction::from_coeffs(space.clone(), coeffs),
        projected_prev,
        stiffness,
        projected_load: FeFunction::from_coeffs(space.clone(), load),
    })
}

/// Pointwise-evaluable representation of g = A u − Π f̃ + f̃: a finite element
/// part plus the analytic data term. The split matters because g enters error
/// indicators on meshes other than the one u lives on.
pub struct GRep {
    pub fe: FeFunction,
    pub analytic: SpaceFn,
}

impl GRep {
    /// Evaluate inside element `elem` of the mesh `fe` lives on.
    pub fn eval_in(&self, elem: usize, x: f64, y: f64) -> f64 {
        self.fe.eval_in(elem, x, y).value + (self.analytic)(x, y)
    }

    pub fn space(&self) -> &Arc<DgSpace> {
        self.fe.space()
    }
}

/// Build g = A Uⁿ − Πⁿ f̃ⁿ + f̃ⁿ from a completed step.
pub fn g_representation(step: &StepResult, f_tilde: SpaceFn) -> GRep {
    let mut coeffs = step.stiffness.matvec(&step.u.coeffs);
    for (c, l) in coeffs.iter_mut().zip(&step.projected_load.coeffs) {
        *c -= *l;
    }
    GRep {
        fe: FeFunction::from_coeffs(step.u.space().clone(), coeffs),
        analytic: f_tilde,
    }
}

/// g for the initial iterate: g⁰ = A U⁰ − Π⁰ f(·,0) + f(·,0).
pub fn g_initial(
    u0: &FeFunction,
    stiffness: &CsrMatrix,
    f_at_zero: SpaceFn,
) -> Result<GRep> {
    let space = u0.space();
    let load = assemble_load(space, |x, y| f_at_zero(x, y), default_volume_degree(space.degree()))?;
    let mut coeffs = stiffness.matvec(&u0.coeffs);
    for (c, l) in coeffs.iter_mut().zip(&load) {
        *c -= *l;
    }
    Ok(GRep {
        fe: FeFunction::from_coeffs(space.clone(), coeffs),
        analytic: f_at_zero,
    })
}

/// Time-averaged data f̃ = λ⁻¹ ∫_{t₀}^{t₀+λ} f(·,t) dt, realised with a
/// three-point Gauss rule in time (exact through degree five in t).
pub fn time_averaged_load(f: SpaceTimeFn, t0: f64, lambda: f64) -> Result<SpaceFn> {
    let rule = quadrature::time_rule(3)?;
    let nodes: Vec<(f64, f64)> = rule
        .points
        .iter()
        .zip(&rule.weights)
        .map(|(&tau, &w)| (t0 + lambda * tau, w))
        .collect();
    Ok(Arc::new(move |x, y| {
        nodes.iter().map(|&(t, w)| w * f(x, y, t)).sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn space_on(level: u8, degree: usize) -> Arc<DgSpace> {
        DgSpace::new(Arc::new(Mesh::unit_square(level).unwrap()), degree).unwrap()
    }

    fn random_fn(space: &Arc<DgSpace>, rng: &mut ChaCha8Rng) -> FeFunction {
        let coeffs = (0..space.ndofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeFunction::from_coeffs(space.clone(), coeffs)
    }

    fn quad_form(b: &CsrMatrix, w: &FeFunction, v: &FeFunction) -> f64 {
        b.matvec(&w.coeffs).iter().zip(&v.coeffs).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn penalty_scaling() {
        let pen = PenaltyConfig::default();
        assert_relative_eq!(pen.sigma(0.25), 1280.0, max_relative = 1e-14);
        assert_relative_eq!(pen.xi(0.25), 80.0, max_relative = 1e-14);
        assert!(PenaltyConfig { sigma0: 0.0, xi0: 1.0 }.validate().is_err());
        assert!(PenaltyConfig { sigma0: 1.0, xi0: -2.0 }.validate().is_err());
    }

    #[test]
    fn mass_is_identity() {
        let space = space_on(1, 2);
        let m = assemble_mass(&space);
        assert_eq!(m.nnz(), space.ndofs());
        let x: Vec<f64> = (0..space.ndofs()).map(|i| i as f64).collect();
        assert_eq!(m.matvec(&x), x);
    }

    #[test]
    fn stiffness_symmetric_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for degree in [2, 3] {
            let space = space_on(2, degree);
            let b = assemble_stiffness(&space, &PenaltyConfig::default()).unwrap();
            let scale = b.to_dense().amax();
            assert!(b.asymmetry() <= 1e-12 * scale);
            for _ in 0..10 {
                let w = random_fn(&space, &mut rng);
                assert!(quad_form(&b, &w, &w) > 0.0);
            }
        }
    }

    /// For a globally C¹ function all interior jump terms vanish, so the
    /// quadratic form reduces to the volume term plus explicit boundary
    /// integrals that can be evaluated independently by quadrature.
    #[test]
    fn energy_decomposition_global_quadratic() {
        let space = space_on(1, 2);
        let pen = PenaltyConfig::default();
        let b = assemble_stiffness(&space, &pen).unwrap();
        let w = project_callable(&space, |x, y| x * x + y * y, 8).unwrap();
        let lhs = quad_form(&b, &w, &w);

        // Δw = 4, ∇Δw = 0: boundary edges contribute
        // ∫ −2·4·(∇w·n) + σ w² + ξ (∇w·n)² ds.
        let mesh = space.mesh();
        let rule = quadrature::edge_rule(8).unwrap();
        let mut rhs = 16.0; // ∫_Ω (Δw)² over the unit square
        for e in mesh.edges().iter().filter(|e| e.boundary) {
            let n = space.edge_normal(e);
            let hf = mesh.face_weight(e);
            let (sigma, xi) = (pen.sigma(hf), pen.xi(hf));
            let a = mesh.vert(e.v[0]);
            let bb = mesh.vert(e.v[1]);
            for (t, &wq) in rule.points.iter().zip(&rule.weights) {
                let x = a[0] + t * (bb[0] - a[0]);
                let y = a[1] + t * (bb[1] - a[1]);
                let wv = x * x + y * y;
                let gn = 2.0 * x * n[0] + 2.0 * y * n[1];
                rhs += wq * e.len * (-8.0 * gn + sigma * wv * wv + xi * gn * gn);
            }
        }
        assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
    }

    /// Quadrature oracle for the full form on the two-triangle mesh: evaluate
    /// every term of B(w, v) directly from traces of w and v on both sides of
    /// each edge and compare with the assembled matrix.
    #[test]
    fn assembly_matches_trace_quadrature() {
        let mesh = Arc::new(Mesh::two_triangles().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for degree in [2, 3] {
            let space = DgSpace::new(mesh.clone(), degree).unwrap();
            let pen = PenaltyConfig::default();
            let b = assemble_stiffness(&space, &pen).unwrap();
            for _ in 0..5 {
                let w = random_fn(&space, &mut rng);
                let v = random_fn(&space, &mut rng);
                let fast = quad_form(&b, &w, &v);

                let vol_rule = quadrature::triangle_rule(2 * degree).unwrap();
                let edge_rule = quadrature::edge_rule(2 * degree + 2).unwrap();
                let mut slow = 0.0;
                for k in 0..mesh.n_elems() {
                    let coords = mesh.elem_coords(k);
                    let jac = 2.0 * mesh.elem(k).area;
                    for (p, &wq) in vol_rule.points.iter().zip(&vol_rule.weights) {
                        let xy = ref_to_physical(&coords, *p);
                        let pw = w.eval_in(k, xy[0], xy[1]);
                        let pv = v.eval_in(k, xy[0], xy[1]);
                        slow += wq * jac * pw.lap * pv.lap;
                    }
                }
                for e in mesh.edges() {
                    let n = space.edge_normal(e);
                    let hf = mesh.face_weight(e);
                    let (sigma, xi) = (pen.sigma(hf), pen.xi(hf));
                    let a = mesh.vert(e.v[0]);
                    let bb = mesh.vert(e.v[1]);
                    let k0 = e.elems[0] as usize;
                    for (t, &wq) in edge_rule.points.iter().zip(&edge_rule.weights) {
                        let x = a[0] + t * (bb[0] - a[0]);
                        let y = a[1] + t * (bb[1] - a[1]);
                        let pw0 = w.eval_in(k0, x, y);
                        let pv0 = v.eval_in(k0, x, y);
                        let term = if e.boundary {
                            let (jw, jv) = (pw0.value, pv0.value);
                            let (jgw, jgv) = (
                                pw0.grad[0] * n[0] + pw0.grad[1] * n[1],
                                pv0.grad[0] * n[0] + pv0.grad[1] * n[1],
                            );
                            let (alw, alv) = (pw0.lap, pv0.lap);
                            let (aglw, aglv) = (
                                pw0.grad_lap[0] * n[0] + pw0.grad_lap[1] * n[1],
                                pv0.grad_lap[0] * n[0] + pv0.grad_lap[1] * n[1],
                            );
                            aglw * jv + aglv * jw - alw * jgv - alv * jgw
                                + sigma * jw * jv
                                + xi * jgw * jgv
                        } else {
                            let k1 = e.elems[1] as usize;
                            let pw1 = w.eval_in(k1, x, y);
                            let pv1 = v.eval_in(k1, x, y);
                            // scalar coefficients of the jump along n = n⁺
                            let (jw, jv) = (pw0.value - pw1.value, pv0.value - pv1.value);
                            let jgw = (pw0.grad[0] - pw1.grad[0]) * n[0]
                                + (pw0.grad[1] - pw1.grad[1]) * n[1];
                            let jgv = (pv0.grad[0] - pv1.grad[0]) * n[0]
                                + (pv0.grad[1] - pv1.grad[1]) * n[1];
                            let (alw, alv) = (0.5 * (pw0.lap + pw1.lap), 0.5 * (pv0.lap + pv1.lap));
                            let aglw = 0.5
                                * ((pw0.grad_lap[0] + pw1.grad_lap[0]) * n[0]
                                    + (pw0.grad_lap[1] + pw1.grad_lap[1]) * n[1]);
                            let aglv = 0.5
                                * ((pv0.grad_lap[0] + pv1.grad_lap[0]) * n[0]
                                    + (pv0.grad_lap[1] + pv1.grad_lap[1]) * n[1]);
                            aglw * jv + aglv * jw - alw * jgv - alv * jgw
                                + sigma * jw * jv
                                + xi * jgw * jgv
                        };
                        slow += wq * e.len * term;
                    }
                }
                assert_relative_eq!(fast, slow, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn g_reduces_to_operator_for_representable_data() {
        let space = space_on(1, 2);
        let pen = PenaltyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_fn(&space, &mut rng);
        let stiffness = assemble_stiffness(&space, &pen).unwrap();
        let f_tilde: SpaceFn = Arc::new(|x, y| 1.0 + x + y);
        let load = assemble_load(&space, |x, y| 1.0 + x + y, 8).unwrap();
        let step = StepResult {
            u: u.clone(),
            projected_prev: FeFunction::zero(space.clone()),
            stiffness: stiffness.clone(),
            projected_load: FeFunction::from_coeffs(space.clone(), load),
        };
        let g = g_representation(&step, f_tilde);
        let au = apply_discrete_elliptic(&stiffness, &u);
        let scale = au.l2_norm().max(1.0);
        for k in [0usize, 3, 7] {
            let c = space.mesh().elem_coords(k);
            let p = ref_to_physical(&c, [0.3, 0.3]);
            let diff = g.eval_in(k, p[0], p[1]) - au.eval_in(k, p[0], p[1]).value;
            assert!(diff.abs() <= 1e-11 * scale, "element {k}: residual {diff}");
        }
    }

    #[test]
    fn backward_euler_satisfies_discrete_equation() {
        let space = space_on(1, 2);
        let pen = PenaltyConfig::default();
        let u_prev = project_callable(&space, |x, y| x * y * (1.0 - x), 8).unwrap();
        let f_tilde: SpaceFn = Arc::new(|x, y| (x + 2.0 * y).sin());
        let lambda = 0.05;
        let step = backward_euler_step(&u_prev, lambda, &f_tilde, &space, &pen).unwrap();

        let load = assemble_load(&space, |x, y| f_tilde(x, y), 8).unwrap();
        let bu = step.stiffness.matvec(&step.u.coeffs);
        let mut res_norm: f64 = 0.0;
        let mut rhs_norm: f64 = 0.0;
        for i in 0..space.ndofs() {
            let rhs = step.projected_prev.coeffs[i] / lambda + load[i];
            let lhs = step.u.coeffs[i] / lambda + bu[i];
            res_norm += (lhs - rhs) * (lhs - rhs);
            rhs_norm += rhs * rhs;
        }
        assert!(res_norm.sqrt() <= 1e-9 * rhs_norm.sqrt());
    }

    /// If the data equals A w for the steady solve w and the step starts at
    /// w, backward Euler reproduces w for any step size.
    #[test]
    fn steady_state_is_a_fixed_point() {
        let space = space_on(1, 2);
        let pen = PenaltyConfig::default();
        let (w, stiffness) = solve_elliptic(&space, |x, y| 1.0 + x * x + y, &pen).unwrap();
        let aw = Arc::new(apply_discrete_elliptic(&stiffness, &w));
        let f_tilde: SpaceFn = {
            let aw = aw.clone();
            Arc::new(move |x, y| aw.eval(x, y).unwrap().value)
        };
        let step = backward_euler_step(&w, 0.3, &f_tilde, &space, &pen).unwrap();
        let drift = step.u.difference(&w).l2_norm();
        assert!(drift <= 1e-8 * w.l2_norm().max(1.0), "drift {drift}");
    }

    #[test]
    fn elliptic_solve_has_small_algebraic_residual() {
        let space = space_on(2, 2);
        let pen = PenaltyConfig::default();
        let (u, stiffness) = solve_elliptic(&space, |x, y| (3.0 * x - y).cos(), &pen).unwrap();
        let load = assemble_load(&space, |x, y| (3.0 * x - y).cos(), 8).unwrap();
        let bu = stiffness.matvec(&u.coeffs);
        let res: f64 = bu.iter().zip(&load).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = load.iter().map(|l| l * l).sum::<f64>().sqrt();
        assert!(res <= 1e-9 * scale);
    }

    #[test]
    fn time_average_exact_for_quadratic_in_time() {
        let f: SpaceTimeFn = Arc::new(|x, _y, t| (1.0 + x) * t * t);
        let (t0, lambda) = (0.4, 0.125);
        let avg = time_averaged_load(f, t0, lambda).unwrap();
        // λ⁻¹ ∫ t² dt over [t₀, t₀+λ] = t₀² + t₀λ + λ²/3
        let exact = |x: f64| (1.0 + x) * (t0 * t0 + t0 * lambda + lambda * lambda / 3.0);
        for x in [0.0, 0.3, 0.9] {
            assert_relative_eq!(avg(x, 0.5), exact(x), max_relative = 1e-14);
        }
    }

    #[test]
    fn rejects_bad_step_sizes() {
        let space = space_on(0, 2);
        let f: SpaceFn = Arc::new(|_, _| 0.0);
        let u0 = FeFunction::zero(space.clone());
        assert!(backward_euler_step(&u0, 0.0, &f, &space, &PenaltyConfig::default()).is_err());
        assert!(backward_euler_step(&u0, -1.0, &f, &space, &PenaltyConfig::default()).is_err());
        assert!(backward_euler_step(&u0, f64::NAN, &f, &space, &PenaltyConfig::default()).is_err());
    }
}
