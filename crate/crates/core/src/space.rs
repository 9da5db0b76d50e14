//! Discontinuous piecewise-polynomial spaces on a mesh.
//!
//! Each element carries its own L²-orthonormal basis, built by Cholesky
//! orthonormalization of centred, h-scaled monomials (two passes, so the
//! element mass matrix is the identity to machine precision). That choice
//! makes L² projection a moment computation, makes ‖v‖_{L²} the Euclidean
//! norm of the coefficients, and keeps transfers between meshes cheap.
//!
//! Derivatives through third order are exact polynomial differentiation; the
//! element-wise bilaplacian of any function here is identically zero since
//! only degrees 2 and 3 are supported.

use crate::error::{Error, Result};
use crate::mesh::{Edge, Mesh};
use crate::quadrature::{self, TriRule};
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::sync::Arc;

/// Largest local dimension supported (degree 3 → 10 monomials).
pub const MAX_LOCAL_DIM: usize = 10;

/// Monomial exponents (a, b) for ξ^a η^b, graded by total degree.
fn exponents(r: usize) -> Vec<(u32, u32)> {
    let mut e = Vec::with_capacity((r + 1) * (r + 2) / 2);
    for d in 0..=r as u32 {
        for b in 0..=d {
            e.push((d - b, b));
        }
    }
    e
}

/// Values and derivatives of all local basis functions at one point.
#[derive(Debug, Clone)]
pub struct BasisEval {
    pub n: usize,
    pub val: [f64; MAX_LOCAL_DIM],
    pub gx: [f64; MAX_LOCAL_DIM],
    pub gy: [f64; MAX_LOCAL_DIM],
    pub lap: [f64; MAX_LOCAL_DIM],
    pub glx: [f64; MAX_LOCAL_DIM],
    pub gly: [f64; MAX_LOCAL_DIM],
}

impl Default for BasisEval {
    fn default() -> Self {
        BasisEval {
            n: 0,
            val: [0.0; MAX_LOCAL_DIM],
            gx: [0.0; MAX_LOCAL_DIM],
            gy: [0.0; MAX_LOCAL_DIM],
            lap: [0.0; MAX_LOCAL_DIM],
            glx: [0.0; MAX_LOCAL_DIM],
            gly: [0.0; MAX_LOCAL_DIM],
        }
    }
}

/// Value and derivatives of a finite element function at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PointValue {
    pub value: f64,
    pub grad: [f64; 2],
    pub lap: f64,
    pub grad_lap: [f64; 2],
}

#[derive(Debug, Clone)]
struct ElemBasis {
    centroid: [f64; 2],
    h: f64,
    /// Row i holds the monomial coefficients of basis function φ_i.
    coef: DMatrix<f64>,
}

/// Discontinuous space of fixed degree r ∈ {2, 3} on a mesh. Dofs are blocked
/// per element: global dof = element index · local dim + local index.
#[derive(Debug)]
pub struct DgSpace {
    mesh: Arc<Mesh>,
    degree: usize,
    dim_local: usize,
    exps: Vec<(u32, u32)>,
    bases: Vec<ElemBasis>,
}

fn map_to_physical(c: &[[f64; 2]; 3], p: [f64; 2]) -> [f64; 2] {
    [
        c[0][0] + (c[1][0] - c[0][0]) * p[0] + (c[2][0] - c[0][0]) * p[1],
        c[0][1] + (c[1][1] - c[0][1]) * p[0] + (c[2][1] - c[0][1]) * p[1],
    ]
}

impl DgSpace {
    pub fn new(mesh: Arc<Mesh>, degree: usize) -> Result<Arc<DgSpace>> {
        if !(2..=3).contains(&degree) {
            return Err(Error::InvalidArgument(format!(
                "polynomial degree {degree} unsupported (need 2 or 3)"
            )));
        }
        let exps = exponents(degree);
        let dim = exps.len();
        let rule = quadrature::triangle_rule(2 * degree)?;
        let bases: Vec<ElemBasis> = (0..mesh.n_elems())
            .into_par_iter()
            .map(|idx| build_elem_basis(&mesh, idx, &exps, &rule))
            .collect::<Result<_>>()?;
        Ok(Arc::new(DgSpace { mesh, degree, dim_local: dim, exps, bases }))
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim_local(&self) -> usize {
        self.dim_local
    }

    pub fn ndofs(&self) -> usize {
        self.dim_local * self.mesh.n_elems()
    }

    pub fn elem_dofs(&self, elem: usize) -> std::ops::Range<usize> {
        elem * self.dim_local..(elem + 1) * self.dim_local
    }

    /// Evaluate all basis functions of `elem` at the physical point (x, y).
    pub fn basis_at(&self, elem: usize, x: f64, y: f64, out: &mut BasisEval) {
        let eb = &self.bases[elem];
        let inv_h = 1.0 / eb.h;
        let xi = (x - eb.centroid[0]) * inv_h;
        let eta = (y - eb.centroid[1]) * inv_h;
        let r = self.degree;

        // powers of the scaled coordinates
        let mut px = [1.0; 4];
        let mut py = [1.0; 4];
        for k in 1..=r {
            px[k] = px[k - 1] * xi;
            py[k] = py[k - 1] * eta;
        }
        let pow = |p: &[f64; 4], e: i64| -> f64 {
            if e < 0 { 0.0 } else { p[e as usize] }
        };

        let n = self.dim_local;
        out.n = n;
        let (ih1, ih2, ih3) = (inv_h, inv_h * inv_h, inv_h * inv_h * inv_h);
        let mut mv = [0.0; MAX_LOCAL_DIM];
        let mut mgx = [0.0; MAX_LOCAL_DIM];
        let mut mgy = [0.0; MAX_LOCAL_DIM];
        let mut mlap = [0.0; MAX_LOCAL_DIM];
        let mut mglx = [0.0; MAX_LOCAL_DIM];
        let mut mgly = [0.0; MAX_LOCAL_DIM];
        for (j, &(a, b)) in self.exps.iter().enumerate() {
            let (a, b) = (a as i64, b as i64);
            let (af, bf) = (a as f64, b as f64);
            mv[j] = pow(&px, a) * pow(&py, b);
            mgx[j] = af * pow(&px, a - 1) * pow(&py, b) * ih1;
            mgy[j] = bf * pow(&px, a) * pow(&py, b - 1) * ih1;
            mlap[j] = (af * (af - 1.0) * pow(&px, a - 2) * pow(&py, b)
                + bf * (bf - 1.0) * pow(&px, a) * pow(&py, b - 2))
                * ih2;
            mglx[j] = (af * (af - 1.0) * (af - 2.0) * pow(&px, a - 3) * pow(&py, b)
                + af * bf * (bf - 1.0) * pow(&px, a - 1) * pow(&py, b - 2))
                * ih3;
            mgly[j] = (af * (af - 1.0) * bf * pow(&px, a - 2) * pow(&py, b - 1)
                + bf * (bf - 1.0) * (bf - 2.0) * pow(&px, a) * pow(&py, b - 3))
                * ih3;
        }
        for i in 0..n {
            let row = eb.coef.row(i);
            let (mut v, mut gx, mut gy, mut lp, mut lx, mut ly) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..n {
                let c = row[j];
                v += c * mv[j];
                gx += c * mgx[j];
                gy += c * mgy[j];
                lp += c * mlap[j];
                lx += c * mglx[j];
                ly += c * mgly[j];
            }
            out.val[i] = v;
            out.gx[i] = gx;
            out.gy[i] = gy;
            out.lap[i] = lp;
            out.glx[i] = lx;
            out.gly[i] = ly;
        }
    }

    /// Outward unit normal of `edge` as seen from its first adjacent element.
    pub fn edge_normal(&self, edge: &Edge) -> [f64; 2] {
        let a = self.mesh.vert(edge.v[0]);
        let b = self.mesh.vert(edge.v[1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        // elements are counterclockwise, so the outward normal of an edge
        // traversed in element order is the direction rotated by −90°
        [d[1] / edge.len, -d[0] / edge.len]
    }
}

fn build_elem_basis(
    mesh: &Mesh,
    idx: usize,
    exps: &[(u32, u32)],
    rule: &TriRule,
) -> Result<ElemBasis> {
    let coords = mesh.elem_coords(idx);
    let el = mesh.elem(idx);
    let centroid = [
        (coords[0][0] + coords[1][0] + coords[2][0]) / 3.0,
        (coords[0][1] + coords[1][1] + coords[2][1]) / 3.0,
    ];
    let h = el.h;
    let n = exps.len();
    let jac = 2.0 * el.area;

    let mono_at = |p: [f64; 2], out: &mut [f64]| {
        let xi = (p[0] - centroid[0]) / h;
        let eta = (p[1] - centroid[1]) / h;
        for (j, &(a, b)) in exps.iter().enumerate() {
            out[j] = xi.powi(a as i32) * eta.powi(b as i32);
        }
    };

    let gram = |coef: &DMatrix<f64>| -> DMatrix<f64> {
        let mut g = DMatrix::zeros(n, n);
        let mut m = vec![0.0; n];
        let mut phi = vec![0.0; n];
        for (p, &w) in rule.points.iter().zip(&rule.weights) {
            mono_at(map_to_physical(&coords, *p), &mut m);
            for i in 0..n {
                phi[i] = (0..n).map(|j| coef[(i, j)] * m[j]).sum();
            }
            for i in 0..n {
                for j in 0..=i {
                    g[(i, j)] += w * jac * phi[i] * phi[j];
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                g[(i, j)] = g[(j, i)];
            }
        }
        g
    };

    // two rounds of L⁻¹ make the basis orthonormal to machine precision
    let mut coef = DMatrix::identity(n, n);
    for _ in 0..2 {
        let g = gram(&coef);
        let chol = g.cholesky().ok_or_else(|| Error::Basis {
            elem: idx,
            reason: "element Gram matrix is not positive definite".into(),
        })?;
        let l = chol.l();
        coef = l
            .solve_lower_triangular(&coef)
            .ok_or_else(|| Error::Basis {
                elem: idx,
                reason: "singular Cholesky factor".into(),
            })?;
    }
    Ok(ElemBasis { centroid, h, coef })
}

/// Finite element function: a coefficient vector over a space.
#[derive(Debug, Clone)]
pub struct FeFunction {
    space: Arc<DgSpace>,
    pub coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn zero(space: Arc<DgSpace>) -> Self {
        let n = space.ndofs();
        FeFunction { space, coeffs: vec![0.0; n] }
    }

    pub fn from_coeffs(space: Arc<DgSpace>, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), space.ndofs());
        FeFunction { space, coeffs }
    }

    pub fn space(&self) -> &Arc<DgSpace> {
        &self.space
    }

    /// Evaluate inside a given element (exact polynomial evaluation).
    pub fn eval_in(&self, elem: usize, x: f64, y: f64) -> PointValue {
        let mut b = BasisEval::default();
        self.space.basis_at(elem, x, y, &mut b);
        let dofs = self.space.elem_dofs(elem);
        let c = &self.coeffs[dofs];
        let mut out = PointValue::default();
        for i in 0..b.n {
            out.value += c[i] * b.val[i];
            out.grad[0] += c[i] * b.gx[i];
            out.grad[1] += c[i] * b.gy[i];
            out.lap += c[i] * b.lap[i];
            out.grad_lap[0] += c[i] * b.glx[i];
            out.grad_lap[1] += c[i] * b.gly[i];
        }
        out
    }

    /// Evaluate at an arbitrary point of Ω (locates the containing leaf).
    pub fn eval(&self, x: f64, y: f64) -> Result<PointValue> {
        let elem = self.space.mesh().locate(x, y)?;
        Ok(self.eval_in(elem as usize, x, y))
    }

    /// L² norm over Ω — the Euclidean norm of the coefficients.
    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &FeFunction) {
        assert!(Arc::ptr_eq(&self.space, &other.space));
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += alpha * b;
        }
    }

    pub fn difference(&self, other: &FeFunction) -> FeFunction {
        assert!(Arc::ptr_eq(&self.space, &other.space));
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a - b)
            .collect();
        FeFunction { space: self.space.clone(), coeffs }
    }

    /// Orthogonal L² projection onto `target`, integrated exactly on the
    /// overlay of the two meshes.
    pub fn transfer(&self, target: &Arc<DgSpace>) -> Result<FeFunction> {
        if Arc::ptr_eq(&self.space, target) {
            return Ok(self.clone());
        }
        let src_mesh = self.space.mesh();
        let tgt_mesh = target.mesh();
        let ov = Mesh::overlay(src_mesh, tgt_mesh)?;
        let rule = quadrature::triangle_rule(self.space.degree() + target.degree())?;

        // overlay cells grouped by target element
        let mut cells: Vec<Vec<usize>> = vec![Vec::new(); tgt_mesh.n_elems()];
        for (i, cell) in ov.elems().iter().enumerate() {
            let t = tgt_mesh.leaf_ancestor(cell.path).ok_or_else(|| {
                Error::UnknownElement(cell.path.to_string())
            })?;
            cells[t as usize].push(i);
        }

        let dim = target.dim_local();
        let blocks: Vec<Vec<f64>> = (0..tgt_mesh.n_elems())
            .into_par_iter()
            .map(|t| {
                let mut acc = vec![0.0; dim];
                let mut be = BasisEval::default();
                for &ci in &cells[t] {
                    let cell = ov.elem(ci);
                    let s = src_mesh
                        .leaf_ancestor(cell.path)
                        .expect("overlay cell has a source ancestor");
                    let coords = ov.elem_coords(ci);
                    let jac = 2.0 * cell.area;
                    for (p, &w) in rule.points.iter().zip(&rule.weights) {
                        let xy = map_to_physical(&coords, *p);
                        let fval = self.eval_in(s as usize, xy[0], xy[1]).value;
                        target.basis_at(t, xy[0], xy[1], &mut be);
                        for i in 0..dim {
                            acc[i] += w * jac * fval * be.val[i];
                        }
                    }
                }
                acc
            })
            .collect();

        let mut coeffs = Vec::with_capacity(target.ndofs());
        for b in blocks {
            coeffs.extend(b);
        }
        Ok(FeFunction { space: target.clone(), coeffs })
    }
}

/// Orthogonal L² projection of a callable onto the space, by element-local
/// moments with a rule exact for `quad_degree`.
pub fn project_callable<F>(space: &Arc<DgSpace>, f: F, quad_degree: usize) -> Result<FeFunction>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    let rule = quadrature::triangle_rule(quad_degree.min(20))?;
    let mesh = space.mesh();
    let dim = space.dim_local();
    let blocks: Vec<Vec<f64>> = (0..mesh.n_elems())
        .into_par_iter()
        .map(|e| {
            let coords = mesh.elem_coords(e);
            let jac = 2.0 * mesh.elem(e).area;
            let mut acc = vec![0.0; dim];
            let mut be = BasisEval::default();
            for (p, &w) in rule.points.iter().zip(&rule.weights) {
                let xy = map_to_physical(&coords, *p);
                let fval = f(xy[0], xy[1]);
                space.basis_at(e, xy[0], xy[1], &mut be);
                for i in 0..dim {
                    acc[i] += w * jac * fval * be.val[i];
                }
            }
            acc
        })
        .collect();
    let mut coeffs = Vec::with_capacity(space.ndofs());
    for b in blocks {
        coeffs.extend(b);
    }
    for c in &coeffs {
        if !c.is_finite() {
            return Err(Error::InvalidArgument(
                "projection produced non-finite coefficients".into(),
            ));
        }
    }
    Ok(FeFunction { space: space.clone(), coeffs })
}

/// ‖f − φ‖_{L²(Ω)} for a callable φ, by element-wise quadrature.
pub fn l2_error_callable<F>(f: &FeFunction, phi: F, quad_degree: usize) -> Result<f64>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    let rule = quadrature::triangle_rule(quad_degree.min(20))?;
    let mesh = f.space().mesh();
    let parts: Vec<f64> = (0..mesh.n_elems())
        .into_par_iter()
        .map(|e| {
            let coords = mesh.elem_coords(e);
            let jac = 2.0 * mesh.elem(e).area;
            let mut acc = 0.0;
            for (p, &w) in rule.points.iter().zip(&rule.weights) {
                let xy = map_to_physical(&coords, *p);
                let d = f.eval_in(e, xy[0], xy[1]).value - phi(xy[0], xy[1]);
                acc += w * jac * d * d;
            }
            acc
        })
        .collect();
    Ok(parts.iter().sum::<f64>().sqrt())
}

/// Map a reference point to the physical triangle with the given corners.
pub fn ref_to_physical(coords: &[[f64; 2]; 3], p: [f64; 2]) -> [f64; 2] {
    map_to_physical(coords, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn space(level: u8, r: usize) -> Arc<DgSpace> {
        let mesh = Arc::new(Mesh::unit_square(level).unwrap());
        DgSpace::new(mesh, r).unwrap()
    }

    #[test]
    fn basis_orthonormal() {
        for r in [2usize, 3] {
            let sp = space(1, r);
            let rule = quadrature::triangle_rule(2 * r).unwrap();
            let mut be = BasisEval::default();
            for e in 0..sp.mesh().n_elems() {
                let coords = sp.mesh().elem_coords(e);
                let jac = 2.0 * sp.mesh().elem(e).area;
                let n = sp.dim_local();
                let mut g = vec![0.0; n * n];
                for (p, &w) in rule.points.iter().zip(&rule.weights) {
                    let xy = ref_to_physical(&coords, *p);
                    sp.basis_at(e, xy[0], xy[1], &mut be);
                    for i in 0..n {
                        for j in 0..n {
                            g[i * n + j] += w * jac * be.val[i] * be.val[j];
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert_abs_diff_eq!(g[i * n + j], want, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn quadratic_exactly_represented() {
        let sp = space(1, 2);
        let f = project_callable(&sp, |x, _| x * x, 8).unwrap();
        let pts = [[0.3, 0.2], [0.7, 0.3], [0.5, 0.9], [0.1, 0.6]];
        for p in pts {
            let v = f.eval(p[0], p[1]).unwrap();
            assert_abs_diff_eq!(v.value, p[0] * p[0], epsilon = 1e-12);
            assert_abs_diff_eq!(v.grad[0], 2.0 * p[0], epsilon = 1e-11);
            assert_abs_diff_eq!(v.lap, 2.0, epsilon = 1e-10);
            assert_abs_diff_eq!(v.grad_lap[0], 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(v.grad_lap[1], 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn cubic_grad_laplacian() {
        let sp = space(1, 3);
        let f = project_callable(&sp, |x, _| x * x * x, 8).unwrap();
        for p in [[0.3, 0.2], [0.8, 0.7]] {
            let v = f.eval(p[0], p[1]).unwrap();
            assert_abs_diff_eq!(v.value, p[0].powi(3), epsilon = 1e-11);
            assert_abs_diff_eq!(v.grad_lap[0], 6.0, epsilon = 1e-9);
            assert_abs_diff_eq!(v.grad_lap[1], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sp = space(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let coeffs: Vec<f64> = (0..sp.ndofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = FeFunction::from_coeffs(sp.clone(), coeffs);
        // stay inside one element so FD differences never cross a cut
        let e = 5usize;
        let coords = sp.mesh().elem_coords(e);
        let c = [
            (coords[0][0] + coords[1][0] + coords[2][0]) / 3.0,
            (coords[0][1] + coords[1][1] + coords[2][1]) / 3.0,
        ];
        let h = 1e-6;
        let v = f.eval_in(e, c[0], c[1]);
        let dx = (f.eval_in(e, c[0] + h, c[1]).value - f.eval_in(e, c[0] - h, c[1]).value)
            / (2.0 * h);
        let dy = (f.eval_in(e, c[0], c[1] + h).value - f.eval_in(e, c[0], c[1] - h).value)
            / (2.0 * h);
        assert!((v.grad[0] - dx).abs() <= 1e-6 * (1.0 + dx.abs()));
        assert!((v.grad[1] - dy).abs() <= 1e-6 * (1.0 + dy.abs()));
    }

    #[test]
    fn projection_idempotent_and_orthogonal() {
        let sp = space(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coeffs: Vec<f64> = (0..sp.ndofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = FeFunction::from_coeffs(sp.clone(), coeffs.clone());
        let again = project_callable(
            &sp,
            |x, y| {
                let e = sp.mesh().locate(x, y).unwrap() as usize;
                f.eval_in(e, x, y).value
            },
            8,
        )
        .unwrap();
        for (a, b) in again.coeffs.iter().zip(&coeffs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        // constants are reproduced and the residual is orthogonal
        let one = project_callable(&sp, |_, _| 1.0, 8).unwrap();
        for p in [[0.3, 0.4], [0.9, 0.1]] {
            assert_abs_diff_eq!(one.eval(p[0], p[1]).unwrap().value, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_error_order() {
        // ‖φ − Πφ‖ for a smooth function decays at order r+1 = 3
        let phi = |x: f64, y: f64| (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin();
        let mut errs = Vec::new();
        for level in [2u8, 3, 4, 5] {
            let sp = space(level, 2);
            let p = project_callable(&sp, phi, 8).unwrap();
            errs.push(l2_error_callable(&p, phi, 10).unwrap());
        }
        // bisection alternates between two element orientations, so the
        // constant oscillates level to level; measure over full h-halvings
        for w in errs.windows(3) {
            let eoc = (w[0] / w[2]).ln() / 2f64.ln();
            assert!((eoc - 3.0).abs() < 0.2, "EOC {eoc}");
        }
    }

    #[test]
    fn transfer_identity_and_nested() {
        let coarse = space(1, 2);
        let fine_mesh = {
            let marked: Vec<_> = coarse.mesh().leaf_paths().collect();
            Arc::new(coarse.mesh().bisect(&marked).unwrap())
        };
        let fine = DgSpace::new(fine_mesh, 2).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coeffs: Vec<f64> = (0..coarse.ndofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = FeFunction::from_coeffs(coarse.clone(), coeffs);

        // identity
        let same = f.transfer(&coarse).unwrap();
        assert_eq!(same.coeffs, f.coeffs);

        // refinement preserves the function pointwise
        let up = f.transfer(&fine).unwrap();
        for p in [[0.2, 0.3], [0.6, 0.7], [0.9, 0.2]] {
            let a = f.eval(p[0], p[1]).unwrap().value;
            let b = up.eval(p[0], p[1]).unwrap().value;
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(up.l2_norm(), f.l2_norm(), epsilon = 1e-12);

        // round trip down is exact for the already-coarse function
        let down = up.transfer(&coarse).unwrap();
        for (a, b) in down.coeffs.iter().zip(&f.coeffs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn transfer_to_coarser_is_orthogonal() {
        let coarse = space(1, 2);
        let fine = space(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coeffs: Vec<f64> = (0..fine.ndofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = FeFunction::from_coeffs(fine.clone(), coeffs);
        let down = f.transfer(&coarse).unwrap();
        // residual f − down must be orthogonal to the coarse space: its
        // projection onto the coarse space is exactly `down` again
        let down2 = f.transfer(&coarse).unwrap();
        for (a, b) in down.coeffs.iter().zip(&down2.coeffs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        // Pythagoras: ‖f‖² = ‖Πf‖² + ‖f−Πf‖² (norms via nested evaluation)
        let up_again = down.transfer(&fine).unwrap();
        let resid = f.difference(&up_again);
        let lhs = f.l2_norm().powi(2);
        let rhs = down.l2_norm().powi(2) + resid.l2_norm().powi(2);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }
}
