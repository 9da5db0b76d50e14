//! Sparse symmetric positive definite solves.
//!
//! The DG systems have element-blocked structure: dense diagonal blocks plus
//! one block per edge neighbour. Small systems go through a dense Cholesky;
//! larger ones through conjugate gradients preconditioned with the inverted
//! block diagonal, which is cheap here because the (mass-shifted) stiffness
//! matrix is well scaled in the element-orthonormal basis.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, Dyn};

/// Compressed sparse row matrix (square).
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    data: Vec<f64>,
}

/// Accumulates (row, col, value) triplets; duplicates are summed.
#[derive(Debug)]
pub struct CooBuilder {
    n: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl CooBuilder {
    pub fn new(n: usize) -> Self {
        CooBuilder { n, entries: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.n && col < self.n);
        if val != 0.0 {
            self.entries.push((row as u32, col as u32, val));
        }
    }

    /// Like `push` but keeps explicit zeros, so a structural entry is
    /// guaranteed to exist (used to seed the diagonal).
    pub fn push_structural(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.n && col < self.n);
        self.entries.push((row as u32, col as u32, val));
    }

    /// Add a dense block at the given dof offsets.
    pub fn push_block(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, block: &[f64]) {
        let nc = cols.len();
        for (i, r) in rows.clone().enumerate() {
            for (j, c) in cols.clone().enumerate() {
                self.push(r, c, block[i * nc + j]);
            }
        }
    }

    pub fn build(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut rows: Vec<u32> = Vec::with_capacity(self.entries.len());
        let mut indices = Vec::with_capacity(self.entries.len());
        let mut data: Vec<f64> = Vec::with_capacity(self.entries.len());
        for &(r, c, v) in &self.entries {
            if rows.last() == Some(&r) && indices.last() == Some(&c) {
                *data.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                indices.push(c);
                data.push(v);
            }
        }
        let mut indptr = vec![0usize; self.n + 1];
        for &r in &rows {
            indptr[r as usize + 1] += 1;
        }
        for r in 0..self.n {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix { n: self.n, indptr, indices, data }
    }
}

impl CsrMatrix {
    pub fn identity(n: usize) -> CsrMatrix {
        CsrMatrix {
            n,
            indptr: (0..=n).collect(),
            indices: (0..n as u32).collect(),
            data: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// y = A x.
    pub fn spmv(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.data[k] * x[self.indices[k] as usize];
            }
            y[r] = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.spmv(x, &mut y);
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.indices[k] as usize)] += self.data[k];
            }
        }
        m
    }

    /// Largest |a_ij − a_ji| — diagnostic for symmetry checks.
    pub fn asymmetry(&self) -> f64 {
        let d = self.to_dense();
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((d[(i, j)] - d[(j, i)]).abs());
            }
        }
        worst
    }

    /// Add `shift` to every diagonal entry (the diagonal must be present,
    /// which block assembly guarantees).
    pub fn shift_diagonal(&mut self, shift: f64) {
        for r in 0..self.n {
            let mut found = false;
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.indices[k] as usize == r {
                    self.data[k] += shift;
                    found = true;
                    break;
                }
            }
            assert!(found, "row {r} has no diagonal entry");
        }
    }
}

/// Inverted block diagonal, used as a preconditioner.
pub struct BlockJacobi {
    block: usize,
    factors: Vec<Cholesky<f64, Dyn>>,
}

impl BlockJacobi {
    pub fn new(a: &CsrMatrix, block: usize) -> Result<Self> {
        assert!(a.n % block == 0);
        let nb = a.n / block;
        let mut factors = Vec::with_capacity(nb);
        for b in 0..nb {
            let lo = b * block;
            let mut m = DMatrix::zeros(block, block);
            for i in 0..block {
                let r = lo + i;
                for k in a.indptr[r]..a.indptr[r + 1] {
                    let c = a.indices[k] as usize;
                    if (lo..lo + block).contains(&c) {
                        m[(i, c - lo)] = a.data[k];
                    }
                }
            }
            factors.push(m.cholesky().ok_or_else(|| {
                Error::Solve(format!("diagonal block {b} is not positive definite"))
            })?);
        }
        Ok(BlockJacobi { block, factors })
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for (b, f) in self.factors.iter().enumerate() {
            let lo = b * self.block;
            let mut v = nalgebra::DVector::from_column_slice(&r[lo..lo + self.block]);
            f.solve_mut(&mut v);
            z[lo..lo + self.block].copy_from_slice(v.as_slice());
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients to relative residual `tol`.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    precond: &BlockJacobi,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = a.n();
    let norm_b = dot(b, b).sqrt();
    if norm_b == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        a.spmv(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Solve(format!(
                "conjugate gradients hit a non-positive curvature direction (pᵀAp = {pap:.3e})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * norm_b {
            return Ok((x, it + 1));
        }
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Solve(format!(
        "conjugate gradients did not reach tolerance {tol:.1e} in {max_iter} iterations"
    )))
}

/// Threshold below which a dense Cholesky beats iterating.
const DENSE_LIMIT: usize = 1500;

/// Solve A x = b for SPD A, choosing dense Cholesky or preconditioned CG by
/// size. `block` is the element block size used for the preconditioner; `tol`
/// is the relative residual target of the iterative path.
pub fn solve_spd(a: &CsrMatrix, b: &[f64], block: usize, tol: f64) -> Result<Vec<f64>> {
    if a.n() <= DENSE_LIMIT {
        let dense = a.to_dense();
        let chol = dense
            .cholesky()
            .ok_or_else(|| Error::Solve("matrix is not positive definite".into()))?;
        let mut v = nalgebra::DVector::from_column_slice(b);
        chol.solve_mut(&mut v);
        Ok(v.as_slice().to_vec())
    } else {
        let pre = BlockJacobi::new(a, block)?;
        let (x, _) = pcg(a, b, &pre, tol, 200_000)?;
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, block: usize, seed: u64) -> CsrMatrix {
        // block tridiagonal SPD: diagonally dominant random blocks
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nb = n / block;
        let mut coo = CooBuilder::new(n);
        let mut off_blocks = Vec::new();
        for b in 1..nb {
            let blk: Vec<f64> = (0..block * block)
                .map(|_| rng.random_range(-0.3..0.3))
                .collect();
            off_blocks.push(blk.clone());
            for i in 0..block {
                for j in 0..block {
                    coo.push(b * block + i, (b - 1) * block + j, blk[i * block + j]);
                    coo.push((b - 1) * block + j, b * block + i, blk[i * block + j]);
                }
            }
        }
        for r in 0..n {
            coo.push(r, r, block as f64 + rng.random_range(0.0..1.0));
        }
        coo.build()
    }

    #[test]
    fn builder_sums_duplicates() {
        let mut coo = CooBuilder::new(3);
        coo.push(0, 0, 1.0);
        coo.push(0, 0, 2.0);
        coo.push(2, 1, 5.0);
        coo.push(1, 1, 1.0);
        let a = coo.build();
        assert_eq!(a.nnz(), 3);
        let y = a.matvec(&[1.0, 1.0, 1.0]);
        assert_eq!(y, vec![3.0, 1.0, 5.0]);
    }

    #[test]
    fn pcg_matches_dense() {
        let n = 60;
        let block = 6;
        let a = random_spd(n, block, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pre = BlockJacobi::new(&a, block).unwrap();
        let (x, iters) = pcg(&a, &b, &pre, 1e-12, 1000).unwrap();
        assert!(iters > 0);
        let dense = a.to_dense();
        let xd = dense.cholesky().unwrap().solve(&nalgebra::DVector::from_column_slice(&b));
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-9, "component {i}");
        }
    }

    #[test]
    fn zero_rhs_short_circuits() {
        let a = random_spd(12, 3, 4);
        let pre = BlockJacobi::new(&a, 3).unwrap();
        let (x, iters) = pcg(&a, &[0.0; 12], &pre, 1e-12, 10).unwrap();
        assert_eq!(iters, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_shift() {
        let mut a = random_spd(12, 3, 5);
        let before = a.to_dense();
        a.shift_diagonal(2.5);
        let after = a.to_dense();
        for i in 0..12 {
            assert!((after[(i, i)] - before[(i, i)] - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn solve_spd_dispatch() {
        let a = random_spd(24, 6, 6);
        let b: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let x = solve_spd(&a, &b, 6, 1e-11).unwrap();
        let r = a.matvec(&x);
        let err: f64 = r.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-10);
    }

    #[test]
    fn indefinite_rejected() {
        let mut coo = CooBuilder::new(2);
        coo.push(0, 0, 1.0);
        coo.push(1, 1, -1.0);
        let a = coo.build();
        assert!(solve_spd(&a, &[1.0, 1.0], 1, 1e-11).is_err());
    }
}
