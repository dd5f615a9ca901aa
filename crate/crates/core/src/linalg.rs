//! Dense factorizations used by the solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const BLOCK: usize = 96;

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Right-looking blocked algorithm; trailing updates go through gemm so the
/// bulk of the flops run in the optimized matrix-multiply kernel.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn new(mut a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Factorization("cholesky of a non-square matrix".into()));
        }
        let mut k = 0;
        while k < n {
            let b = BLOCK.min(n - k);
            factor_diagonal_block(&mut a, k, b)?;
            let rest = n - k - b;
            if rest > 0 {
                let l11 = a.view((k, k), (b, b)).lower_triangle();
                let mut panel_t = a.view((k + b, k), (rest, b)).transpose();
                if !l11.solve_lower_triangular_mut(&mut panel_t) {
                    return Err(Error::Factorization("singular diagonal block".into()));
                }
                let panel = panel_t.transpose();
                a.view_mut((k + b, k), (rest, b)).copy_from(&panel);
                // lower part of the trailing matrix only
                let mut j = 0;
                while j < rest {
                    let w = BLOCK.min(rest - j);
                    let rows = rest - j;
                    let lhs = panel.view((j, 0), (rows, b));
                    let rhs = panel.view((j, 0), (w, b));
                    let mut target = a.view_mut((k + b + j, k + b + j), (rows, w));
                    target.gemm(-1.0, &lhs, &rhs.transpose(), 1.0);
                    j += w;
                }
            }
            k += b;
        }
        a.fill_upper_triangle(0.0, 1);
        Ok(Cholesky { l: a })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_mut(&mut x);
        x
    }

    pub fn solve_mut(&self, x: &mut DVector<f64>) {
        self.l.solve_lower_triangular_mut(x);
        self.l.tr_solve_lower_triangular_mut(x);
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

fn factor_diagonal_block(a: &mut DMatrix<f64>, k: usize, b: usize) -> Result<()> {
    for j in 0..b {
        let jj = k + j;
        let mut s = a[(jj, jj)];
        for p in k..jj {
            s -= a[(jj, p)] * a[(jj, p)];
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Factorization(format!("matrix not positive definite (pivot {s:e} at {jj})")));
        }
        let ljj = s.sqrt();
        a[(jj, jj)] = ljj;
        for i in jj + 1..k + b {
            let mut t = a[(i, jj)];
            for p in k..jj {
                t -= a[(i, p)] * a[(jj, p)];
            }
            a[(i, jj)] = t / ljj;
        }
    }
    Ok(())
}

/// Mirror the lower triangle onto the upper one, making the matrix exactly
/// symmetric.
pub fn symmetrize_from_lower(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in j + 1..n {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// Solve a general square system with partial-pivoting LU.
pub fn lu_solve(a: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = a.lu();
    lu.solve(b).ok_or_else(|| Error::Factorization("singular matrix in LU solve".into()))
}
