//! Jacobi-preconditioned conjugate gradients over several right-hand sides.
//!
//! Blocks are row-major `n x cols`; every column runs its own CG recurrence
//! but all columns share each operator application.

use crate::error::{Error, Result};

/// A symmetric positive-definite operator on row-major blocks.
pub trait SpdOperator {
    fn dim(&self) -> usize;

    /// `y = A x` for an `n x cols` block.
    fn apply_block(&self, x: &[f64], y: &mut [f64], cols: usize);

    /// Diagonal of `A`, used as the preconditioner. Entries must be positive.
    fn diagonal(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    /// Largest relative residual `||b - A x|| / ||b||` over the columns.
    pub relative_residual: f64,
}

/// Solve `A X = B` in place, starting from the contents of `x`.
pub fn block_pcg<A: SpdOperator + ?Sized>(
    op: &A,
    b: &[f64],
    x: &mut [f64],
    cols: usize,
    tol: f64,
    max_iterations: usize,
) -> Result<CgStats> {
    let n = op.dim();
    assert_eq!(b.len(), n * cols);
    assert_eq!(x.len(), n * cols);
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();

    let b_norm = column_norms(b, cols);
    let mut r = vec![0.0; n * cols];
    op.apply_block(x, &mut r, cols);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut active: Vec<bool> = b_norm.iter().map(|&nb| nb > 0.0).collect();
    // a zero right-hand side has the zero solution
    for (c, &act) in active.iter().enumerate() {
        if !act {
            for i in 0..n {
                x[i * cols + c] = 0.0;
                r[i * cols + c] = 0.0;
            }
        }
    }
    let rel = |r: &[f64]| -> Vec<f64> {
        column_norms(r, cols)
            .iter()
            .zip(&b_norm)
            .map(|(rn, bn)| if *bn > 0.0 { rn / bn } else { 0.0 })
            .collect()
    };
    let mut residual = rel(&r);
    for (c, act) in active.iter_mut().enumerate() {
        *act = *act && residual[c] > tol;
    }

    let mut z: Vec<f64> = r.iter().enumerate().map(|(idx, v)| v * inv_diag[idx / cols]).collect();
    let mut p = z.clone();
    let mut rz = column_dots(&r, &z, cols);
    let mut ap = vec![0.0; n * cols];
    let mut iterations = 0;

    while active.iter().any(|&a| a) {
        if iterations == max_iterations {
            return Err(Error::NoConvergence {
                solver: "conjugate gradient",
                iterations,
                residual: residual.iter().copied().fold(0.0, f64::max),
            });
        }
        iterations += 1;
        op.apply_block(&p, &mut ap, cols);
        let pap = column_dots(&p, &ap, cols);
        let alpha: Vec<f64> = (0..cols)
            .map(|c| if active[c] && pap[c] > 0.0 { rz[c] / pap[c] } else { 0.0 })
            .collect();
        for i in 0..n {
            for c in 0..cols {
                let idx = i * cols + c;
                x[idx] += alpha[c] * p[idx];
                r[idx] -= alpha[c] * ap[idx];
            }
        }
        residual = rel(&r);
        for c in 0..cols {
            if active[c] && (residual[c] <= tol || pap[c] <= 0.0) {
                active[c] = false;
            }
        }
        for (idx, zi) in z.iter_mut().enumerate() {
            *zi = r[idx] * inv_diag[idx / cols];
        }
        let rz_new = column_dots(&r, &z, cols);
        for i in 0..n {
            for c in 0..cols {
                if active[c] {
                    let idx = i * cols + c;
                    p[idx] = z[idx] + (rz_new[c] / rz[c]) * p[idx];
                }
            }
        }
        rz = rz_new;
    }
    Ok(CgStats {
        iterations,
        relative_residual: residual.iter().copied().fold(0.0, f64::max),
    })
}

fn column_norms(a: &[f64], cols: usize) -> Vec<f64> {
    column_dots(a, a, cols).into_iter().map(f64::sqrt).collect()
}

fn column_dots(a: &[f64], b: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (ra, rb) in a.chunks_exact(cols).zip(b.chunks_exact(cols)) {
        for c in 0..cols {
            out[c] += ra[c] * rb[c];
        }
    }
    out
}
