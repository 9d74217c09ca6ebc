//! Nonnegative least squares `min ||A v - b||` over `v >= 0` by the
//! Lawson-Hanson active-set method. Deterministic pivoting (largest
//! gradient, lowest index on ties) so identical inputs give bit-identical
//! solutions; the subproblems here have at most a dozen columns.

use nalgebra::{DMatrix, DVector};

fn solve_ls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let mut z = svd
        .solve(b, 1e-13)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()));
    // One step of iterative refinement tightens consistent systems to a few
    // ulps despite the penalty-row conditioning.
    let residual = b - a * &z;
    if let Ok(corr) = svd.solve(&residual, 1e-13) {
        z += corr;
    }
    z
}

pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    if n == 0 {
        return DVector::zeros(0);
    }
    let scale = 1.0 + b.amax();
    let grad_tol = 1e-11 * scale;
    let mut passive = vec![false; n];
    let mut x = DVector::zeros(n);
    for _ in 0..(3 * n + 12) {
        let residual = b - a * &x;
        let w = a.transpose() * residual;
        let mut pick: Option<usize> = None;
        for i in 0..n {
            if !passive[i] && w[i] > grad_tol && pick.is_none_or(|p| w[i] > w[p]) {
                pick = Some(i);
            }
        }
        let Some(idx) = pick else { break };
        passive[idx] = true;
        // Inner loop: restore feasibility of the passive-set solution.
        for _ in 0..(3 * n + 12) {
            let cols: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let sub = a.select_columns(cols.iter());
            let z = solve_ls(&sub, b);
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &i) in cols.iter().enumerate() {
                    x[i] = z[k];
                }
                break;
            }
            // Step toward z until the first coordinate hits zero.
            let mut alpha = f64::INFINITY;
            for (k, &i) in cols.iter().enumerate() {
                if z[k] <= 0.0 {
                    let denom = x[i] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            if !alpha.is_finite() {
                break;
            }
            for (k, &i) in cols.iter().enumerate() {
                x[i] += alpha * (z[k] - x[i]);
            }
            for &i in &cols {
                if x[i] <= 1e-14 * scale {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}
