use super::{Mat64, Rng};
use crate::error::{Error, Result};

/// Relative pivot magnitude below which a matrix is treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

/// Solves `a * x = b` for square `a` by Gaussian elimination with partial
/// pivoting. `b` may carry several right-hand sides as columns.
pub fn solve_linear(a: &Mat64, b: &Mat64) -> Result<Mat64> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch(format!("solve needs a square matrix, got {:?}", a.shape())));
    }
    if b.rows() != n {
        return Err(Error::DimMismatch {
            expected: n,
            actual: b.rows(),
        });
    }
    let k = b.cols();
    let mut lu = a.clone();
    let mut rhs = b.clone();
    let mut max_pivot = 0.0_f64;
    let mut min_pivot = f64::INFINITY;

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().total_cmp(&lu[(j, col)].abs()))
            .unwrap_or(col);
        if pivot_row != col {
            for j in 0..n {
                let tmp = lu[(col, j)];
                lu[(col, j)] = lu[(pivot_row, j)];
                lu[(pivot_row, j)] = tmp;
            }
            for j in 0..k {
                let tmp = rhs[(col, j)];
                rhs[(col, j)] = rhs[(pivot_row, j)];
                rhs[(pivot_row, j)] = tmp;
            }
        }
        let pivot = lu[(col, col)];
        max_pivot = max_pivot.max(pivot.abs());
        min_pivot = min_pivot.min(pivot.abs());
        if pivot == 0.0 || min_pivot < PIVOT_TOLERANCE * max_pivot {
            return Err(Error::RankDeficient {
                ratio: min_pivot / max_pivot.max(f64::MIN_POSITIVE),
            });
        }
        for i in col + 1..n {
            let factor = lu[(i, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            lu[(i, col)] = 0.0;
            for j in col + 1..n {
                lu[(i, j)] -= factor * lu[(col, j)];
            }
            for j in 0..k {
                rhs[(i, j)] -= factor * rhs[(col, j)];
            }
        }
    }

    let mut x = Mat64::zeros(n, k);
    for j in 0..k {
        for i in (0..n).rev() {
            let mut acc = rhs[(i, j)];
            for p in i + 1..n {
                acc -= lu[(i, p)] * x[(p, j)];
            }
            x[(i, j)] = acc / lu[(i, i)];
        }
    }
    Ok(x)
}

/// Moore–Penrose pseudo-inverse of a full-rank matrix via the normal
/// equations: `Aᵀ(AAᵀ)⁻¹` for wide/square inputs, `(AᵀA)⁻¹Aᵀ` for tall ones.
pub fn pseudo_inverse(a: &Mat64) -> Result<Mat64> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::ShapeMismatch("empty matrix".into()));
    }
    let at = a.transpose();
    if rows <= cols {
        let gram = a.matmul(&at)?;
        // (AAᵀ)⁻¹A, then transpose; the Gram matrix is symmetric.
        Ok(solve_linear(&gram, a)?.transpose())
    } else {
        let gram = at.matmul(a)?;
        solve_linear(&gram, &at)
    }
}

/// Householder QR of an `m × n` matrix with `m >= n`. Returns the full
/// `m × m` orthogonal factor and the `m × n` upper-triangular factor.
pub fn qr_householder(a: &Mat64) -> (Mat64, Mat64) {
    let (m, n) = a.shape();
    assert!(m >= n, "qr_householder expects a tall or square matrix");
    let mut r = a.clone();
    let mut q = Mat64::identity(m);
    let mut v = vec![0.0; m];

    for k in 0..n.min(m - 1) {
        let col_norm = (k..m).map(|i| r[(i, k)] * r[(i, k)]).sum::<f64>().sqrt();
        if col_norm == 0.0 {
            continue;
        }
        let alpha = if r[(k, k)] > 0.0 { -col_norm } else { col_norm };
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = if i < k { 0.0 } else { r[(i, k)] };
        }
        v[k] -= alpha;
        let vnorm2: f64 = v[k..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R <- (I - 2vvᵀ/vᵀv) R
        for j in 0..n {
            let s: f64 = (k..m).map(|i| v[i] * r[(i, j)]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..m {
                r[(i, j)] -= s * v[i];
            }
        }
        // Q <- Q (I - 2vvᵀ/vᵀv)
        for i in 0..m {
            let s: f64 = (k..m).map(|p| q[(i, p)] * v[p]).sum::<f64>() * 2.0 / vnorm2;
            for p in k..m {
                q[(i, p)] -= s * v[p];
            }
        }
    }
    for i in 1..m {
        for j in 0..i.min(n) {
            r[(i, j)] = 0.0;
        }
    }
    (q, r)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// columns of Q flipped so that R has a nonnegative diagonal.
pub fn random_orthogonal(rng: &mut Rng, n: usize) -> Mat64 {
    assert!(n >= 1);
    loop {
        let g = Mat64::gaussian(n, n, rng);
        let (mut q, r) = qr_householder(&g);
        let diag: Vec<f64> = (0..n).map(|i| r[(i, i)]).collect();
        let largest = diag.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
        if diag.iter().any(|d| d.abs() < PIVOT_TOLERANCE * largest) {
            continue;
        }
        for (j, d) in diag.iter().enumerate() {
            if *d < 0.0 {
                for i in 0..n {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        return q;
    }
}
