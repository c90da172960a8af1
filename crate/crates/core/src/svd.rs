//! Truncated SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Meant for the desk-scale matrices this crate handles (a softmax layer is
//! tall and thin: `L x d` with `d` in the tens to hundreds), where a full
//! thin decomposition followed by truncation is cheap and accurate.

use crate::error::{Error, Result};
use crate::tensor::{dot, DenseMatrix};

pub const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// `rows x rank`, orthonormal columns.
    pub u: DenseMatrix,
    /// Non-negative, non-increasing.
    pub s: Vec<f64>,
    /// `rank x cols`, orthonormal rows.
    pub vt: DenseMatrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, k) = self.u.shape();
        let n = self.vt.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for r in 0..k {
                let coef = self.u.get(i, r) * self.s[r];
                for (o, v) in row.iter_mut().zip(self.vt.row(r)) {
                    *o += coef * v;
                }
            }
        }
        DenseMatrix::new(m, n, out).expect("product of finite factors")
    }
}

/// Best rank-`rank` approximation `U diag(S) Vt` of `m`.
pub fn truncated_svd(m: &DenseMatrix, rank: usize) -> Result<TruncatedSvd> {
    let (rows, cols) = m.shape();
    let min_dim = rows.min(cols);
    if rank == 0 || rank > min_dim {
        return Err(Error::InvalidArgument(format!(
            "svd rank {rank} outside 1..={min_dim} for a {rows}x{cols} matrix"
        )));
    }
    if rows < cols {
        let t = truncated_svd(&m.transpose(), rank)?;
        return Ok(TruncatedSvd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }

    // Column-major working copies: a[j] is column j of the input, v[j] column j of V.
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    const TOL: f64 = 1e-15;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { cap: MAX_SWEEPS });
    }

    let sigma: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    order.truncate(rank);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    let mut s = Vec::with_capacity(rank);
    let scale = sigma.iter().copied().fold(0.0, f64::max);
    for &j in &order {
        let sj = sigma[j];
        if sj > scale * 1e-13 {
            u_cols.push(a[j].iter().map(|x| x / sj).collect());
        } else {
            // numerically zero singular value: any unit vector orthogonal to
            // the columns chosen so far keeps U orthonormal
            u_cols.push(orthonormal_completion(&u_cols, rows));
        }
        s.push(sj);
    }

    let mut u = DenseMatrix::zeros(rows, rank);
    for (r, col) in u_cols.iter().enumerate() {
        for i in 0..rows {
            u.as_mut_slice()[i * rank + r] = col[i];
        }
    }
    let mut vt = DenseMatrix::zeros(rank, cols);
    for (r, &j) in order.iter().enumerate() {
        vt.row_mut(r).copy_from_slice(&v[j]);
    }
    Ok(TruncatedSvd { u, s, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn orthonormal_completion(basis: &[Vec<f64>], n: usize) -> Vec<f64> {
    for e in 0..n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, x) in cand.iter_mut().zip(b) {
                    *c -= proj * x;
                }
            }
        }
        let nrm = dot(&cand, &cand).sqrt();
        if nrm > 1e-6 {
            return cand.into_iter().map(|x| x / nrm).collect();
        }
    }
    unreachable!("fewer than n basis vectors always admit a completion")
}
