//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Only the singular values and right singular vectors are produced; the
//! signature pipeline never needs the left factor.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;
const ORTHO_TOL: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct RightSvd {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Column `i` pairs with `singular_values[i]`.
    pub right_vectors: DMatrix<f64>,
}

pub fn right_svd(b: &DMatrix<f64>) -> Result<RightSvd> {
    let (n, d) = b.shape();
    // column-major storage: column j is a[j*n..(j+1)*n]
    let mut a = b.as_slice().to_vec();
    let mut v = DMatrix::<f64>::identity(d, d).as_slice().to_vec();

    let mut converged = d < 2;
    let mut last_off = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        last_off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                let (alpha, beta, gamma) = column_products(&a, n, p, q);
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                last_off = last_off.max(gamma.abs() / (alpha * beta).sqrt());
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, n, p, q, c, s);
                rotate(&mut v, d, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge after {MAX_SWEEPS} sweeps \
             (||B||_F = {:.6e}, max relative off-diagonal = {last_off:.3e})",
            b.norm()
        )));
    }

    let norms: Vec<f64> = a
        .chunks_exact(n.max(1))
        .take(d)
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    Ok(RightSvd {
        singular_values: order.iter().map(|&i| norms[i]).collect(),
        right_vectors: DMatrix::from_fn(d, d, |r, c| v[order[c] * d + r]),
    })
}

fn column_products(a: &[f64], n: usize, p: usize, q: usize) -> (f64, f64, f64) {
    let cp = &a[p * n..(p + 1) * n];
    let cq = &a[q * n..(q + 1) * n];
    cp.iter()
        .zip(cq)
        .fold((0.0, 0.0, 0.0), |(al, be, ga), (&x, &y)| {
            (al + x * x, be + y * y, ga + x * y)
        })
}

fn rotate(m: &mut [f64], rows: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = m.split_at_mut(q * rows);
    let cp = &mut head[p * rows..(p + 1) * rows];
    let cq = &mut tail[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (mp, mq) = (*x, *y);
        *x = c * mp - s * mq;
        *y = s * mp + c * mq;
    }
}

/// Flips `v` so its largest-magnitude entry (lowest index on ties) is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
