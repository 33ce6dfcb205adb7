//! Null-space extraction by one-sided Jacobi SVD.

use super::array::RealArray;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

/// Right singular vectors and singular values of an `n x d` matrix, via
/// one-sided (Hestenes) Jacobi rotations on its columns.
///
/// Returns `(v, sigma)` with `v` stored column-wise: `v[j]` is the right
/// singular vector paired with `sigma[j]`. Columns are unsorted.
pub fn jacobi_right_svd(e: &RealArray) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if e.shape().len() != 2 {
        return Err(Error::shape("jacobi_right_svd", format!("{:?}", e.shape())));
    }
    e.ensure_finite("null_space (input)")?;
    let (n, d) = (e.rows(), e.cols());
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| e.get2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut c = vec![0.0; d];
            c[j] = 1.0;
            c
        })
        .collect();
    // columns this small already map to zero within rounding; rotating
    // them against each other only churns noise
    let negligible = (f64::EPSILON * e.data().iter().map(|x| x * x).sum::<f64>().sqrt()).powi(2);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if alpha <= negligible || beta <= negligible || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    Ok((v, sigma))
}

fn rotate(m: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = m.split_at_mut(q);
    let (a, b) = (&mut left[p], &mut right[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Orthonormal basis `M` (`d x (d-n)`) for the directions annihilated by the
/// rows of `e` (`n x d`): the right singular vectors with the `d - n`
/// smallest singular values.
pub fn null_space(e: &RealArray) -> Result<RealArray> {
    let (n, d) = (e.rows(), e.cols());
    if d <= n {
        return Err(Error::Invalid(format!(
            "null space needs more columns than rows (got {n}x{d})"
        )));
    }
    let (v, sigma) = jacobi_right_svd(e)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]).then(a.cmp(&b)));
    let width = d - n;
    let mut out = vec![0.0; d * width];
    for (col, &j) in order[..width].iter().enumerate() {
        for i in 0..d {
            out[i * width + col] = v[j][i];
        }
    }
    RealArray::new(vec![d, width], out)
}
