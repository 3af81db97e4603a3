use super::Matrix;
use crate::error::{Error, Result};

/// Rank-`k` factors with `w ≈ u * diag(s) * vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m x k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `n x k`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        us.scale_cols(&self.s);
        us.matmul(&self.v.transpose())
            .expect("factor shapes agree by construction")
    }
}

const MAX_SWEEPS: usize = 80;

/// Leading `k` singular triplets by one-sided (Hestenes) Jacobi.
///
/// Column pairs of a working copy are rotated until mutually orthogonal; the
/// column norms are then the singular values. Wide matrices are handled
/// through their transpose.
pub fn truncated_svd(w: &Matrix, k: usize) -> Result<Svd> {
    let (m, n) = w.shape();
    if k == 0 || k > m.min(n) {
        return Err(Error::invalid(format!(
            "truncated_svd rank {k} outside 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    if m < n {
        let t = truncated_svd(&w.transpose(), k)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }

    // Column-major working copies: cols[j] is column j of the rotated matrix.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = col_products(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(k);

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let scale = s.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (&j, &sigma) in order.iter().zip(&s) {
        if sigma > scale * 1e-13 {
            ucols.push(cols[j].iter().map(|v| v / sigma).collect());
        } else {
            // Null direction: any unit vector orthogonal to the others will do.
            ucols.push(orthogonal_complement_vector(&ucols, m));
        }
    }

    let mut u = Matrix::zeros(m, k);
    let mut v = Matrix::zeros(n, k);
    for (c, (uc, &j)) in ucols.iter().zip(&order).enumerate() {
        for r in 0..m {
            u.set(r, c, uc[r]);
        }
        for r in 0..n {
            v.set(r, c, vcols[j][r]);
        }
    }
    Ok(Svd { u, s, v })
}

fn col_products(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (x, y) in a.iter().zip(b) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn orthogonal_complement_vector(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        // Two Gram-Schmidt passes for stability.
        for _ in 0..2 {
            for b in basis {
                let d: f64 = cand.iter().zip(b).map(|(x, y)| x * y).sum();
                cand.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cand.iter_mut().for_each(|v| *v /= norm);
            return cand;
        }
    }
    unreachable!("fewer than m basis vectors always leave a complement")
}
