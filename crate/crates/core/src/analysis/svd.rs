//! One-sided (Hestenes) Jacobi SVD in f64.

use crate::error::{bail, Result};

pub const MAX_SWEEPS: usize = 100;
pub const CONVERGENCE: f64 = 1e-10;

/// Dense f64 matrix stored column-major, the layout the column rotations want.
#[derive(Clone, Debug, PartialEq)]
pub struct ColMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ColMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                m.data[c * rows + r] = f(r, c);
            }
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[c * self.rows + r]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[c * self.rows + r] = v;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    pub sweeps: usize,
}

fn col_pair(data: &mut [f64], rows: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = data.split_at_mut(q * rows);
    (&mut lo[p * rows..(p + 1) * rows], &mut hi[..rows])
}

/// Singular values of `a` by cyclic one-sided Jacobi rotations until every column pair
/// satisfies `|a_pᵀa_q| ≤ 1e-10·‖a_p‖‖a_q‖`.
pub fn singular_values(a: &ColMatrix) -> Result<SvdResult> {
    let mut m = if a.rows >= a.cols { a.clone() } else { a.transpose() };
    let (rows, cols) = (m.rows, m.cols);
    if m.data.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "svd input contains non-finite values");
    }
    let frob2: f64 = m.data.iter().map(|v| v * v).sum();
    if frob2 == 0.0 {
        return Ok(SvdResult {
            singular_values: vec![0.0; cols],
            sweeps: 0,
        });
    }
    // Columns below this squared norm carry nothing above round-off and are left alone.
    let negligible = (f64::EPSILON * f64::EPSILON) * frob2;
    let mut norms: Vec<f64> = (0..cols)
        .map(|c| m.data[c * rows..(c + 1) * rows].iter().map(|v| v * v).sum())
        .collect();
    let mut sweeps = 0;
    let mut worst = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        worst = 0f64;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let (cp, cq) = col_pair(&mut m.data, rows, p, q);
                let gamma: f64 = cp.iter().zip(cq.iter()).map(|(x, y)| x * y).sum();
                let cos = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(cos);
                if cos <= CONVERGENCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (mut np, mut nq) = (0f64, 0f64);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                    np += *x * *x;
                    nq += *y * *y;
                }
                norms[p] = np;
                norms[q] = nq;
            }
        }
        if !rotated {
            let mut sv: Vec<f64> = norms.iter().map(|n| n.sqrt()).collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            return Ok(SvdResult {
                singular_values: sv,
                sweeps,
            });
        }
    }
    bail!(
        Numeric,
        "jacobi svd of {rows}x{cols} did not converge in {MAX_SWEEPS} sweeps (worst |cos| {worst:.3e})"
    )
}

/// `#{σ_i > tol·σ_1}`.
pub fn numerical_rank(sv: &[f64], tol: f64) -> usize {
    let Some(&top) = sv.first() else { return 0 };
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * top).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randn(rows: usize, cols: usize, seed: u64) -> ColMatrix {
        let mut rng = Rng::new(seed);
        let mut m = ColMatrix::zeros(rows, cols);
        m.data.iter_mut().for_each(|v| *v = rng.normal_f64());
        m
    }

    #[test]
    fn diagonal_and_known_spectrum() {
        let d = ColMatrix::from_fn(4, 3, |r, c| if r == c { [3.0, -5.0, 1.0][c] } else { 0.0 });
        let sv = singular_values(&d).unwrap().singular_values;
        assert_eq!(sv, vec![5.0, 3.0, 1.0]);
        // [[1, 1], [0, 1]] has singular values golden ratio φ and 1/φ
        let m = ColMatrix::from_fn(2, 2, |r, c| if r == 1 && c == 0 { 0.0 } else { 1.0 });
        let sv = singular_values(&m).unwrap().singular_values;
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sv[0] - phi).abs() < 1e-12 && (sv[1] - 1.0 / phi).abs() < 1e-12);
    }

    #[test]
    fn frobenius_and_rank() {
        let a = randn(30, 8, 1);
        let b = randn(8, 20, 2);
        let prod = ColMatrix::from_fn(30, 20, |r, c| (0..8).map(|k| a.get(r, k) * b.get(k, c)).sum());
        let sv = singular_values(&prod).unwrap().singular_values;
        let frob: f64 = prod.data.iter().map(|v| v * v).sum();
        let sum: f64 = sv.iter().map(|s| s * s).sum();
        assert!((frob - sum).abs() < 1e-9 * frob);
        assert_eq!(numerical_rank(&sv, 1e-6), 8);
        assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        let wide = singular_values(&prod.transpose()).unwrap().singular_values;
        for (x, y) in sv.iter().zip(&wide) {
            assert!((x - y).abs() < 1e-9 * sv[0]);
        }
    }

    #[test]
    fn zero_matrix() {
        let sv = singular_values(&ColMatrix::zeros(3, 3)).unwrap().singular_values;
        assert_eq!(numerical_rank(&sv, 1e-6), 0);
    }

    #[test]
    fn rejects_nan() {
        let mut m = ColMatrix::zeros(2, 2);
        m.set(0, 0, f64::NAN);
        assert!(matches!(singular_values(&m), Err(crate::Error::Numeric(_))));
    }
}
