//! Rank-tolerant solves for the small square systems of the bridge recursions.

use nalgebra::{DMatrix, DVector};

/// Singular values below `RELATIVE_CUTOFF * s_max` are treated as zero.
pub const RELATIVE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PinvSolve {
    pub solution: Vec<f64>,
    pub rank: usize,
    /// `max_j |(M x - r)_j|`.
    pub residual: f64,
}

impl PinvSolve {
    pub fn full_rank(&self, dim: usize) -> bool {
        self.rank == dim
    }
}

/// Moore-Penrose pseudo-inverse of a row-major `dim x dim` matrix.
pub fn pinv(m: &[f64], dim: usize) -> DMatrix<f64> {
    pinv_with_rank(m, dim).0
}

fn pinv_with_rank(m: &[f64], dim: usize) -> (DMatrix<f64>, usize) {
    assert_eq!(m.len(), dim * dim);
    let mat = DMatrix::from_row_slice(dim, dim, m);
    let svd = mat.svd(true, true);
    let s_max = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    let cutoff = RELATIVE_CUTOFF * s_max;
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut out = DMatrix::<f64>::zeros(dim, dim);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            let inv = 1.0 / s;
            // out += v_k * inv * u_k^T
            for i in 0..dim {
                let vi = v_t[(k, i)] * inv;
                for j in 0..dim {
                    out[(i, j)] += vi * u[(j, k)];
                }
            }
        }
    }
    (out, rank)
}

/// Minimum-norm least-squares solution of `M x = r` via the pseudo-inverse.
pub fn pinv_solve(m: &[f64], r: &[f64], dim: usize) -> PinvSolve {
    assert_eq!(r.len(), dim);
    let (p, rank) = pinv_with_rank(m, dim);
    let x = &p * DVector::from_column_slice(r);
    let solution: Vec<f64> = x.iter().copied().collect();
    let mut residual: f64 = 0.0;
    for i in 0..dim {
        let mut acc = -r[i];
        for j in 0..dim {
            acc += m[i * dim + j] * solution[j];
        }
        residual = residual.max(acc.abs());
    }
    PinvSolve {
        solution,
        rank,
        residual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverts_full_rank() {
        let m = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let r = [1.0, 2.0, 3.0];
        let s = pinv_solve(&m, &r, 3);
        assert_eq!(s.rank, 3);
        assert!(s.residual < 1e-14);
    }

    #[test]
    fn nonsymmetric_system() {
        let m = [1.0, 2.0, 0.5, 0.0, 1.0, 3.0, 2.0, 0.0, 1.0];
        let r = [0.3, -1.0, 2.0];
        let s = pinv_solve(&m, &r, 3);
        assert_eq!(s.rank, 3);
        assert!(s.residual < 1e-13);
    }

    #[test]
    fn rank_deficient_gives_min_norm() {
        // rank one: M = a b^T
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 1.0, 0.0];
        let mut m = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 3 + j] = a[i] * b[j];
            }
        }
        // r in the range of M
        let r = [2.0, 4.0, 6.0];
        let s = pinv_solve(&m, &r, 3);
        assert_eq!(s.rank, 1);
        // min-norm solution is along b with b.x = 2
        assert!((s.solution[0] - 1.0).abs() < 1e-12);
        assert!((s.solution[1] - 1.0).abs() < 1e-12);
        assert!(s.solution[2].abs() < 1e-12);
        assert!(s.residual < 1e-12);
    }

    #[test]
    fn zero_matrix_solves_to_zero() {
        let s = pinv_solve(&[0.0; 4], &[1.0, 1.0], 2);
        assert_eq!(s.rank, 0);
        assert_eq!(s.solution, vec![0.0, 0.0]);
    }

    #[test]
    fn penrose_conditions() {
        let m = [1.0, 2.0, 2.0, 4.0];
        let p = pinv(&m, 2);
        let mm = DMatrix::from_row_slice(2, 2, &m);
        let back = &mm * &p * &mm;
        assert!((back - &mm).abs().max() < 1e-12);
        let pp = &p * &mm * &p;
        assert!((pp - &p).abs().max() < 1e-12);
    }
}
