//! Dense kernels: column-pivoted QR interpolative decomposition and partially pivoted LU.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenseError {
    #[error("tolerance must lie in (0, 1), got {0}")]
    BadTolerance(f64),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("exact zero pivot at column {column}")]
    ZeroPivot { column: usize },
    #[error("stacked blocks have {a} and {b} columns")]
    ColumnMismatch { a: usize, b: usize },
}

/// `A[:, redundant] ≈ A[:, skeleton] * interp`.
#[derive(Clone, Debug)]
pub struct Id {
    pub skeleton: Vec<usize>,
    pub redundant: Vec<usize>,
    /// `|skeleton| x |redundant|`
    pub interp: DMatrix<f64>,
    /// Frobenius norm of the trailing block at truncation, an upper bound on the
    /// reconstruction error `‖A_R - A_S T‖_F`.
    pub residual: f64,
}

impl Id {
    pub fn rank(&self) -> usize {
        self.skeleton.len()
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Interpolative decomposition by Householder QR with greedy column pivoting.
///
/// Pivots on the largest remaining column norm (ties to the lowest index) and stops
/// at the first `k` with `‖R22‖_F <= tol |R11|`. Column norms are recomputed, not
/// downdated, so the stopping test is exact.
pub fn interpolative_decomposition(a: &DMatrix<f64>, tol: f64) -> Result<Id, DenseError> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(DenseError::BadTolerance(tol));
    }
    let (m, n) = a.shape();
    let mut w: Vec<f64> = a.as_slice().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms2: Vec<f64> = (0..n)
        .map(|j| w[j * m..(j + 1) * m].iter().map(|x| x * x).sum())
        .collect();
    let kmax = m.min(n);
    let mut r11 = 0.0;
    let mut rank = kmax;
    let mut residual = 0.0;
    let mut v = vec![0.0; m];
    for k in 0..=kmax {
        let rem: f64 = norms2[k.min(n)..].iter().sum::<f64>().sqrt();
        if k == 0 && rem == 0.0 {
            rank = 0;
            residual = 0.0;
            break;
        }
        if k > 0 && rem <= tol * r11 {
            rank = k;
            residual = rem;
            break;
        }
        if k == kmax {
            residual = rem;
            break;
        }
        let mut p = k;
        for j in k + 1..n {
            if norms2[j] > norms2[p] {
                p = j;
            }
        }
        if p != k {
            for i in 0..m {
                w.swap(k * m + i, p * m + i);
            }
            perm.swap(k, p);
            norms2.swap(k, p);
        }
        // Householder reflector for w[k.., k]
        let col = &w[k * m..(k + 1) * m];
        let alpha = col[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
        let rkk = if col[k] >= 0.0 { -alpha } else { alpha };
        v[k..m].copy_from_slice(&col[k..m]);
        v[k] -= rkk;
        let vnorm2: f64 = v[k..m].iter().map(|x| x * x).sum();
        {
            let colm = &mut w[k * m..(k + 1) * m];
            colm[k] = rkk;
            for x in &mut colm[k + 1..] {
                *x = 0.0;
            }
        }
        if k == 0 {
            r11 = rkk.abs();
        }
        norms2[k] = 0.0;
        for j in k + 1..n {
            let cj = &mut w[j * m..(j + 1) * m];
            if vnorm2 > 0.0 {
                let f = 2.0 * dot(&v[k..m], &cj[k..m]) / vnorm2;
                for (c, vi) in cj[k..m].iter_mut().zip(&v[k..m]) {
                    *c -= f * vi;
                }
            }
            norms2[j] = dot(&cj[k + 1..m], &cj[k + 1..m]);
        }
    }

    // T = R11^{-1} R12 by back substitution
    let nr = n - rank;
    let mut t = DMatrix::<f64>::zeros(rank, nr);
    for (c, j) in (rank..n).enumerate() {
        for i in (0..rank).rev() {
            let mut s = w[j * m + i];
            for l in i + 1..rank {
                s -= w[l * m + i] * t[(l, c)];
            }
            t[(i, c)] = s / w[i * m + i];
        }
    }
    // redundant columns in ascending order
    let mut order: Vec<usize> = (0..nr).collect();
    order.sort_by_key(|&c| perm[rank + c]);
    let interp = DMatrix::from_fn(rank, nr, |i, c| t[(i, order[c])]);
    Ok(Id {
        skeleton: perm[..rank].to_vec(),
        redundant: order.iter().map(|&c| perm[rank + c]).collect(),
        interp,
        residual,
    })
}

/// One ID shared by the incoming and outgoing blocks, computed on `[a_in; a_out]`.
pub fn two_sided_id(
    a_in: &DMatrix<f64>,
    a_out: &DMatrix<f64>,
    tol: f64,
) -> Result<Id, DenseError> {
    if a_in.ncols() != a_out.ncols() {
        return Err(DenseError::ColumnMismatch {
            a: a_in.ncols(),
            b: a_out.ncols(),
        });
    }
    let n = a_in.ncols();
    let mut stacked = DMatrix::<f64>::zeros(a_in.nrows() + a_out.nrows(), n);
    stacked.rows_mut(0, a_in.nrows()).copy_from(a_in);
    stacked.rows_mut(a_in.nrows(), a_out.nrows()).copy_from(a_out);
    interpolative_decomposition(&stacked, tol)
}

/// `P A = L U` with partial (row) pivoting.
#[derive(Clone, Debug)]
pub struct Lu {
    lu: DMatrix<f64>,
    /// Row `i` of `P A` is row `perm[i]` of `A`.
    perm: Vec<usize>,
    min_pivot: (usize, f64),
    max_pivot: f64,
}

impl Lu {
    pub fn factor(a: &DMatrix<f64>) -> Result<Lu, DenseError> {
        let (m, n) = a.shape();
        if m != n {
            return Err(DenseError::NotSquare { rows: m, cols: n });
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = (0, f64::INFINITY);
        let mut max_pivot: f64 = 0.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(DenseError::ZeroPivot { column: k });
            }
            if p != k {
                lu.swap_rows(k, p);
                perm.swap(k, p);
            }
            if best < min_pivot.1 {
                min_pivot = (k, best);
            }
            max_pivot = max_pivot.max(best);
            let piv = lu[(k, k)];
            for i in k + 1..n {
                lu[(i, k)] /= piv;
            }
            for j in k + 1..n {
                let ukj = lu[(k, j)];
                if ukj != 0.0 {
                    for i in k + 1..n {
                        let lik = lu[(i, k)];
                        lu[(i, j)] -= lik * ukj;
                    }
                }
            }
        }
        if n == 0 {
            min_pivot = (0, 1.0);
            max_pivot = 1.0;
        }
        Ok(Lu {
            lu,
            perm,
            min_pivot,
            max_pivot,
        })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// `min |u_kk| / max |u_kk|`; 1 for the empty matrix.
    pub fn min_pivot_ratio(&self) -> f64 {
        self.min_pivot.1 / self.max_pivot
    }

    /// Column of `A` where the smallest pivot occurred.
    pub fn min_pivot_column(&self) -> usize {
        self.min_pivot.0
    }

    /// Overwrites `b` with `A^{-1} b`.
    pub fn solve_in_place(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let mut tmp = vec![0.0; n];
        let lu = self.lu.as_slice();
        for c in 0..b.ncols() {
            let mut col = b.column_mut(c);
            for (t, &p) in tmp.iter_mut().zip(&self.perm) {
                *t = col[p];
            }
            for j in 0..n {
                let x = tmp[j];
                if x != 0.0 {
                    let l = &lu[j * n + j + 1..(j + 1) * n];
                    for (t, a) in tmp[j + 1..].iter_mut().zip(l) {
                        *t -= a * x;
                    }
                }
            }
            for j in (0..n).rev() {
                tmp[j] /= lu[j * n + j];
                let x = tmp[j];
                if x != 0.0 {
                    for (t, a) in tmp[..j].iter_mut().zip(&lu[j * n..j * n + j]) {
                        *t -= a * x;
                    }
                }
            }
            col.as_mut_slice().copy_from_slice(&tmp);
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    /// Overwrites `b` with `A^{-T} b`.
    pub fn solve_transpose_in_place(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let mut tmp = vec![0.0; n];
        let lu = self.lu.as_slice();
        for c in 0..b.ncols() {
            let mut col = b.column_mut(c);
            tmp.copy_from_slice(col.as_slice());
            // U^T z = b
            for j in 0..n {
                let s = tmp[j] - dot(&lu[j * n..j * n + j], &tmp[..j]);
                tmp[j] = s / lu[j * n + j];
            }
            // L^T y = z
            for j in (0..n).rev() {
                tmp[j] -= dot(&lu[j * n + j + 1..(j + 1) * n], &tmp[j + 1..]);
            }
            for (i, &p) in self.perm.iter().enumerate() {
                col[p] = tmp[i];
            }
        }
    }
}

/// Rows `rows` and columns `cols` of `a`.
pub fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn low_rank(m: usize, n: usize, r: usize, seed: u64) -> DMatrix<f64> {
        random(m, r, seed) * random(r, n, seed + 1)
    }

    fn id_error(a: &DMatrix<f64>, id: &Id) -> f64 {
        let s = submatrix(a, &(0..a.nrows()).collect::<Vec<_>>(), &id.skeleton);
        let r = submatrix(a, &(0..a.nrows()).collect::<Vec<_>>(), &id.redundant);
        (r - s * &id.interp).norm()
    }

    #[test]
    fn id_of_rank_one_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0]);
        let id = interpolative_decomposition(&a, 1e-12).unwrap();
        assert_eq!(id.skeleton, vec![2]);
        assert_eq!(id.redundant, vec![0, 1]);
        assert!((id.interp[(0, 0)] - 1.0 / 3.0).abs() < 1e-14);
        assert!((id.interp[(0, 1)] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn id_of_zero_matrix_is_empty_skeleton() {
        let a = DMatrix::<f64>::zeros(4, 5);
        let id = interpolative_decomposition(&a, 1e-10).unwrap();
        assert!(id.skeleton.is_empty());
        assert_eq!(id.redundant, vec![0, 1, 2, 3, 4]);
        assert_eq!(id.interp.shape(), (0, 5));
    }

    #[test]
    fn id_rejects_bad_tolerance() {
        let a = DMatrix::<f64>::identity(2, 2);
        assert!(interpolative_decomposition(&a, 0.0).is_err());
        assert!(interpolative_decomposition(&a, 1.0).is_err());
    }

    #[test]
    fn id_recovers_numerical_rank() {
        let a = low_rank(80, 60, 7, 3);
        let id = interpolative_decomposition(&a, 1e-10).unwrap();
        assert_eq!(id.rank(), 7);
        assert!(id_error(&a, &id) <= 1e-10 * a.norm());
    }

    #[test]
    fn full_rank_wide_matrix() {
        let a = random(3, 8, 5);
        let id = interpolative_decomposition(&a, 1e-12).unwrap();
        assert_eq!(id.rank(), 3);
        assert!(id_error(&a, &id) < 1e-12 * a.norm());
    }

    #[test]
    fn two_sided_matches_stacked() {
        let a = low_rank(20, 30, 4, 8);
        let b = low_rank(10, 30, 3, 9);
        let id = two_sided_id(&a, &b, 1e-12).unwrap();
        assert!(id_error(&a, &id) <= 1e-11 * a.norm());
        assert!(id_error(&b, &id) <= 1e-11 * b.norm());
        assert!(two_sided_id(&a, &random(3, 4, 1), 1e-8).is_err());
    }

    #[test]
    fn lu_zero_pivot_on_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(
            Lu::factor(&a).unwrap_err(),
            DenseError::ZeroPivot { column: 1 }
        );
    }

    #[test]
    fn lu_solves_and_transposes() {
        let a = random(40, 40, 11);
        let b = random(40, 3, 12);
        let lu = Lu::factor(&a).unwrap();
        let x = lu.solve(&b);
        assert!((&a * &x - &b).norm() < 1e-11 * b.norm() * a.norm());
        let mut y = b.clone();
        lu.solve_transpose_in_place(&mut y);
        assert!((a.transpose() * &y - &b).norm() < 1e-11 * b.norm() * a.norm());
        assert!(lu.min_pivot_ratio() > 0.0 && lu.min_pivot_ratio() <= 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn id_error_within_tolerance(
            m in 1usize..40, n in 1usize..40, r in 1usize..10,
            seed in any::<u64>(), e in 2i32..13,
        ) {
            let tol = 10f64.powi(-e);
            let mut a = low_rank(m, n, r, seed);
            // add decaying noise so the rank cut is not trivial
            let noise = random(m, n, seed ^ 0x55) * 1e-6;
            a += noise;
            let id = interpolative_decomposition(&a, tol).unwrap();
            let err = id_error(&a, &id);
            prop_assert!(err <= tol * a.norm() * (1.0 + 1e-8) + 1e-14, "err={err:e}");
            prop_assert!(id.rank() <= m.min(n));
            let mut all: Vec<usize> = id.skeleton.iter().chain(&id.redundant).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn lu_residual_is_small(n in 1usize..30, seed in any::<u64>()) {
            let a = random(n, n, seed) + DMatrix::identity(n, n) * 0.5;
            if let Ok(lu) = Lu::factor(&a) {
                let b = random(n, 1, seed + 7);
                let x = lu.solve(&b);
                let res = (&a * &x - &b).norm();
                prop_assert!(res <= 1e-9 * a.norm() * x.norm() + 1e-12);
            }
        }
    }
}
