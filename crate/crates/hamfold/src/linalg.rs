//! Small dense linear algebra: complete-pivot rank, LU solves, and principal
//! minor selection. Matrices here are tiny (configuration dimension), so
//! clarity and an explicit pivot-tolerance policy win over speed.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        debug_assert!(rows.iter().all(|row| row.len() == c));
        Mat { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    /// Principal submatrix picked by `idx` (rows and columns alike).
    pub fn principal(&self, idx: &[usize]) -> Mat {
        let k = idx.len();
        let mut out = Mat::zeros(k, k);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out.set(a, b, self.at(i, j));
            }
        }
        out
    }

    /// Max |a_ij + a_ji| over all pairs: zero for an antisymmetric matrix.
    pub fn antisymmetry_defect(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self.at(i, j) + self.at(j, i)).abs());
            }
        }
        worst
    }
}

/// Numeric rank by Gaussian elimination with complete pivoting.
///
/// A pivot counts while its magnitude exceeds `pivot_tol` times the largest
/// magnitude of the *initial* matrix; the zero matrix has rank 0.
pub fn rank_complete_pivot(m: &Mat, pivot_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let scale = m.max_abs();
    if scale == 0.0 {
        return 0;
    }
    let threshold = pivot_tol * scale;
    let mut a = m.clone();
    let mut live_rows: Vec<usize> = (0..a.rows).collect();
    let mut live_cols: Vec<usize> = (0..a.cols).collect();
    let mut rank = 0;
    while !live_rows.is_empty() && !live_cols.is_empty() {
        let mut best = 0.0;
        let mut best_rc = (0usize, 0usize);
        for (ri, &r) in live_rows.iter().enumerate() {
            for (ci, &c) in live_cols.iter().enumerate() {
                let v = a.at(r, c).abs();
                if v > best {
                    best = v;
                    best_rc = (ri, ci);
                }
            }
        }
        if best <= threshold {
            break;
        }
        let r = live_rows.swap_remove(best_rc.0);
        let c = live_cols.swap_remove(best_rc.1);
        rank += 1;
        let piv = a.at(r, c);
        for &rr in &live_rows {
            let factor = a.at(rr, c) / piv;
            if factor == 0.0 {
                continue;
            }
            for &cc in &live_cols {
                let v = a.at(rr, cc) - factor * a.at(r, cc);
                a.set(rr, cc, v);
            }
        }
    }
    rank
}

/// LU factorization with partial pivoting of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Mat,
    perm: Vec<usize>,
    /// Smallest pivot magnitude seen during factorization.
    pub min_pivot: f64,
    sign: f64,
}

impl Lu {
    /// Factor `m`; fails when a pivot falls below `pivot_tol * max|initial entry|`.
    pub fn factor(m: &Mat, pivot_tol: f64) -> Result<Lu> {
        debug_assert_eq!(m.rows, m.cols);
        let n = m.rows;
        if n == 0 {
            return Ok(Lu { n, lu: m.clone(), perm: vec![], min_pivot: f64::INFINITY, sign: 1.0 });
        }
        let scale = m.max_abs();
        let threshold = pivot_tol * scale;
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = f64::INFINITY;
        let mut sign = 1.0;
        for k in 0..n {
            let mut best = lu.at(k, k).abs();
            let mut best_row = k;
            for r in (k + 1)..n {
                let v = lu.at(r, k).abs();
                if v > best {
                    best = v;
                    best_row = r;
                }
            }
            if best <= threshold || best == 0.0 {
                return Err(Error::SingularJacobian { pivot: best, threshold });
            }
            if best_row != k {
                for c in 0..n {
                    let tmp = lu.at(k, c);
                    lu.set(k, c, lu.at(best_row, c));
                    lu.set(best_row, c, tmp);
                }
                perm.swap(k, best_row);
                sign = -sign;
            }
            min_pivot = min_pivot.min(lu.at(k, k).abs());
            let piv = lu.at(k, k);
            for r in (k + 1)..n {
                let factor = lu.at(r, k) / piv;
                lu.set(r, k, factor);
                for c in (k + 1)..n {
                    let v = lu.at(r, c) - factor * lu.at(k, c);
                    lu.set(r, c, v);
                }
            }
        }
        Ok(Lu { n, lu, perm, min_pivot, sign })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut v = b[self.perm[i]];
            for j in 0..i {
                v -= self.lu.at(i, j) * y[j];
            }
            y[i] = v;
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for j in (i + 1)..n {
                v -= self.lu.at(i, j) * y[j];
            }
            y[i] = v / self.lu.at(i, i);
        }
        y
    }

    pub fn inverse(&self) -> Mat {
        let n = self.n;
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e);
            e[j] = 0.0;
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        inv
    }

    pub fn determinant(&self) -> f64 {
        let mut det = self.sign;
        for i in 0..self.n {
            det *= self.lu.at(i, i);
        }
        det
    }
}

fn abs_det(m: &Mat) -> f64 {
    match Lu::factor(m, 0.0) {
        Ok(lu) => lu.determinant().abs(),
        Err(_) => 0.0,
    }
}

fn combinations(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        // advance to the next lexicographic combination
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in (i + 1)..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Pick `size` indices whose principal submatrix has the largest
/// `score` = min over the supplied evaluations of |det|.
///
/// Exhaustive for small index counts, greedy (largest incremental |det| on the
/// first matrix) otherwise. Returns the chosen indices and the score.
pub fn best_principal_minor(matrices: &[Mat], size: usize) -> (Vec<usize>, f64) {
    let n = matrices[0].rows;
    if size == 0 {
        return (vec![], f64::INFINITY);
    }
    let score = |idx: &[usize]| -> f64 {
        matrices
            .iter()
            .map(|m| abs_det(&m.principal(idx)))
            .fold(f64::INFINITY, f64::min)
    };
    if binomial(n, size) <= 20_000 {
        let mut best_idx: Vec<usize> = Vec::new();
        let mut best_score = -1.0;
        combinations(n, size, |idx| {
            let s = score(idx);
            if s > best_score {
                best_score = s;
                best_idx = idx.to_vec();
            }
        });
        (best_idx, best_score.max(0.0))
    } else {
        let mut chosen: Vec<usize> = Vec::new();
        for _ in 0..size {
            let mut best_i = usize::MAX;
            let mut best_score = -1.0;
            for i in 0..n {
                if chosen.contains(&i) {
                    continue;
                }
                let mut trial = chosen.clone();
                trial.push(i);
                let s = score(&trial);
                if s > best_score {
                    best_score = s;
                    best_i = i;
                }
            }
            chosen.push(best_i);
        }
        let s = score(&chosen);
        (chosen, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_structured_matrices() {
        let z = Mat::from_rows(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(rank_complete_pivot(&z, 1e-9), 0);

        let d = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(rank_complete_pivot(&d, 1e-9), 1);

        let offdiag = Mat::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(rank_complete_pivot(&offdiag, 1e-9), 2);

        // rank-1 outer product with entries spanning magnitudes
        let r1 = Mat::from_rows(vec![
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 6.0],
            vec![-1.0, -2.0, -3.0],
        ]);
        assert_eq!(rank_complete_pivot(&r1, 1e-9), 1);
    }

    #[test]
    fn rank_respects_tolerance_scale() {
        // second row is 1e-12 of the first: structurally dependent
        let m = Mat::from_rows(vec![vec![1.0, 2.0], vec![1e-12, 2e-12]]);
        assert_eq!(rank_complete_pivot(&m, 1e-9), 1);
        let m2 = Mat::from_rows(vec![vec![1.0, 2.0], vec![1e-3, 3e-3]]);
        assert_eq!(rank_complete_pivot(&m2, 1e-9), 2);
    }

    #[test]
    fn lu_solves_and_inverts() {
        let m = Mat::from_rows(vec![vec![2.0, 1.0], vec![1.0, 3.0]]);
        let lu = Lu::factor(&m, 1e-12).unwrap();
        let x = lu.solve(&[5.0, 10.0]);
        // 2x + y = 5, x + 3y = 10 -> x = 1, y = 3
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
        let inv = lu.inverse();
        // m * inv = I
        for i in 0..2 {
            for j in 0..2 {
                let mut v = 0.0;
                for k in 0..2 {
                    v += m.at(i, k) * inv.at(k, j);
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
            }
        }
        assert!((lu.determinant() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn lu_rejects_singular() {
        let m = Mat::from_rows(vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(Lu::factor(&m, 1e-9).is_err());
    }

    #[test]
    fn principal_minor_search_finds_nonsingular_block() {
        // rank-2 symmetric with singular leading 2x2 block: selection must
        // avoid {0,1}
        let m = Mat::from_rows(vec![
            vec![1.0, 2.0, 0.0],
            vec![2.0, 4.0, 0.0],
            vec![0.0, 0.0, 3.0],
        ]);
        let (idx, score) = best_principal_minor(&[m], 2);
        assert!(score > 1e-9);
        assert!(idx.contains(&2));
    }

    #[test]
    fn empty_selection_is_trivial() {
        let m = Mat::from_rows(vec![vec![1.0]]);
        let (idx, _) = best_principal_minor(&[m], 0);
        assert!(idx.is_empty());
    }
}
