//! Sparse and dense linear algebra used by assembly and the solvers.

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, Side};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s * x`
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> SparseMatrix {
        triplets.sort_unstable_by_key(|a| (a.0, a.1));
        let mut row_offsets = vec![0usize; rows + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(c);
                values.push(v);
                row_offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        SparseMatrix { rows, cols, row_offsets, col_indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        match self.col_indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (c, v) in self.row(r) {
                y[c] += v * xr;
            }
        }
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (0..self.rows).all(|r| self.row(r).all(|(c, v)| (v - self.get(c, r)).abs() <= tol * scale))
    }

    /// Submatrix on the given row and column index lists.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> SparseMatrix {
        let mut col_map = vec![usize::MAX; self.cols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut trip = Vec::new();
        for (k, &r) in rows.iter().enumerate() {
            for (c, v) in self.row(r) {
                if col_map[c] != usize::MAX {
                    trip.push((k, col_map[c], v));
                }
            }
        }
        SparseMatrix::from_triplets(rows.len(), cols.len(), trip)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d[(r, c)] = v;
            }
        }
        d
    }

    /// `x^T A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.mul_vec(y))
    }
}

/// Result of a conjugate gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final relative residual `||b - A x|| / ||b||`.
    pub residual: f64,
    /// Relative residual of the returned iterate sequence, one entry per iteration
    /// (entry 0 is the starting guess).
    pub history: Vec<f64>,
}

/// Jacobi-preconditioned conjugate gradients from a zero start.
pub fn cg_solve(a: &SparseMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<CgSolution> {
    cg_solve_from(a, b, None, tol, max_iter)
}

/// Jacobi-preconditioned conjugate gradients with an optional starting guess.
///
/// The iterates are passed through minimal residual smoothing, so the
/// returned residual history is non-increasing. Stops once
/// `||b - A x|| <= tol * ||b||`.
pub fn cg_solve_from(
    a: &SparseMatrix,
    b: &[f64],
    guess: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution> {
    let n = b.len();
    if a.rows != n || a.cols != n {
        return Err(Error::DimensionMismatch { expected: a.rows, found: n });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("CG tolerance must be positive, got {tol}")));
    }
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(CgSolution { x: vec![0.0; n], iterations: 0, residual: 0.0, history: vec![0.0] });
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();

    let mut x = guess.map_or_else(|| vec![0.0; n], |g| g.to_vec());
    let mut total = 0;
    let mut history = Vec::new();
    // Restart loop: the smoothed residual is a recurrence and can drift from
    // the true residual; a restart recomputes it from scratch.
    loop {
        let mut r = b.to_vec();
        axpy(-1.0, &a.mul_vec(&x), &mut r);
        let rel = norm2(&r) / bnorm;
        if history.is_empty() {
            history.push(rel);
        }
        if rel <= tol {
            return Ok(CgSolution { x, iterations: total, residual: rel, history });
        }
        if total >= max_iter {
            return Err(Error::CgNotConverged { iterations: total, residual: rel });
        }

        let mut xs = x.clone();
        let mut rs = r.clone();
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        let mut converged = false;
        while total < max_iter {
            a.mul_vec_into(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(Error::Singular(format!("CG breakdown: p^T A p = {pap:e}")));
            }
            let step = rz / pap;
            axpy(step, &p, &mut x);
            axpy(-step, &ap, &mut r);
            total += 1;

            // Minimal residual smoothing between (xs, rs) and (x, r).
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                let d = r[i] - rs[i];
                num += rs[i] * d;
                den += d * d;
            }
            if den > 0.0 {
                let eta = -num / den;
                for i in 0..n {
                    rs[i] += eta * (r[i] - rs[i]);
                    xs[i] += eta * (x[i] - xs[i]);
                }
            }
            let rel_s = norm2(&rs) / bnorm;
            history.push(rel_s);
            if rel_s <= tol {
                converged = true;
                break;
            }

            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        x = xs;
        if !converged && total >= max_iter {
            let mut r = b.to_vec();
            axpy(-1.0, &a.mul_vec(&x), &mut r);
            let rel = norm2(&r) / bnorm;
            if rel <= tol {
                return Ok(CgSolution { x, iterations: total, residual: rel, history });
            }
            return Err(Error::CgNotConverged { iterations: total, residual: rel });
        }
    }
}

fn band_scale(c: &[f64], d: &[f64]) -> f64 {
    c.iter().chain(d).fold(0.0f64, |m, v| m.max(v.abs()))
}

const SINGULAR_RTOL: f64 = 1e-14;

/// Solves the cyclic two-band system `c[i] x[i] + d[i] x[(i + 1) % n] = b[i]`.
///
/// The unknown `x[0]` is carried symbolically through one backward sweep,
/// fixed from the first row, and substituted in a second sweep.
pub fn cyclic_bidiagonal_solve(c: &[f64], d: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = c.len();
    if d.len() != n || b.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: d.len().min(b.len()) });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let scale = band_scale(c, d);
    if n == 1 {
        let s = c[0] + d[0];
        if s.abs() <= SINGULAR_RTOL * scale {
            return Err(Error::Singular("1x1 cyclic system with zero pivot".into()));
        }
        return Ok(vec![b[0] / s]);
    }
    // x[i] = p[i] + q[i] * x[0]
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in (1..n).rev() {
        if c[i].abs() <= SINGULAR_RTOL * scale {
            return Err(Error::Singular(format!("zero diagonal entry at row {i}")));
        }
        let (pn, qn) = if i == n - 1 { (0.0, 1.0) } else { (p[i + 1], q[i + 1]) };
        p[i] = (b[i] - d[i] * pn) / c[i];
        q[i] = -d[i] * qn / c[i];
    }
    let pivot = c[0] + d[0] * q[1];
    if pivot.abs() <= SINGULAR_RTOL * scale {
        return Err(Error::Singular(format!(
            "cyclic two-band matrix of size {n} is singular (reduced pivot {pivot:e})"
        )));
    }
    let x0 = (b[0] - d[0] * p[1]) / pivot;
    let mut x = vec![0.0; n];
    x[0] = x0;
    for i in 1..n {
        x[i] = p[i] + q[i] * x0;
    }
    Ok(x)
}

/// Solves the transposed system `c[j] y[j] + d[(j + n - 1) % n] y[(j + n - 1) % n] = r[j]`.
pub fn cyclic_bidiagonal_solve_transpose(c: &[f64], d: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    let n = c.len();
    if d.len() != n || r.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: d.len().min(r.len()) });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let scale = band_scale(c, d);
    if n == 1 {
        let s = c[0] + d[0];
        if s.abs() <= SINGULAR_RTOL * scale {
            return Err(Error::Singular("1x1 cyclic system with zero pivot".into()));
        }
        return Ok(vec![r[0] / s]);
    }
    // y[j] = p[j] + q[j] * y[n - 1]
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for j in 0..n - 1 {
        if c[j].abs() <= SINGULAR_RTOL * scale {
            return Err(Error::Singular(format!("zero diagonal entry at row {j}")));
        }
        let (dp, pp, qp) = if j == 0 { (d[n - 1], 0.0, 1.0) } else { (d[j - 1], p[j - 1], q[j - 1]) };
        p[j] = (r[j] - dp * pp) / c[j];
        q[j] = -dp * qp / c[j];
    }
    let pivot = c[n - 1] + d[n - 2] * q[n - 2];
    if pivot.abs() <= SINGULAR_RTOL * scale {
        return Err(Error::Singular(format!(
            "cyclic two-band matrix of size {n} is singular (reduced pivot {pivot:e})"
        )));
    }
    let last = (r[n - 1] - d[n - 2] * p[n - 2]) / pivot;
    let mut y = vec![0.0; n];
    y[n - 1] = last;
    for j in 0..n - 1 {
        y[j] = p[j] + q[j] * last;
    }
    Ok(y)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        DenseMatrix { rows: r, cols: c, data: rows.concat() }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, v: &[f64]) {
        for (r, &x) in v.iter().enumerate() {
            self[(r, c)] = x;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out[(r, c)] += a * other[(k, c)];
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.rows == self.cols
            && (0..self.rows).all(|r| (0..r).all(|c| (self[(r, c)] - self[(c, r)]).abs() <= tol * scale))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// LU factorization with partial pivoting.
#[derive(Debug, Clone)]
pub struct DenseLu {
    lu: DenseMatrix,
    perm: Vec<usize>,
    sign: f64,
}

impl DenseLu {
    pub fn factor(a: &DenseMatrix) -> Result<DenseLu> {
        if a.rows != a.cols {
            return Err(Error::DimensionMismatch { expected: a.rows, found: a.cols });
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let scale = a.max_abs();
        for k in 0..n {
            let (piv, pval) =
                (k..n)
                    .map(|r| (r, lu[(r, k)].abs()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pval <= 1e-14 * scale || scale == 0.0 {
                return Err(Error::Singular(format!("zero pivot in column {k} of {n}x{n} matrix")));
            }
            if piv != k {
                for c in 0..n {
                    lu.data.swap(k * n + c, piv * n + c);
                }
                perm.swap(k, piv);
                sign = -sign;
            }
            let d = lu[(k, k)];
            for r in k + 1..n {
                let f = lu[(r, k)] / d;
                lu[(r, k)] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[(r, c)] -= f * lu[(k, c)];
                    }
                }
            }
        }
        Ok(DenseLu { lu, perm, sign })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            for c in 0..r {
                x[r] -= self.lu[(r, c)] * x[c];
            }
        }
        for r in (0..n).rev() {
            for c in r + 1..n {
                x[r] -= self.lu[(r, c)] * x[c];
            }
            x[r] /= self.lu[(r, r)];
        }
        x
    }

    pub fn determinant(&self) -> f64 {
        (0..self.lu.rows).map(|i| self.lu[(i, i)]).product::<f64>() * self.sign
    }
}

/// Solves `A x = b` by pivoted elimination.
pub fn dense_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows {
        return Err(Error::DimensionMismatch { expected: a.rows, found: b.len() });
    }
    Ok(DenseLu::factor(a)?.solve(b))
}

pub fn dense_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let lu = DenseLu::factor(a)?;
    let n = a.rows;
    let mut inv = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.iter_mut().for_each(|x| *x = 0.0);
        e[c] = 1.0;
        inv.set_column(c, &lu.solve(&e));
    }
    Ok(inv)
}

/// Determinant via LU; exactly zero is returned when elimination finds a zero pivot.
pub fn dense_determinant(a: &DenseMatrix) -> f64 {
    match DenseLu::factor(a) {
        Ok(lu) => lu.determinant(),
        Err(_) => 0.0,
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration, to relative accuracy `1e-10`.
pub fn dense_eig_max(a: &DenseMatrix) -> Result<f64> {
    if a.rows != a.cols {
        return Err(Error::DimensionMismatch { expected: a.rows, found: a.cols });
    }
    let n = a.rows;
    if n == 0 || a.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i + 1) as f64).sin()).collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut rho_prev = 0.0;
    let mut stalled = 0;
    for _ in 0..1_000_000 {
        let y = a.mul_vec(&x);
        let rho = dot(&x, &y);
        let res: f64 = y.iter().zip(&x).map(|(yi, xi)| (yi - rho * xi).powi(2)).sum::<f64>().sqrt();
        // Rayleigh quotient error is quadratic in the residual.
        if res <= 1e-8 * rho.abs() {
            return Ok(rho);
        }
        if (rho - rho_prev).abs() <= 1e-15 * rho.abs() {
            stalled += 1;
            if stalled > 50 {
                return Ok(rho);
            }
        } else {
            stalled = 0;
        }
        rho_prev = rho;
        let ny = norm2(&y);
        if ny == 0.0 {
            return Ok(0.0);
        }
        x = y.into_iter().map(|v| v / ny).collect();
    }
    Ok(rho_prev)
}

/// Dense Cholesky factor `A = L L^T`.
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    l: DenseMatrix,
}

impl DenseCholesky {
    pub fn factor(a: &DenseMatrix) -> Result<DenseCholesky> {
        let n = a.rows;
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut s = a[(j, j)];
            for k in 0..j {
                s -= l[(j, k)] * l[(j, k)];
            }
            if !(s > 0.0) {
                return Err(Error::Singular(format!("matrix is not positive definite (pivot {j})")));
            }
            let d = s.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(DenseCholesky { l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = self.l.row(i);
            let s: f64 = dot(&row[..i], &y[..i]);
            y[i] = (y[i] - s) / row[i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }
}

/// Sparse Cholesky factor of a symmetric positive definite matrix, with a
/// fill-reducing ordering.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    llt: Llt<usize, f64>,
}

impl SparseCholesky {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        let n = a.rows;
        if a.cols != n {
            return Err(Error::DimensionMismatch { expected: n, found: a.cols });
        }
        let lower: Vec<Triplet<usize, usize, f64>> = (0..n)
            .flat_map(|r| a.row(r).filter(move |&(c, _)| c <= r).map(move |(c, v)| Triplet::new(r, c, v)))
            .collect();
        let m = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &lower)
            .map_err(|e| Error::Singular(format!("cannot build factorization input: {e:?}")))?;
        let llt =
            m.sp_cholesky(Side::Lower).map_err(|e| Error::Singular(format!("matrix is not positive definite: {e}")))?;
        Ok(SparseCholesky { llt })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.llt.solve_in_place_with_conj(Conj::No, x.as_mut());
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }
}

/// Repeated solves with one fixed symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub enum SpdSolver {
    Direct { matrix: SparseMatrix, factor: SparseCholesky },
    Cg { matrix: SparseMatrix, tol: f64, max_iter: usize },
}

impl SpdSolver {
    /// Factors `matrix` once.
    pub fn new(matrix: SparseMatrix) -> Result<SpdSolver> {
        let factor = SparseCholesky::factor(&matrix)?;
        Ok(SpdSolver::Direct { matrix, factor })
    }

    /// Conjugate gradients with relative tolerance `tol`, warm-started from the guess passed to [`SpdSolver::solve`].
    pub fn cg(matrix: SparseMatrix, tol: f64) -> SpdSolver {
        let max_iter = 20 * matrix.rows + 100;
        SpdSolver::Cg { matrix, tol, max_iter }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        match self {
            SpdSolver::Direct { matrix, .. } | SpdSolver::Cg { matrix, .. } => matrix,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix().rows
    }

    pub fn solve(&self, b: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            SpdSolver::Direct { factor, .. } => Ok(factor.solve(b)),
            SpdSolver::Cg { matrix, tol, max_iter } => Ok(cg_solve_from(matrix, b, guess, *tol, *max_iter)?.x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sparse_cholesky_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [1usize, 2, 7, 30] {
            // Random sparse SPD: diagonally dominant with a scattered pattern.
            let mut trip = Vec::new();
            for i in 0..n {
                for _ in 0..3 {
                    let j = rng.gen_range(0..n);
                    if j != i {
                        let v = rng.gen_range(-1.0..1.0);
                        trip.push((i, j, v));
                        trip.push((j, i, v));
                    }
                }
            }
            let a0 = SparseMatrix::from_triplets(n, n, trip.clone());
            for i in 0..n {
                let row_sum: f64 = a0.row(i).map(|(_, v)| v.abs()).sum();
                trip.push((i, i, row_sum + 0.5));
            }
            let a = SparseMatrix::from_triplets(n, n, trip);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = SparseCholesky::factor(&a).unwrap().solve(&b);
            let xd = dense_solve(&a.to_dense(), &b).unwrap();
            for (u, v) in x.iter().zip(&xd) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        let indefinite = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(matches!(SparseCholesky::factor(&indefinite), Err(Error::Singular(_))));
    }

    fn random_spd(n: usize, rng: &mut impl Rng) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(n, n);
        g.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let mut a = g.transpose().matmul(&g);
        for i in 0..n {
            a[(i, i)] += 0.1;
        }
        a
    }

    fn dense_to_sparse(a: &DenseMatrix) -> SparseMatrix {
        let mut t = Vec::new();
        for r in 0..a.rows {
            for c in 0..a.cols {
                if a[(r, c)] != 0.0 {
                    t.push((r, c, a[(r, c)]));
                }
            }
        }
        SparseMatrix::from_triplets(a.rows, a.cols, t)
    }

    /// Largest eigenvalue by bisection on positive definiteness of `s I - A`.
    fn eig_max_bisection(a: &DenseMatrix) -> f64 {
        let bound = (0..a.rows).map(|r| a.row(r).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let (mut lo, mut hi) = (0.0, bound + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let mut s = a.clone();
            for i in 0..a.rows {
                for j in 0..a.cols {
                    s[(i, j)] = -a[(i, j)];
                }
                s[(i, i)] += mid;
            }
            if DenseCholesky::factor(&s).is_ok() {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn triplets_are_summed_and_sorted() {
        let m = SparseMatrix::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 1, 2.0), (1, 2, 3.0), (1, 0, 1.0)]);
        assert_eq!(m.row_offsets, vec![0, 1, 3]);
        assert_eq!(m.col_indices, vec![1, 0, 2]);
        assert_eq!(m.values, vec![2.0, 1.0, 4.0]);
        assert_eq!(m.get(1, 2), 4.0);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn cg_identity_takes_one_iteration() {
        let id = SparseMatrix::from_triplets(4, 4, (0..4).map(|i| (i, i, 1.0)).collect());
        let b = [1.0, -2.0, 3.5, 0.25];
        let sol = cg_solve(&id, &b, 1e-12, 10).unwrap();
        assert_eq!(sol.iterations, 1);
        for (x, y) in sol.x.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn cg_diagonal() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, 4.0)]);
        let sol = cg_solve(&a, &[1.0, 4.0], 1e-14, 10).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-14 && (sol.x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cg_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = dense_to_sparse(&random_spd(30, &mut rng));
        let b: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        match cg_solve(&a, &b, 1e-14, 2) {
            Err(Error::CgNotConverged { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-14);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn cg_residual_history_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [5, 20, 60] {
            let a = dense_to_sparse(&random_spd(n, &mut rng));
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sol = cg_solve(&a, &b, 1e-12, 10_000).unwrap();
            for w in sol.history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} > {}", w[1], w[0]);
            }
            let x = dense_solve(&a.to_dense(), &b).unwrap();
            for (u, v) in sol.x.iter().zip(&x) {
                assert!((u - v).abs() < 1e-8 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn cyclic_solve_examples() {
        let x = cyclic_bidiagonal_solve(&[1.0; 5], &[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let x = cyclic_bidiagonal_solve(&[0.5; 3], &[0.5; 3], &[1.0, 0.0, 0.0]).unwrap();
        for (u, v) in x.iter().zip([1.0, 1.0, -1.0]) {
            assert!((u - v).abs() < 1e-15);
        }
        assert!(matches!(
            cyclic_bidiagonal_solve(&[0.5; 4], &[0.5; 4], &[1.0, 0.0, 0.0, 0.0]),
            Err(Error::Singular(_))
        ));
        assert!(matches!(cyclic_bidiagonal_solve_transpose(&[0.5; 4], &[0.5; 4], &[1.0; 4]), Err(Error::Singular(_))));
    }

    fn cyclic_dense(c: &[f64], d: &[f64]) -> DenseMatrix {
        let n = c.len();
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] += c[i];
            m[(i, (i + 1) % n)] += d[i];
        }
        m
    }

    proptest::proptest! {
        #[test]
        fn cyclic_solves_satisfy_banded_equations(
            n in 1usize..40,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = cyclic_dense(&c, &d);
            if let Ok(x) = cyclic_bidiagonal_solve(&c, &d, &b) {
                let r = m.mul_vec(&x);
                let scale = norm2(&b) + norm2(&x);
                for (ri, bi) in r.iter().zip(&b) {
                    proptest::prop_assert!((ri - bi).abs() <= 1e-12 * scale);
                }
            }
            if let Ok(y) = cyclic_bidiagonal_solve_transpose(&c, &d, &b) {
                let r = m.transpose().mul_vec(&y);
                let scale = norm2(&b) + norm2(&y);
                for (ri, bi) in r.iter().zip(&b) {
                    proptest::prop_assert!((ri - bi).abs() <= 1e-12 * scale);
                }
            }
        }

        #[test]
        fn dense_solve_reproduces_rhs(n in 1usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(n, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = dense_solve(&a, &b).unwrap();
            let r = a.mul_vec(&x);
            for (ri, bi) in r.iter().zip(&b) {
                proptest::prop_assert!((ri - bi).abs() <= 1e-12 * (norm2(&b) + a.max_abs() * norm2(&x)));
            }
        }
    }

    #[test]
    fn dense_examples() {
        assert!((dense_eig_max(&DenseMatrix::identity(4)).unwrap() - 1.0).abs() < 1e-14);
        let d = DenseMatrix::from_diagonal(&[1.0, 2.0, 3.0]);
        let x = dense_solve(&d, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 1.0, 1.0]);
        assert!(dense_solve(&DenseMatrix::zeros(2, 2), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn eig_max_matches_bisection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = random_spd(5, &mut rng);
            let lam = dense_eig_max(&a).unwrap();
            let oracle = eig_max_bisection(&a);
            assert!((lam - oracle).abs() <= 1e-8 * oracle, "{lam} vs {oracle}");
        }
    }

    #[test]
    fn cholesky_and_lu_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(8, &mut rng);
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x1 = DenseCholesky::factor(&a).unwrap().solve(&b);
        let x2 = dense_solve(&a, &b).unwrap();
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-10 * (1.0 + v.abs()));
        }
    }
}
