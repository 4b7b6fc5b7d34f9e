//! Minimal dense linear algebra over 64-bit floats.
//!
//! `Tensor` is a row-major array of rank 1–3 and is the only numeric
//! carrier in the crate. All reductions run in a fixed row-major loop
//! order so results are bit-stable per platform. Vectorisation of a
//! matrix (`vec_cols`) is column-major, and every Kronecker ordering in
//! the crate follows `input_factor ⊗ output_factor` to match it.

use crate::error::{Error, Result};

/// Dense row-major array, rank 1–3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Rank(format!(
                "rank must be 1..=3, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Dimension("all extents must be >= 1".into()));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty());
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        debug_assert!(!shape.is_empty() && shape.iter().all(|&e| e >= 1));
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, &v) in entries.iter().enumerate() {
            t.data[i * n + i] = v;
        }
        t
    }

    /// Build a matrix from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        debug_assert!(rows >= 1 && cols >= 1);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] += v;
    }

    /// Element of a rank-3 tensor at (plane, row, col).
    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }

    fn require_matrix(&self, what: &str) -> Result<()> {
        if self.rank() != 2 {
            return Err(Error::Rank(format!(
                "{what} needs a rank-2 operand, got rank {}",
                self.rank()
            )));
        }
        Ok(())
    }

    /// Matrix product with a fixed row-major inner loop.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Ok(out)
    }

    /// Kronecker product: block (i, j) of the result is `self[i,j] * other`.
    pub fn kron(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("kron")?;
        other.require_matrix("kron")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let (p, q) = (other.shape[0], other.shape[1]);
        let mut out = Tensor::zeros(&[m * p, n * q]);
        for i in 0..m {
            for j in 0..n {
                let s = self.at(i, j);
                for bi in 0..p {
                    for bj in 0..q {
                        out.set(i * p + bi, j * q + bj, s * other.at(bi, bj));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Column-major vectorisation (stack the columns).
    pub fn vec_cols(&self) -> Result<Tensor> {
        self.require_matrix("vec_cols")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(self.at(i, j));
            }
        }
        Ok(Tensor::vector(data))
    }

    /// Inverse of [`vec_cols`](Self::vec_cols) for the given matrix shape.
    pub fn unvec_cols(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::Rank("unvec_cols needs a rank-1 operand".into()));
        }
        if self.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements to {rows}x{cols}",
                self.len()
            )));
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for j in 0..cols {
            for i in 0..rows {
                out.set(i, j, self.data[j * rows + i]);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        debug_assert_eq!(self.rank(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.set(j, i, self.at(i, j));
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension("add: shapes differ".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension("sub: shapes differ".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// In-place `self += s * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Rank-1 update `self += s * u vᵀ` on a matrix.
    pub fn add_outer_scaled(&mut self, u: &[f64], v: &[f64], s: f64) {
        debug_assert_eq!(self.shape, vec![u.len(), v.len()]);
        let n = v.len();
        for (i, &ui) in u.iter().enumerate() {
            let w = s * ui;
            if w == 0.0 {
                continue;
            }
            let dst = &mut self.data[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += w * v[j];
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &self.data[r * n..(r + 1) * n]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension("dot: shapes differ".into()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Lower-triangular Cholesky factor of an SPD matrix.
    ///
    /// A non-positive pivot reports its index so the caller can point at
    /// the offending diagonal entry.
    pub fn cholesky(&self) -> Result<Tensor> {
        self.require_matrix("cholesky")?;
        let n = self.shape[0];
        if self.shape[1] != n {
            return Err(Error::Dimension("cholesky needs a square matrix".into()));
        }
        let mut l = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.at(i, j);
                for k in 0..j {
                    sum -= l.at(i, k) * l.at(j, k);
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::NotPositiveDefinite {
                            pivot: i,
                            value: sum,
                        });
                    }
                    l.set(i, i, sum.sqrt());
                } else {
                    l.set(i, j, sum / l.at(j, j));
                }
            }
        }
        Ok(l)
    }

    /// Solve `self * X = rhs` for SPD `self` via Cholesky.
    pub fn solve_spd(&self, rhs: &Tensor) -> Result<Tensor> {
        let l = self.cholesky()?;
        l.chol_solve(rhs)
    }

    /// Solve `L Lᵀ X = rhs` where `self` is the lower Cholesky factor.
    pub fn chol_solve(&self, rhs: &Tensor) -> Result<Tensor> {
        let l = self;
        let rhs2 = if rhs.rank() == 1 {
            Tensor::matrix(rhs.len(), 1, rhs.data.clone())?
        } else {
            rhs.clone()
        };
        if rhs2.rows() != l.rows() {
            return Err(Error::Dimension(
                "chol_solve: rhs rows do not match matrix".into(),
            ));
        }
        let n = l.rows();
        let k = rhs2.cols();
        // forward substitution L y = rhs
        let mut y = Tensor::zeros(&[n, k]);
        for c in 0..k {
            for i in 0..n {
                let mut sum = rhs2.at(i, c);
                for j in 0..i {
                    sum -= l.at(i, j) * y.at(j, c);
                }
                y.set(i, c, sum / l.at(i, i));
            }
        }
        // back substitution Lᵀ x = y
        let mut x = Tensor::zeros(&[n, k]);
        for c in 0..k {
            for i in (0..n).rev() {
                let mut sum = y.at(i, c);
                for j in i + 1..n {
                    sum -= l.at(j, i) * x.at(j, c);
                }
                x.set(i, c, sum / l.at(i, i));
            }
        }
        if rhs.rank() == 1 {
            return Ok(Tensor::vector(x.data));
        }
        Ok(x)
    }

    /// Log-determinant of an SPD matrix via its Cholesky factor.
    pub fn log_det_spd(&self) -> Result<f64> {
        let l = self.cholesky()?;
        let n = l.rows();
        let mut acc = 0.0;
        for i in 0..n {
            acc += l.at(i, i).ln();
        }
        Ok(2.0 * acc)
    }

    /// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
    ///
    /// The input is symmetrised as `(a + aᵀ)/2` first. Eigenvalues come
    /// back ascending with eigenvector columns aligned to them.
    pub fn sym_eig(&self) -> Result<SymEig> {
        self.require_matrix("sym_eig")?;
        let n = self.shape[0];
        if self.shape[1] != n {
            return Err(Error::Dimension("sym_eig needs a square matrix".into()));
        }
        let mut a = Tensor::from_fn(n, n, |i, j| 0.5 * (self.at(i, j) + self.at(j, i)));
        let mut q = Tensor::identity(n);
        let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
        let tol = 1e-15 * scale;
        const MAX_SWEEPS: usize = 64;

        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for r in p + 1..n {
                    off += a.at(p, r) * a.at(p, r);
                }
            }
            if off.sqrt() <= tol {
                converged = true;
                break;
            }
            for p in 0..n {
                for r in p + 1..n {
                    let apq = a.at(p, r);
                    if apq.abs() <= tol / (n as f64) {
                        continue;
                    }
                    let app = a.at(p, p);
                    let aqq = a.at(r, r);
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.at(k, p);
                        let akq = a.at(k, r);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, r, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.at(p, k);
                        let aqk = a.at(r, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(r, k, s * apk + c * aqk);
                    }
                    for k in 0..n {
                        let qkp = q.at(k, p);
                        let qkq = q.at(k, r);
                        q.set(k, p, c * qkp - s * qkq);
                        q.set(k, r, s * qkp + c * qkq);
                    }
                }
            }
        }
        if !converged {
            // final check after the last sweep
            let mut off = 0.0;
            for p in 0..n {
                for r in p + 1..n {
                    off += a.at(p, r) * a.at(p, r);
                }
            }
            if off.sqrt() > tol.max(1e-12 * scale) {
                return Err(Error::Numeric(format!(
                    "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps (off-diagonal {off:e})"
                )));
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a.at(i, i).partial_cmp(&a.at(j, j)).unwrap());
        let eigenvalues: Vec<f64> = order.iter().map(|&i| a.at(i, i)).collect();
        let eigenvectors = Tensor::from_fn(n, n, |i, j| q.at(i, order[j]));
        Ok(SymEig {
            eigenvalues,
            eigenvectors,
        })
    }
}

/// Eigendecomposition of a symmetric matrix: `a = Q Λ Qᵀ`.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Ascending eigenvalues.
    pub eigenvalues: Vec<f64>,
    /// Orthogonal matrix whose columns align with the eigenvalues.
    pub eigenvectors: Tensor,
}

impl SymEig {
    /// Reassemble `Q Λ Qᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let n = self.eigenvalues.len();
        let q = &self.eigenvectors;
        Tensor::from_fn(n, n, |i, j| {
            let mut sum = 0.0;
            for (k, &lam) in self.eigenvalues.iter().enumerate() {
                sum += q.at(i, k) * lam * q.at(j, k);
            }
            sum
        })
    }
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖` (falls back to the
/// absolute norm when `b` is zero).
pub fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    let denom = b.frobenius_norm();
    let diff = a.sub(b).expect("rel_frobenius: shape mismatch");
    if denom == 0.0 {
        diff.frobenius_norm()
    } else {
        diff.frobenius_norm() / denom
    }
}
