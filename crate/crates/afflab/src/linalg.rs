//! Dense small-matrix kernels: SVD via Jacobi rotations on `AᵀA`, the singular
//! value function, exterior (compound) powers, and restricted operator norms.
//!
//! Dimensions are capped at [`DIM_CAP`]; the compound-matrix blowup `C(d,k)` is
//! the practical limit for everything downstream.

use thiserror::Error;

/// Hard cap on ambient dimension.
pub const DIM_CAP: usize = 8;

/// Singular values below this are treated as numerically singular.
pub const SIGMA_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix entries must be finite")]
    NonFiniteEntries,
    #[error("dimension {0} out of range (1..={DIM_CAP})")]
    DimOutOfRange(usize),
    #[error("matrix is numerically singular (|det| = {0:.3e})")]
    Singular(f64),
    #[error("singular value underflow (sigma = {0:.3e})")]
    SigmaUnderflow(f64),
    #[error("exterior power grade {k} out of range for dimension {d}")]
    GradeOutOfRange { k: usize, d: usize },
    #[error("singular value exponent must be non-negative, got {0}")]
    NegativeExponent(f64),
    #[error("exponent {s} >= dimension {d}: use phi_s directly")]
    ExponentAboveDim { s: f64, d: usize },
    #[error("subspace ambient dimension {have} does not match matrix dimension {want}")]
    AmbientMismatch { have: usize, want: usize },
    #[error("subspace basis is degenerate or not orthonormal")]
    DegenerateBasis,
}

/// Square dense matrix, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if dim == 0 || dim > DIM_CAP {
            return Err(LinalgError::DimOutOfRange(dim));
        }
        assert_eq!(data.len(), dim * dim, "data length must be dim^2");
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFiniteEntries);
        }
        Ok(Matrix { dim, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            assert_eq!(r.len(), dim, "rows must form a square matrix");
            data.extend_from_slice(r);
        }
        Matrix::new(dim, data)
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Matrix { dim, data }
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self, LinalgError> {
        let dim = entries.len();
        let mut m = Matrix::new(dim, vec![0.0; dim * dim])?;
        for (i, &e) in entries.iter().enumerate() {
            m.data[i * dim + i] = e;
        }
        Ok(m)
    }

    pub fn scalar(dim: usize, c: f64) -> Self {
        let mut m = Matrix::identity(dim);
        for i in 0..dim {
            m.data[i * dim + i] = c;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| self.data[i * self.dim..(i + 1) * self.dim].to_vec())
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        let d = self.dim;
        let mut out = Matrix { dim: d, data: vec![0.0; d * d] };
        for i in 0..d {
            for j in 0..d {
                out.data[j * d + i] = self.data[i * d + j];
            }
        }
        out
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.dim, other.dim);
        let d = self.dim;
        let mut out = Matrix { dim: d, data: vec![0.0; d * d] };
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out.data[i * d + j] += a * other.data[k * d + j];
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.dim, other.dim);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix { dim: self.dim, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.dim, other.dim);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix { dim: self.dim, data }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        let data = self.data.iter().map(|x| c * x).collect();
        Matrix { dim: self.dim, data }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim);
        let d = self.dim;
        (0..d)
            .map(|i| (0..d).map(|j| self.data[i * d + j] * v[j]).sum())
            .collect()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Determinant by LU decomposition with partial pivoting.
    pub fn det(&self) -> f64 {
        let d = self.dim;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for col in 0..d {
            let mut piv = col;
            for r in col + 1..d {
                if a[r * d + col].abs() > a[piv * d + col].abs() {
                    piv = r;
                }
            }
            if a[piv * d + col] == 0.0 {
                return 0.0;
            }
            if piv != col {
                for j in 0..d {
                    a.swap(col * d + j, piv * d + j);
                }
                det = -det;
            }
            det *= a[col * d + col];
            for r in col + 1..d {
                let f = a[r * d + col] / a[col * d + col];
                for j in col..d {
                    a[r * d + j] -= f * a[col * d + j];
                }
            }
        }
        det
    }

    /// Inverse by Gauss-Jordan with partial pivoting.
    pub fn inverse(&self) -> Result<Matrix, LinalgError> {
        let d = self.dim;
        let mut a = self.data.clone();
        let mut inv = Matrix::identity(d).data;
        for col in 0..d {
            let mut piv = col;
            for r in col + 1..d {
                if a[r * d + col].abs() > a[piv * d + col].abs() {
                    piv = r;
                }
            }
            let p = a[piv * d + col];
            if p.abs() < SIGMA_FLOOR {
                return Err(LinalgError::Singular(p.abs()));
            }
            if piv != col {
                for j in 0..d {
                    a.swap(col * d + j, piv * d + j);
                    inv.swap(col * d + j, piv * d + j);
                }
            }
            let p = a[col * d + col];
            for j in 0..d {
                a[col * d + j] /= p;
                inv[col * d + j] /= p;
            }
            for r in 0..d {
                if r == col {
                    continue;
                }
                let f = a[r * d + col];
                if f == 0.0 {
                    continue;
                }
                for j in 0..d {
                    a[r * d + j] -= f * a[col * d + j];
                    inv[r * d + j] -= f * inv[col * d + j];
                }
            }
        }
        Ok(Matrix { dim: d, data: inv })
    }

    /// Solve `self * x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        Ok(self.inverse()?.apply(b))
    }

    /// Checks invertibility against a machine-scaled tolerance. Rows and
    /// columns are equilibrated first so that strongly graded but
    /// well-determined matrices (tiny diagonals with larger off-diagonal
    /// entries) are not misclassified as singular.
    pub fn check_invertible(&self) -> Result<(), LinalgError> {
        let d = self.dim;
        let mut scaled = self.clone();
        for i in 0..d {
            let r = (0..d).map(|j| scaled.get(i, j).abs()).fold(0.0f64, f64::max);
            if r == 0.0 || !r.is_finite() {
                return Err(LinalgError::Singular(0.0));
            }
            for j in 0..d {
                scaled.set(i, j, scaled.get(i, j) / r);
            }
        }
        for j in 0..d {
            let c = (0..d).map(|i| scaled.get(i, j).abs()).fold(0.0f64, f64::max);
            if c == 0.0 {
                return Err(LinalgError::Singular(0.0));
            }
            for i in 0..d {
                scaled.set(i, j, scaled.get(i, j) / c);
            }
        }
        let det = scaled.det().abs();
        if !det.is_finite() || det < 1e-13 {
            return Err(LinalgError::Singular(det));
        }
        Ok(())
    }

    /// Operator (spectral) norm.
    pub fn op_norm(&self) -> f64 {
        svd(self).map(|s| s.values[0]).unwrap_or(0.0)
    }

    /// Condition number `sigma_1 / sigma_d`.
    pub fn cond(&self) -> f64 {
        match svd(self) {
            Ok(s) => {
                let last = *s.values.last().unwrap();
                if last <= 0.0 {
                    f64::INFINITY
                } else {
                    s.values[0] / last
                }
            }
            Err(_) => f64::INFINITY,
        }
    }
}

/// Singular values, sorted non-increasing.
#[derive(Debug, Clone)]
pub struct SingularData {
    pub values: Vec<f64>,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns of the
/// returned matrix, sorted by decreasing eigenvalue.
pub fn symmetric_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    let d = m.dim;
    let mut a = m.clone();
    let mut v = Matrix::identity(d);
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += a.get(i, j).abs();
            }
        }
        let scale = a.max_abs().max(1e-300);
        if off <= 1e-15 * scale * (d * d) as f64 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // A <- Jᵀ A J on rows/cols p,q
                for k in 0..d {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..d {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..d {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..d).map(|i| (a.get(i, i), i)).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let vals = pairs.iter().map(|p| p.0).collect();
    let mut vecs = Matrix::identity(d);
    for (col, (_, src)) in pairs.iter().enumerate() {
        for r in 0..d {
            vecs.set(r, col, v.get(r, *src));
        }
    }
    (vals, vecs)
}

/// Singular values of a square matrix via one-sided (Hestenes) Jacobi
/// rotations. One-sided Jacobi retains high relative accuracy on the small
/// singular values, which matters for long contraction products.
pub fn svd(m: &Matrix) -> Result<SingularData, LinalgError> {
    Ok(svd_with_vectors(m)?.0)
}

/// One-sided Jacobi SVD. Columns of the returned matrix are the right
/// singular vectors, in the same order as the values.
pub fn svd_with_vectors(m: &Matrix) -> Result<(SingularData, Matrix), LinalgError> {
    if m.data.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFiniteEntries);
    }
    let scale = m.max_abs();
    if scale == 0.0 {
        return Err(LinalgError::Singular(0.0));
    }
    let d = m.dim;
    // work on columns of the scaled matrix
    let ms = m.scale(1.0 / scale);
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| ms.get(i, j)).collect()).collect();
    let mut v = Matrix::identity(d);
    let eps = 1e-15;
    for _sweep in 0..60 {
        let mut converged = true;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..d {
                    let cp = cols[p][i];
                    let cq = cols[q][i];
                    cols[p][i] = c * cp - s * cq;
                    cols[q][i] = s * cp + c * cq;
                }
                for i in 0..d {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if converged {
            break;
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..d).map(|j| (norm(&cols[j]) * scale, j)).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut vecs = Matrix::identity(d);
    for (col, (_, src)) in pairs.iter().enumerate() {
        for r in 0..d {
            vecs.set(r, col, v.get(r, *src));
        }
    }
    Ok((SingularData { values }, vecs))
}

/// Null space of `m` at relative tolerance `tol`: orthonormal basis vectors.
pub fn null_space(m: &Matrix, tol: f64) -> Vec<Vec<f64>> {
    let (sd, v) = match svd_with_vectors(m) {
        Ok(x) => x,
        Err(_) => return Vec::new(),
    };
    let d = m.dim;
    let smax = sd.values[0].max(1e-300);
    let mut basis = Vec::new();
    for (i, &s) in sd.values.iter().enumerate() {
        if s <= tol * smax {
            basis.push((0..d).map(|r| v.get(r, i)).collect());
        }
    }
    basis
}

/// Singular value function `φ^s`.
///
/// `σ_1⋯σ_⌊s⌋ σ_⌈s⌉^{s−⌊s⌋}` for `0 ≤ s ≤ d`, `|det|^{s/d}` for `s > d`.
pub fn phi_s(m: &Matrix, s: f64) -> Result<f64, LinalgError> {
    Ok(log_phi_s(m, s)?.exp())
}

/// `log φ^s(M)`; preferred for long products.
pub fn log_phi_s(m: &Matrix, s: f64) -> Result<f64, LinalgError> {
    if s < 0.0 {
        return Err(LinalgError::NegativeExponent(s));
    }
    let d = m.dim as f64;
    // at s = d both branches coincide; the determinant route is exact there
    if s >= d {
        m.check_invertible()?;
        return Ok((s / d) * m.det().abs().ln());
    }
    // below d only the top ⌈s⌉ singular values enter, so strongly graded
    // maps whose smallest values underflow are still handled
    let sd = svd(m)?;
    log_phi_of_singular_values(&sd.values, s)
}

/// `log φ^s` from precomputed sorted singular values.
pub fn log_phi_of_singular_values(sigma: &[f64], s: f64) -> Result<f64, LinalgError> {
    let d = sigma.len() as f64;
    if s < 0.0 {
        return Err(LinalgError::NegativeExponent(s));
    }
    // only the singular values entering the product must be representable
    let used = if s >= d { sigma.len() } else { s.ceil() as usize };
    for &v in sigma.iter().take(used) {
        if v < SIGMA_FLOOR {
            return Err(LinalgError::SigmaUnderflow(v));
        }
    }
    if s > d {
        let log_det: f64 = sigma.iter().map(|v| v.ln()).sum();
        return Ok((s / d) * log_det);
    }
    let k = s.floor() as usize;
    let frac = s - s.floor();
    let mut acc = 0.0;
    for &v in sigma.iter().take(k) {
        acc += v.ln();
    }
    if frac > 0.0 {
        acc += frac * sigma[k].ln();
    }
    Ok(acc)
}

/// Lexicographically ordered k-element subsets of `{0,…,d-1}`.
pub fn k_subsets(d: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..d {
            cur.push(i);
            rec(i + 1, d, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, d, k, &mut Vec::new(), &mut out);
    out
}

fn minor(m: &Matrix, rows: &[usize], cols: &[usize]) -> f64 {
    let k = rows.len();
    let mut sub = Matrix { dim: k, data: vec![0.0; k * k] };
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            sub.set(i, j, m.get(r, c));
        }
    }
    sub.det()
}

/// k-th exterior (compound) power: the `C(d,k)×C(d,k)` matrix of k×k minors in
/// lexicographic index order. Multiplicative: `(MN)^{∧k} = M^{∧k} N^{∧k}`.
pub fn exterior_power(m: &Matrix, k: usize) -> Result<Matrix, LinalgError> {
    let d = m.dim;
    if k < 1 || k > d {
        return Err(LinalgError::GradeOutOfRange { k, d });
    }
    let subsets = k_subsets(d, k);
    let n = subsets.len();
    if n > DIM_CAP * DIM_CAP {
        // C(8,4) = 70; allow compounds beyond the ambient cap.
    }
    let mut out = Matrix { dim: n, data: vec![0.0; n * n] };
    for (i, rows) in subsets.iter().enumerate() {
        for (j, cols) in subsets.iter().enumerate() {
            out.set(i, j, minor(m, rows, cols));
        }
    }
    Ok(out)
}

/// `φ^s` through the exterior-power norm identity
/// `φ^s(A) = ‖A^{∧⌊s⌋}‖^{⌈s⌉−s} ‖A^{∧⌈s⌉}‖^{s−⌊s⌋}`, for `0 ≤ s < d`.
pub fn phi_via_exterior(m: &Matrix, s: f64) -> Result<f64, LinalgError> {
    if s < 0.0 {
        return Err(LinalgError::NegativeExponent(s));
    }
    let d = m.dim;
    if s >= d as f64 {
        return Err(LinalgError::ExponentAboveDim { s, d });
    }
    m.check_invertible()?;
    let lo = s.floor() as usize;
    let hi = s.ceil() as usize;
    let frac = s - s.floor();
    // ‖A^{∧0}‖ = 1 by convention.
    let norm_lo = if lo == 0 { 1.0 } else { exterior_power(m, lo)?.op_norm() };
    if frac == 0.0 {
        return Ok(norm_lo);
    }
    let norm_hi = exterior_power(m, hi)?.op_norm();
    Ok(norm_lo.powf(1.0 - frac) * norm_hi.powf(frac))
}

/// Linear subspace given by an orthonormal basis.
#[derive(Debug, Clone)]
pub struct Subspace {
    pub ambient_dim: usize,
    pub basis: Vec<Vec<f64>>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gram-Schmidt with drop tolerance; returns an orthonormal spanning set.
pub fn orthonormalize(vectors: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        // two rounds of re-orthogonalization for stability
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
        }
        let n = norm(&w);
        if n > tol * norm(v).max(1.0) {
            for wi in w.iter_mut() {
                *wi /= n;
            }
            basis.push(w);
        }
    }
    basis
}

impl Subspace {
    /// Builds a subspace from (possibly redundant) spanning vectors.
    pub fn from_spanning(ambient_dim: usize, vectors: &[Vec<f64>], tol: f64) -> Result<Self, LinalgError> {
        for v in vectors {
            if v.len() != ambient_dim {
                return Err(LinalgError::AmbientMismatch { have: v.len(), want: ambient_dim });
            }
        }
        let basis = orthonormalize(vectors, tol);
        if basis.is_empty() {
            return Err(LinalgError::DegenerateBasis);
        }
        Ok(Subspace { ambient_dim, basis })
    }

    pub fn full(ambient_dim: usize) -> Self {
        let basis = (0..ambient_dim)
            .map(|i| {
                let mut e = vec![0.0; ambient_dim];
                e[i] = 1.0;
                e
            })
            .collect();
        Subspace { ambient_dim, basis }
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    /// Orthogonal projection of `v` onto this subspace.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim];
        for b in &self.basis {
            let c = dot(v, b);
            for (o, bi) in out.iter_mut().zip(b) {
                *o += c * bi;
            }
        }
        out
    }

    /// Distance of a unit vector to the subspace.
    pub fn residual(&self, v: &[f64]) -> f64 {
        let p = self.project(v);
        let diff: Vec<f64> = v.iter().zip(&p).map(|(a, b)| a - b).collect();
        norm(&diff)
    }

    /// Orthonormal basis of the orthogonal complement.
    pub fn complement(&self, tol: f64) -> Vec<Vec<f64>> {
        let d = self.ambient_dim;
        let mut vecs = self.basis.clone();
        let mut comp = Vec::new();
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            let before = vecs.len();
            vecs = orthonormalize(&[vecs.clone(), vec![e.clone()]].concat(), tol);
            if vecs.len() > before {
                comp.push(vecs.last().unwrap().clone());
            }
        }
        comp
    }

    pub fn check_orthonormal(&self, tol: f64) -> Result<(), LinalgError> {
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot(a, b) - want).abs() > tol {
                    return Err(LinalgError::DegenerateBasis);
                }
            }
        }
        Ok(())
    }
}

/// Norm of `M` restricted to the subspace `W`: the largest singular value of
/// `M` composed with an orthonormal basis of `W`.
pub fn restricted_norm(m: &Matrix, w: &Subspace) -> Result<f64, LinalgError> {
    if w.ambient_dim != m.dim {
        return Err(LinalgError::AmbientMismatch { have: w.ambient_dim, want: m.dim });
    }
    w.check_orthonormal(1e-8)?;
    let r = w.rank();
    // Gram matrix of the images M b_i
    let images: Vec<Vec<f64>> = w.basis.iter().map(|b| m.apply(b)).collect();
    let mut gram = Matrix { dim: r, data: vec![0.0; r * r] };
    let scale = images
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |mx, x| mx.max(x.abs()))
        .max(1e-300);
    for i in 0..r {
        for j in 0..r {
            let g: f64 = images[i]
                .iter()
                .zip(&images[j])
                .map(|(a, b)| (a / scale) * (b / scale))
                .sum();
            gram.set(i, j, g);
        }
    }
    let (eigs, _) = symmetric_eigen(&gram);
    Ok(eigs[0].max(0.0).sqrt() * scale)
}

/// Matrix with its magnitude tracked separately in log scale; the stored
/// matrix is kept normalized so long products never underflow.
#[derive(Debug, Clone)]
pub struct ScaledMatrix {
    pub mat: Matrix,
    pub log_scale: f64,
}

impl ScaledMatrix {
    pub fn from_matrix(m: &Matrix) -> Self {
        let scale = m.max_abs();
        assert!(scale > 0.0, "zero matrix cannot be scaled");
        ScaledMatrix { mat: m.scale(1.0 / scale), log_scale: scale.ln() }
    }

    pub fn identity(dim: usize) -> Self {
        ScaledMatrix { mat: Matrix::identity(dim), log_scale: 0.0 }
    }

    /// Product with per-step renormalization.
    pub fn mul(&self, other: &ScaledMatrix) -> ScaledMatrix {
        let prod = self.mat.mul(&other.mat);
        let scale = prod.max_abs();
        if scale == 0.0 {
            // exact zero product (factors below the subnormal range); kept as
            // the zero matrix with log_scale −∞ so φ^s evaluates to zero
            return ScaledMatrix { mat: prod, log_scale: f64::NEG_INFINITY };
        }
        ScaledMatrix {
            mat: prod.scale(1.0 / scale),
            log_scale: self.log_scale + other.log_scale + scale.ln(),
        }
    }

    /// `log φ^s` of the represented matrix: `φ^s(cM) = c^s φ^s(M)`.
    /// The zero matrix yields `-∞` for `s > 0`.
    pub fn log_phi_s(&self, s: f64) -> Result<f64, LinalgError> {
        if s > 0.0 && (self.mat.max_abs() == 0.0 || self.log_scale == f64::NEG_INFINITY) {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(log_phi_s(&self.mat, s)? + s * self.log_scale)
    }

    /// Sorted singular values in log scale: `ln σ_i` of the represented matrix.
    pub fn log_singular_values(&self) -> Result<Vec<f64>, LinalgError> {
        let sd = svd(&self.mat)?;
        for &v in &sd.values {
            if v < SIGMA_FLOOR {
                return Err(LinalgError::SigmaUnderflow(v));
            }
        }
        Ok(sd.values.iter().map(|v| v.ln() + self.log_scale).collect())
    }
}

/// `log φ^s` from log-scale sorted singular values.
pub fn log_phi_from_log_sigma(log_sigma: &[f64], s: f64) -> Result<f64, LinalgError> {
    if s < 0.0 {
        return Err(LinalgError::NegativeExponent(s));
    }
    let d = log_sigma.len() as f64;
    if s > d {
        let log_det: f64 = log_sigma.iter().sum();
        return Ok((s / d) * log_det);
    }
    let k = s.floor() as usize;
    let frac = s - s.floor();
    let mut acc: f64 = log_sigma.iter().take(k).sum();
    if frac > 0.0 {
        acc += frac * log_sigma[k];
    }
    Ok(acc)
}
