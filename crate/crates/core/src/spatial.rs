//! Complex vector and matrix kernels for subspace work.
//!
//! Inner products follow ⟨a, b⟩ = aᴴb: the left argument is conjugated.

use std::f64::consts::PI;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;

/// Numerical tolerances used across the crate.
pub mod tol {
    /// Allowed deviation of a unit vector's norm from one.
    pub const UNIT_NORM: f64 = 1e-9;
    /// Allowed residual inner product after an orthogonalizing step, relative to the operand norms.
    pub const ORTHOGONALITY: f64 = 1e-10;
    /// Largest accepted condition number for a Gram matrix that gets inverted.
    pub const MAX_CONDITION: f64 = 1e8;
    /// Output norm, relative to the input norm, below which a de-oriented vector counts as zero.
    pub const DEGENERATE: f64 = 1e-9;
    /// Relative Hermitian-symmetry tolerance for covariance inputs.
    pub const HERMITIAN: f64 = 1e-9;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVector(Vec<C64>);

impl ComplexVector {
    pub fn new(entries: Vec<C64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("vector must have at least one entry"));
        }
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(invalid("vector entries must be finite"));
        }
        Ok(Self(entries))
    }

    /// Builds a vector from real parts only.
    pub fn from_real(entries: &[f64]) -> Result<Self> {
        Self::new(entries.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector length must be positive");
        Self(vec![C64::new(0.0, 0.0); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.0
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Hermitian inner product selfᴴ·other.
    pub fn dot(&self, other: &ComplexVector) -> C64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn scale(&self, c: C64) -> ComplexVector {
        ComplexVector(self.0.iter().map(|z| z * c).collect())
    }

    pub fn scale_real(&self, c: f64) -> ComplexVector {
        ComplexVector(self.0.iter().map(|z| z * c).collect())
    }

    /// Returns the vector scaled to unit norm, or an error for a zero vector.
    pub fn normalized(&self) -> Result<ComplexVector> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(invalid("cannot normalize a zero vector"));
        }
        Ok(self.scale_real(1.0 / n))
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= tol::UNIT_NORM
    }

    pub fn conj(&self) -> ComplexVector {
        ComplexVector(self.0.iter().map(|z| z.conj()).collect())
    }

    /// Outer product self·otherᴴ.
    pub fn outer(&self, other: &ComplexVector) -> ComplexMatrix {
        let mut m = ComplexMatrix::zeros(self.len(), other.len());
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in other.0.iter().enumerate() {
                m[(i, j)] = a * b.conj();
            }
        }
        m
    }

    pub fn iter(&self) -> std::slice::Iter<'_, C64> {
        self.0.iter()
    }
}

impl Index<usize> for ComplexVector {
    type Output = C64;
    fn index(&self, i: usize) -> &C64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ComplexVector {
    fn index_mut(&mut self, i: usize) -> &mut C64 {
        &mut self.0[i]
    }
}

impl Add for &ComplexVector {
    type Output = ComplexVector;
    fn add(self, rhs: &ComplexVector) -> ComplexVector {
        assert_eq!(self.len(), rhs.len(), "length mismatch");
        ComplexVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &ComplexVector {
    type Output = ComplexVector;
    fn sub(self, rhs: &ComplexVector) -> ComplexVector {
        assert_eq!(self.len(), rhs.len(), "length mismatch");
        ComplexVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

/// Dense row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("matrix dimensions must be positive"));
        }
        if rows * cols != data.len() {
            return Err(invalid(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Stacks row vectors into a matrix.
    pub fn from_rows(rows: &[ComplexVector]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| invalid("no rows"))?;
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(invalid("rows differ in length"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), first.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn row_slice(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row(&self, i: usize) -> ComplexVector {
        ComplexVector(self.data[i * self.cols..(i + 1) * self.cols].to_vec())
    }

    pub fn column(&self, j: usize) -> ComplexVector {
        ComplexVector((0..self.rows).map(|i| self[(i, j)]).collect())
    }

    pub fn hermitian(&self) -> ComplexMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn mul_vec(&self, v: &ComplexVector) -> ComplexVector {
        assert_eq!(self.cols, v.len(), "shape mismatch in matrix-vector product");
        let out = self
            .data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v.iter()).map(|(a, b)| a * b).sum())
            .collect();
        ComplexVector(out)
    }

    /// selfᴴ·v without forming the transpose.
    pub fn hermitian_mul_vec(&self, v: &ComplexVector) -> ComplexVector {
        assert_eq!(self.rows, v.len(), "shape mismatch in adjoint product");
        let mut out = vec![C64::new(0.0, 0.0); self.cols];
        for (row, x) in self.data.chunks_exact(self.cols).zip(v.iter()) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a.conj() * x;
            }
        }
        ComplexVector(out)
    }

    pub fn mul_mat(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.cols, other.rows, "shape mismatch in matrix product");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// self·selfᴴ.
    pub fn gram_rows(&self) -> ComplexMatrix {
        let mut out = Self::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            let ri = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in i..self.rows {
                let rj = &self.data[j * self.cols..(j + 1) * self.cols];
                let s: C64 = ri.iter().zip(rj).map(|(a, b)| a * b.conj()).sum();
                out[(i, j)] = s;
                out[(j, i)] = s.conj();
            }
        }
        out
    }

    pub fn scale_real(&self, c: f64) -> ComplexMatrix {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }

    /// Adds c·x·xᴴ in place.
    pub fn add_outer(&mut self, x: &ComplexVector, c: f64) {
        assert!(self.rows == self.cols && self.rows == x.len(), "shape mismatch");
        for i in 0..self.rows {
            for j in 0..self.cols {
                self.data[i * self.cols + j] += x[i] * x[j].conj() * c;
            }
        }
    }

    /// self += hᴴh.
    pub fn add_gram(&mut self, h: &ComplexMatrix) {
        assert!(self.rows == self.cols && self.cols == h.cols, "shape mismatch");
        let n = self.cols;
        for r in 0..h.rows {
            let row = h.row_slice(r);
            for i in 0..n {
                let a = row[i].conj();
                for j in 0..n {
                    self.data[i * n + j] += a * row[j];
                }
            }
        }
    }

    /// self += c·ggᴴ.
    pub fn add_outer_gram(&mut self, g: &ComplexMatrix, c: f64) {
        assert!(self.rows == self.cols && self.rows == g.rows, "shape mismatch");
        let n = self.rows;
        for i in 0..n {
            for j in 0..n {
                let s: C64 = g.row_slice(i).iter().zip(g.row_slice(j)).map(|(a, b)| a * b.conj()).sum();
                self.data[i * n + j] += s * c;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_hermitian(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.frobenius_norm().max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in i..self.cols {
                if (self[(i, j)] - self[(j, i)].conj()).norm() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> Result<ComplexMatrix> {
        if !self.is_square() {
            return Err(invalid("only square matrices can be inverted"));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let scale = self.norm_one();
        if scale == 0.0 {
            return Err(Error::RankDeficient(f64::INFINITY));
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[(x, col)].norm().total_cmp(&a[(y, col)].norm()))
                .expect("non-empty pivot range");
            if a[(pivot, col)].norm() <= f64::EPSILON * scale {
                return Err(Error::RankDeficient(f64::INFINITY));
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(pivot * n + j, col * n + j);
                    inv.data.swap(pivot * n + j, col * n + j);
                }
            }
            let d = a[(col, col)].inv();
            for j in 0..n {
                a[(col, j)] *= d;
                inv[(col, j)] *= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[(r, col)];
                if f == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    let av = a[(col, j)];
                    let iv = inv[(col, j)];
                    a[(r, j)] -= f * av;
                    inv[(r, j)] -= f * iv;
                }
            }
        }
        Ok(inv)
    }

    /// Inverse plus the 1-norm condition number κ₁ = ‖A‖₁·‖A⁻¹‖₁.
    pub fn inverse_with_condition(&self) -> Result<(ComplexMatrix, f64)> {
        let inv = self.inverse()?;
        let cond = self.norm_one() * inv.norm_one();
        Ok((inv, cond))
    }

    /// Solves self·x = b.
    pub fn solve(&self, b: &ComplexVector) -> Result<ComplexVector> {
        Ok(self.inverse()?.mul_vec(b))
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert!(self.rows == rhs.rows && self.cols == rhs.cols, "shape mismatch");
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert!(self.rows == rhs.rows && self.cols == rhs.cols, "shape mismatch");
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul<&ComplexVector> for &ComplexMatrix {
    type Output = ComplexVector;
    fn mul(self, rhs: &ComplexVector) -> ComplexVector {
        self.mul_vec(rhs)
    }
}

/// Uniform linear array response toward `angle`, measured from the array axis.
pub fn steering_vector(n_antennas: usize, spacing: f64, angle: f64) -> Result<ComplexVector> {
    if n_antennas == 0 {
        return Err(invalid("steering vector needs at least one antenna"));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(invalid("antenna spacing must be positive"));
    }
    if !angle.is_finite() {
        return Err(invalid("steering angle must be finite"));
    }
    let amp = 1.0 / (n_antennas as f64).sqrt();
    let step = -2.0 * PI * spacing * angle.cos();
    Ok(ComplexVector(
        (0..n_antennas)
            .map(|i| C64::from_polar(amp, step * i as f64))
            .collect(),
    ))
}

fn check_unit_pair(a: &ComplexVector, b: &ComplexVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if !a.is_unit() || !b.is_unit() {
        return Err(invalid("inputs must be unit-norm"));
    }
    Ok(())
}

/// (1/√2)·‖aaᴴ − bbᴴ‖_F, the distance between the lines spanned by `a` and `b`.
pub fn chordal_distance(a: &ComplexVector, b: &ComplexVector) -> Result<f64> {
    check_unit_pair(a, b)?;
    let mut acc = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            acc += (a[i] * a[j].conj() - b[i] * b[j].conj()).norm_sqr();
        }
    }
    Ok((acc / 2.0).sqrt().min(1.0))
}

/// Component of `v` along `reference`.
pub fn project_onto(v: &ComplexVector, reference: &ComplexVector) -> Result<ComplexVector> {
    if v.len() != reference.len() {
        return Err(invalid("length mismatch"));
    }
    let rr = reference.norm_sqr();
    if rr == 0.0 {
        return Err(invalid("cannot project onto a zero vector"));
    }
    Ok(reference.scale(reference.dot(v) / rr))
}

/// Removes from `u` its component along `interferer`.
pub fn deorient_against(u: &ComplexVector, interferer: &ComplexVector) -> Result<ComplexVector> {
    let p = project_onto(u, interferer)?;
    let out = u - &p;
    if out.norm() <= tol::DEGENERATE * u.norm() {
        return Err(Error::DegenerateNullSpace);
    }
    Ok(out)
}

/// 1 − |aᴴb|².
pub fn orthogonality_measure(a: &ComplexVector, b: &ComplexVector) -> Result<f64> {
    check_unit_pair(a, b)?;
    Ok((1.0 - a.dot(b).norm_sqr()).clamp(0.0, 1.0))
}

/// Right pseudo-inverse Hᴴ(HHᴴ)⁻¹ of a wide or square matrix.
pub fn pseudo_inverse_rows(h: &ComplexMatrix) -> Result<ComplexMatrix> {
    if h.rows() > h.cols() {
        return Err(invalid("pseudo-inverse needs rows <= cols"));
    }
    let (inv, cond) = h.gram_rows().inverse_with_condition()?;
    if !(cond <= tol::MAX_CONDITION) {
        return Err(Error::RankDeficient(cond));
    }
    Ok(h.hermitian().mul_mat(&inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn gram_updates_match_outer_products() {
        let g = ComplexMatrix::from_fn(2, 3, |i, j| c(i as f64 + 0.5 * j as f64, j as f64 - i as f64));
        let mut by_cols = ComplexMatrix::zeros(2, 2);
        for j in 0..3 {
            by_cols.add_outer(&g.column(j), 0.5);
        }
        let mut direct = ComplexMatrix::zeros(2, 2);
        direct.add_outer_gram(&g, 0.5);
        let mut by_rows = ComplexMatrix::zeros(3, 3);
        for i in 0..2 {
            by_rows.add_outer(&g.row(i).conj(), 1.0);
        }
        let mut tx = ComplexMatrix::zeros(3, 3);
        tx.add_gram(&g);
        for (a, b) in by_cols.as_slice().iter().zip(direct.as_slice()).chain(by_rows.as_slice().iter().zip(tx.as_slice())) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn steering_broadside_is_flat() {
        let v = steering_vector(4, 0.5, PI / 2.0).unwrap();
        for z in v.iter() {
            assert!(close(*z, c(0.5, 0.0), 1e-12));
        }
    }

    #[test]
    fn steering_endfire_alternates() {
        let v = steering_vector(4, 0.5, 0.0).unwrap();
        let want = [0.5, -0.5, 0.5, -0.5];
        for (z, w) in v.iter().zip(want) {
            assert!(close(*z, c(w, 0.0), 1e-12));
        }
    }

    #[test]
    fn steering_matches_direct_evaluation() {
        let theta = PI / 3.0;
        let v = steering_vector(8, 0.5, theta).unwrap();
        // cos(π/3) = 1/2, so each step is a quarter turn clockwise.
        let quarter = [c(1.0, 0.0), c(0.0, -1.0), c(-1.0, 0.0), c(0.0, 1.0)];
        for i in 0..8 {
            assert!(close(v[i], quarter[i % 4] / 8f64.sqrt(), 1e-12));
        }
        assert!(v.is_unit());
    }

    #[test]
    fn steering_rejects_bad_input() {
        assert!(steering_vector(4, 0.5, f64::NAN).is_err());
        assert!(steering_vector(0, 0.5, 0.0).is_err());
        assert!(steering_vector(4, 0.0, 0.0).is_err());
    }

    #[test]
    fn inner_product_conjugates_left() {
        let a = ComplexVector::new(vec![c(0.0, 1.0)]).unwrap();
        let b = ComplexVector::new(vec![c(1.0, 0.0)]).unwrap();
        assert!(close(a.dot(&b), c(0.0, -1.0), 1e-15));
    }

    #[test]
    fn chordal_examples() {
        let v = steering_vector(4, 0.5, 1.0).unwrap();
        assert!(chordal_distance(&v, &v).unwrap() < 1e-12);
        let rotated = v.scale(C64::from_polar(1.0, 0.7));
        assert!(chordal_distance(&v, &rotated).unwrap() < 1e-7);
        let e0 = ComplexVector::from_real(&[1.0, 0.0]).unwrap();
        let e1 = ComplexVector::from_real(&[0.0, 1.0]).unwrap();
        assert!((chordal_distance(&e0, &e1).unwrap() - 1.0).abs() < 1e-12);
        assert!(chordal_distance(&e0, &ComplexVector::from_real(&[2.0, 0.0]).unwrap()).is_err());
        assert!(chordal_distance(&e0, &ComplexVector::from_real(&[1.0]).unwrap()).is_err());
    }

    #[test]
    fn projection_examples() {
        let r = ComplexVector::new(vec![c(1.0, 1.0), c(0.0, 2.0)]).unwrap();
        let v = r.scale(c(0.3, -1.2));
        let p = project_onto(&v, &r).unwrap();
        assert!((&p - &v).norm() < 1e-12);
        let orth = ComplexVector::new(vec![c(2.0, 0.0), c(-1.0, -1.0)]).unwrap();
        assert!(r.dot(&orth).norm() < 1e-12);
        assert!(project_onto(&orth, &r).unwrap().norm() < 1e-12);
        assert!(project_onto(&v, &ComplexVector::zeros(2)).is_err());
    }

    #[test]
    fn deorient_examples() {
        let i = ComplexVector::from_real(&[1.0, 0.0, 0.0]).unwrap();
        let u = ComplexVector::new(vec![c(0.0, 0.0), c(1.0, 2.0), c(-3.0, 0.5)]).unwrap();
        assert_eq!(deorient_against(&u, &i).unwrap(), u);
        assert!(matches!(deorient_against(&i, &i), Err(Error::DegenerateNullSpace)));
        assert!(deorient_against(&u, &ComplexVector::zeros(3)).is_err());
    }

    #[test]
    fn orthogonality_examples() {
        let e0 = ComplexVector::from_real(&[1.0, 0.0]).unwrap();
        let e1 = ComplexVector::from_real(&[0.0, 1.0]).unwrap();
        assert!(orthogonality_measure(&e0, &e0).unwrap().abs() < 1e-15);
        assert!((orthogonality_measure(&e0, &e1).unwrap() - 1.0).abs() < 1e-15);
        let b = ComplexVector::from_real(&[0.5, 0.75f64.sqrt()]).unwrap();
        assert!((orthogonality_measure(&e0, &b).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn pinv_examples() {
        let h = ComplexMatrix::new(1, 1, vec![c(2.0, 0.0)]).unwrap();
        assert!(close(pseudo_inverse_rows(&h).unwrap()[(0, 0)], c(0.5, 0.0), 1e-15));

        let s = 0.5f64.sqrt();
        let u = ComplexMatrix::new(2, 2, vec![c(s, 0.0), c(0.0, s), c(0.0, s), c(s, 0.0)]).unwrap();
        let p = pseudo_inverse_rows(&u).unwrap();
        assert!((&p - &u.hermitian()).frobenius_norm() < 1e-12);

        let tall = ComplexMatrix::zeros(3, 2);
        assert!(pseudo_inverse_rows(&tall).is_err());
        let singular = ComplexMatrix::new(2, 2, vec![c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)]).unwrap();
        assert!(matches!(pseudo_inverse_rows(&singular), Err(Error::RankDeficient(_))));
        let ill = ComplexMatrix::new(2, 2, vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1e-5, 0.0)]).unwrap();
        assert!(matches!(pseudo_inverse_rows(&ill), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn constructors_validate() {
        assert!(ComplexVector::new(vec![]).is_err());
        assert!(ComplexVector::new(vec![c(f64::INFINITY, 0.0)]).is_err());
        assert!(ComplexMatrix::new(2, 2, vec![c(0.0, 0.0); 3]).is_err());
        assert!(ComplexMatrix::new(0, 2, vec![]).is_err());
    }

    fn arb_c64() -> impl Strategy<Value = C64> {
        (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| c(a, b))
    }

    fn arb_vec(n: usize) -> impl Strategy<Value = ComplexVector> {
        prop::collection::vec(arb_c64(), n).prop_filter_map("nonzero", |v| {
            let v = ComplexVector::new(v).ok()?;
            (v.norm() > 1e-3).then_some(v)
        })
    }

    fn arb_unit(n: usize) -> impl Strategy<Value = ComplexVector> {
        arb_vec(n).prop_map(|v| v.normalized().unwrap())
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(v in arb_vec(6), r in arb_vec(6)) {
            let p = project_onto(&v, &r).unwrap();
            let pp = project_onto(&p, &r).unwrap();
            prop_assert!((&pp - &p).norm() <= 1e-10 * v.norm().max(1.0));
        }

        #[test]
        fn projection_obeys_pythagoras(v in arb_vec(6), r in arb_vec(6)) {
            let p = project_onto(&v, &r).unwrap();
            let res = &v - &p;
            let lhs = v.norm_sqr();
            prop_assert!((lhs - p.norm_sqr() - res.norm_sqr()).abs() <= 1e-9 * lhs);
            prop_assert!(res.dot(&r).norm() <= 1e-10 * v.norm() * r.norm());
        }

        #[test]
        fn chordal_is_symmetric_pseudometric(a in arb_unit(4), b in arb_unit(4), x in arb_unit(4), phase in 0.0..6.28f64) {
            let ab = chordal_distance(&a, &b).unwrap();
            let ba = chordal_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let ax = chordal_distance(&a, &x).unwrap();
            let xb = chordal_distance(&x, &b).unwrap();
            prop_assert!(ab <= ax + xb + 1e-9);
            prop_assert!(chordal_distance(&a, &a.scale(C64::from_polar(1.0, phase))).unwrap() < 1e-7);
        }

        #[test]
        fn orthogonality_equals_squared_chordal(a in arb_unit(5), b in arb_unit(5)) {
            let d = chordal_distance(&a, &b).unwrap();
            prop_assert!((orthogonality_measure(&a, &b).unwrap() - d * d).abs() < 1e-9);
        }

        #[test]
        fn deorient_matches_formula(u in arb_vec(4), i in arb_vec(4)) {
            match deorient_against(&u, &i) {
                Ok(out) => {
                    let want = &u - &i.scale(i.dot(&u) / i.norm_sqr());
                    prop_assert!((&out - &want).norm() < 1e-14 * u.norm().max(1.0));
                    prop_assert!(out.dot(&i).norm() < tol::ORTHOGONALITY * u.norm() * i.norm());
                }
                Err(e) => prop_assert!(matches!(e, Error::DegenerateNullSpace)),
            }
        }

        #[test]
        fn pinv_is_right_inverse(entries in prop::collection::vec(arb_c64(), 16)) {
            let h = ComplexMatrix::new(2, 8, entries).unwrap();
            if let Ok(p) = pseudo_inverse_rows(&h) {
                let prod = h.mul_mat(&p);
                prop_assert!((&prod - &ComplexMatrix::identity(2)).frobenius_norm() < 1e-8);
            }
        }
    }
}
