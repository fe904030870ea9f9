//! Dense order-3 tensors and the multilinear-form calculus used throughout.
//!
//! Storage is dense (`d³` entries, row-major: `(i, j, k) -> (i·d + j)·d + k`).
//! [`SymTensor3`] values are only ever produced by operations that write every
//! permutation orbit with a single value, so the symmetry invariant holds
//! exactly rather than up to accumulation order.

use crate::error::{check_dim, Result};
use nalgebra::{DMatrix, DVector};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// General dense order-3 array with shape `(n1, n2, n3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest deviation between an entry and any of its index permutations,
    /// relative to the largest entry magnitude. `None` for non-cubic shapes.
    pub fn symmetry_defect(&self) -> Option<f64> {
        let [a, b, c] = self.shape;
        if a != b || b != c {
            return None;
        }
        let scale = self
            .data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..a {
            for j in 0..a {
                for k in 0..a {
                    let v = self.get(i, j, k);
                    for w in [
                        self.get(i, k, j),
                        self.get(j, i, k),
                        self.get(j, k, i),
                        self.get(k, i, j),
                        self.get(k, j, i),
                    ] {
                        worst = worst.max((v - w).abs());
                    }
                }
            }
        }
        Some(worst / scale)
    }
}

/// `a ⊗ b ⊗ c`.
pub fn outer3(a: &[f64], b: &[f64], c: &[f64]) -> Result<Tensor3> {
    check_dim("outer3 (b)", a.len(), b.len())?;
    check_dim("outer3 (c)", a.len(), c.len())?;
    let d = a.len();
    Ok(Tensor3::from_fn([d, d, d], |i, j, k| a[i] * b[j] * c[k]))
}

/// Canonical (sorted) index triples `i ≤ j ≤ k` of a symmetric `d×d×d` tensor.
///
/// Used by accumulators that only touch one representative per orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalIndex {
    dim: usize,
    triples: Vec<[usize; 3]>,
}

impl CanonicalIndex {
    pub fn new(dim: usize) -> Self {
        let mut triples = Vec::with_capacity(dim * (dim + 1) * (dim + 2) / 6);
        for i in 0..dim {
            for j in i..dim {
                for k in j..dim {
                    triples.push([i, j, k]);
                }
            }
        }
        Self { dim, triples }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[[usize; 3]] {
        &self.triples
    }
}

/// Dense symmetric order-3 tensor over `ℝ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl SymTensor3 {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim * dim],
        }
    }

    /// Builds a tensor by evaluating `f` once per canonical triple `i ≤ j ≤ k`.
    pub fn from_canonical_fn(dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                for k in j..dim {
                    t.set_orbit(i, j, k, f(i, j, k));
                }
            }
        }
        t
    }

    /// Expands values listed in [`CanonicalIndex`] order.
    pub fn from_canonical_values(index: &CanonicalIndex, values: &[f64]) -> Result<Self> {
        check_dim("canonical values", index.len(), values.len())?;
        let mut t = Self::zeros(index.dim());
        for (&[i, j, k], &v) in index.triples().iter().zip(values) {
            t.set_orbit(i, j, k, v);
        }
        Ok(t)
    }

    /// Averages the six index permutations of a cubic array.
    pub fn symmetrize(t: &Tensor3) -> Result<Self> {
        let [a, b, c] = t.shape();
        check_dim("symmetrize (mode 2)", a, b)?;
        check_dim("symmetrize (mode 3)", a, c)?;
        Ok(Self::from_canonical_fn(a, |i, j, k| {
            (t.get(i, j, k)
                + t.get(i, k, j)
                + t.get(j, i, k)
                + t.get(j, k, i)
                + t.get(k, i, j)
                + t.get(k, j, i))
                / 6.0
        }))
    }

    /// `Σ_j coeffs[j] · u_j^{⊗3}` for the columns `u_j` of `u`.
    pub fn from_cp(u: &Matrix, coeffs: &[f64]) -> Result<Self> {
        check_dim("cp coefficients", u.ncols(), coeffs.len())?;
        let d = u.nrows();
        Ok(Self::from_canonical_fn(d, |i, j, k| {
            let mut s = 0.0;
            for (c, &w) in coeffs.iter().enumerate() {
                s += w * u[(i, c)] * u[(j, c)] * u[(k, c)];
            }
            s
        }))
    }

    #[inline]
    fn set_orbit(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let d = self.dim;
        for (a, b, c) in [
            (i, j, k),
            (i, k, j),
            (j, i, k),
            (j, k, i),
            (k, i, j),
            (k, j, i),
        ] {
            self.data[(a * d + b) * d + c] = v;
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dim + j) * self.dim + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor3(&self) -> Tensor3 {
        Tensor3 {
            shape: [self.dim; 3],
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &SymTensor3) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, alpha: f64) -> SymTensor3 {
        SymTensor3 {
            dim: self.dim,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    /// `self + alpha · other`.
    pub fn add_scaled(&self, alpha: f64, other: &SymTensor3) -> Result<SymTensor3> {
        check_dim("add_scaled", self.dim, other.dim)?;
        Ok(SymTensor3 {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        })
    }

    /// `T(M1, M2, M3)` with `result[i1,i2,i3] = Σ T[j1,j2,j3] M1[j1,i1] M2[j2,i2] M3[j3,i3]`.
    ///
    /// Evaluated as three successive mode products, last mode first.
    pub fn multilinear(&self, m1: &Matrix, m2: &Matrix, m3: &Matrix) -> Result<Tensor3> {
        let d = self.dim;
        check_dim("multilinear (M1 rows)", d, m1.nrows())?;
        check_dim("multilinear (M2 rows)", d, m2.nrows())?;
        check_dim("multilinear (M3 rows)", d, m3.nrows())?;
        let (p1, p2, p3) = (m1.ncols(), m2.ncols(), m3.ncols());

        // a[j1, j2, i3]
        let mut a = vec![0.0; d * d * p3];
        for j1 in 0..d {
            for j2 in 0..d {
                let fiber = &self.data[(j1 * d + j2) * d..(j1 * d + j2 + 1) * d];
                let out = &mut a[(j1 * d + j2) * p3..(j1 * d + j2 + 1) * p3];
                for (i3, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (j3, &t) in fiber.iter().enumerate() {
                        s += t * m3[(j3, i3)];
                    }
                    *o = s;
                }
            }
        }
        // b[j1, i2, i3]
        let mut b = vec![0.0; d * p2 * p3];
        for j1 in 0..d {
            for i2 in 0..p2 {
                for i3 in 0..p3 {
                    let mut s = 0.0;
                    for j2 in 0..d {
                        s += a[(j1 * d + j2) * p3 + i3] * m2[(j2, i2)];
                    }
                    b[(j1 * p2 + i2) * p3 + i3] = s;
                }
            }
        }
        // c[i1, i2, i3]
        let mut c = vec![0.0; p1 * p2 * p3];
        for i1 in 0..p1 {
            for i2 in 0..p2 {
                for i3 in 0..p3 {
                    let mut s = 0.0;
                    for j1 in 0..d {
                        s += b[(j1 * p2 + i2) * p3 + i3] * m1[(j1, i1)];
                    }
                    c[(i1 * p2 + i2) * p3 + i3] = s;
                }
            }
        }
        Ok(Tensor3 {
            shape: [p1, p2, p3],
            data: c,
        })
    }

    /// `T(W, W, W)`, returned as a symmetric tensor of dimension `W.ncols()`.
    pub fn multilinear_sym(&self, w: &Matrix) -> Result<SymTensor3> {
        let t = self.multilinear(w, w, w)?;
        SymTensor3::symmetrize(&t)
    }

    /// `T(I, I, θ)`: the `θ`-weighted combination of the frontal slices.
    pub fn slice_contract(&self, theta: &[f64]) -> Result<Matrix> {
        let d = self.dim;
        check_dim("slice_contract", d, theta.len())?;
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let fiber = &self.data[(i * d + j) * d..(i * d + j + 1) * d];
                let s: f64 = fiber.iter().zip(theta).map(|(t, th)| t * th).sum();
                m[(i, j)] = s;
                m[(j, i)] = s;
            }
        }
        Ok(m)
    }

    /// `T(I, a, a)`.
    pub fn contract_vector(&self, a: &[f64]) -> Result<Vector> {
        let d = self.dim;
        check_dim("contract_vector", d, a.len())?;
        let mut out = Vector::zeros(d);
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                let fiber = &self.data[(i * d + j) * d..(i * d + j + 1) * d];
                let inner: f64 = fiber.iter().zip(a).map(|(t, x)| t * x).sum();
                s += a[j] * inner;
            }
            out[i] = s;
        }
        Ok(out)
    }

    /// `T(a, a, a)`.
    pub fn contract_scalar(&self, a: &[f64]) -> Result<f64> {
        let v = self.contract_vector(a)?;
        Ok(v.iter().zip(a).map(|(x, y)| x * y).sum())
    }

    /// Mode-1 unfolding: `result[i, j·d + k] = T[i, j, k]`.
    pub fn matricize(&self) -> Matrix {
        let d = self.dim;
        Matrix::from_fn(d, d * d, |i, col| self.data[i * d * d + col])
    }
}
