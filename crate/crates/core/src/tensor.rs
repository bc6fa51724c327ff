//! Dense complex tensors and the linear-algebra primitives used by the
//! estimators.
//!
//! Everything here is column-major: the first index of a tensor varies
//! fastest, `vec` of a matrix stacks its columns, and in `A ⊗ B` the index of
//! `B` varies fastest. Mode-`n` unfoldings follow the Kolda convention, with
//! the remaining indices ordered ascending and the earliest varying fastest.
//! Modes are zero-based throughout the Rust API.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Relative singular-value cutoff used by [`pseudo_inverse`].
pub const PINV_RTOL: f64 = 1e-12;

/// Dense complex multi-way array, first index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl ComplexTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![C64::new(0.0, 0.0); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<C64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || data.len() != expected {
            return Err(Error::Shape(format!(
                "{} elements cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Build a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> C64) -> Self {
        let mut out = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for slot in out.data.iter_mut() {
            *slot = f(&idx);
            for (i, extent) in idx.iter_mut().zip(shape) {
                *i += 1;
                if *i < *extent {
                    break;
                }
                *i = 0;
            }
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    fn linear_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut lin = 0;
        let mut stride = 1;
        for (&i, &extent) in idx.iter().zip(&self.shape) {
            debug_assert!(i < extent);
            lin += i * stride;
            stride *= extent;
        }
        lin
    }

    pub fn get(&self, idx: &[usize]) -> C64 {
        self.data[self.linear_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: C64) {
        let lin = self.linear_index(idx);
        self.data[lin] = value;
    }

    pub fn frobenius_norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sqr().sqrt()
    }

    /// `‖self − other‖²_F`; shapes must match.
    pub fn distance_sqr(&self, other: &ComplexTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot compare shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm_sqr()).sum())
    }

    /// Relative Frobenius error `‖self − reference‖ / ‖reference‖`.
    pub fn relative_error(&self, reference: &ComplexTensor) -> Result<f64> {
        let num = self.distance_sqr(reference)?.sqrt();
        let den = reference.frobenius_norm();
        Ok(if den == 0.0 { num } else { num / den })
    }

    pub fn add(&self, other: &ComplexTensor) -> Result<ComplexTensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(ComplexTensor {
            shape: self.shape.clone(),
            data,
        })
    }

    fn mode_split(&self, mode: usize) -> Result<(usize, usize, usize)> {
        if mode >= self.order() {
            return Err(Error::Mode {
                mode,
                order: self.order(),
            });
        }
        let left = self.shape[..mode].iter().product();
        let right = self.shape[mode + 1..].iter().product();
        Ok((left, self.shape[mode], right))
    }

    /// Mode-`mode` unfolding, `I_n × ∏_{m≠n} I_m`.
    pub fn unfold(&self, mode: usize) -> Result<CMatrix> {
        let (left, extent, right) = self.mode_split(mode)?;
        let mut out = CMatrix::zeros(extent, left * right);
        for b in 0..right {
            for i in 0..extent {
                let base = i * left + b * left * extent;
                for a in 0..left {
                    out[(i, a + b * left)] = self.data[base + a];
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`ComplexTensor::unfold`] for a tensor of shape `shape`.
    pub fn fold(matrix: &CMatrix, mode: usize, shape: &[usize]) -> Result<ComplexTensor> {
        let mut out = ComplexTensor::zeros(shape);
        let (left, extent, right) = out.mode_split(mode)?;
        if matrix.nrows() != extent || matrix.ncols() != left * right {
            return Err(Error::Shape(format!(
                "{}x{} matrix does not fold into mode {} of {:?}",
                matrix.nrows(),
                matrix.ncols(),
                mode,
                shape
            )));
        }
        for b in 0..right {
            for i in 0..extent {
                let base = i * left + b * left * extent;
                for a in 0..left {
                    out.data[base + a] = matrix[(i, a + b * left)];
                }
            }
        }
        Ok(out)
    }

    /// `self ×_mode factor`, replacing extent `I_mode` by `factor.nrows()`.
    pub fn mode_product(&self, factor: &CMatrix, mode: usize) -> Result<ComplexTensor> {
        let (_, extent, _) = self.mode_split(mode)?;
        if factor.ncols() != extent {
            return Err(Error::Shape(format!(
                "factor has {} columns, mode {} has extent {}",
                factor.ncols(),
                mode,
                extent
            )));
        }
        let product = factor * self.unfold(mode)?;
        let mut shape = self.shape.clone();
        shape[mode] = factor.nrows();
        ComplexTensor::fold(&product, mode, &shape)
    }

    /// Multimode unfolding of an order-4 tensor merging modes (0,1) into rows
    /// and (2,3) into columns, earlier mode fastest in each group.
    pub fn unfold_12_34(&self) -> Result<CMatrix> {
        if self.order() != 4 {
            return Err(Error::Shape(format!(
                "multimode unfolding needs an order-4 tensor, got order {}",
                self.order()
            )));
        }
        let rows = self.shape[0] * self.shape[1];
        let cols = self.shape[2] * self.shape[3];
        Ok(CMatrix::from_column_slice(rows, cols, &self.data))
    }

    pub fn fold_12_34(matrix: &CMatrix, shape: [usize; 4]) -> Result<ComplexTensor> {
        if matrix.nrows() != shape[0] * shape[1] || matrix.ncols() != shape[2] * shape[3] {
            return Err(Error::Shape(format!(
                "{}x{} matrix does not fold into {:?}",
                matrix.nrows(),
                matrix.ncols(),
                shape
            )));
        }
        ComplexTensor::from_vec(&shape, matrix.as_slice().to_vec())
    }
}

/// Column-stacking vectorization.
pub fn vec(matrix: &CMatrix) -> CVector {
    CVector::from_column_slice(matrix.as_slice())
}

pub fn unvec(v: &CVector, rows: usize, cols: usize) -> Result<CMatrix> {
    if v.len() != rows * cols {
        return Err(Error::Shape(format!(
            "vector of length {} cannot be reshaped to {}x{}",
            v.len(),
            rows,
            cols
        )));
    }
    Ok(CMatrix::from_column_slice(rows, cols, v.as_slice()))
}

pub fn kronecker(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = CMatrix::zeros(ra * rb, ca * cb);
    for r in 0..ca {
        for i in 0..ra {
            let aij = a[(i, r)];
            for s in 0..cb {
                for j in 0..rb {
                    out[(i * rb + j, r * cb + s)] = aij * b[(j, s)];
                }
            }
        }
    }
    out
}

/// Column-wise Kronecker product `A ⋄ B`.
pub fn khatri_rao_cols(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "Khatri-Rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (ra, rb) = (a.nrows(), b.nrows());
    let mut out = CMatrix::zeros(ra * rb, a.ncols());
    for r in 0..a.ncols() {
        for i in 0..ra {
            let air = a[(i, r)];
            for j in 0..rb {
                out[(i * rb + j, r)] = air * b[(j, r)];
            }
        }
    }
    Ok(out)
}

/// Row-wise Kronecker product: row `k` is `A(k,:) ⊗ B(k,:)`.
pub fn khatri_rao_rows(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "row-wise Khatri-Rao needs equal row counts, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let (ca, cb) = (a.ncols(), b.ncols());
    let mut out = CMatrix::zeros(a.nrows(), ca * cb);
    for ia in 0..ca {
        for ib in 0..cb {
            for k in 0..a.nrows() {
                out[(k, ib + ia * cb)] = a[(k, ia)] * b[(k, ib)];
            }
        }
    }
    Ok(out)
}

pub fn frobenius_sqr(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// Thin SVD `A = U·diag(σ)·Vᴴ` with `σ` sorted in nonincreasing order.
///
/// Backed by faer: nalgebra's complex SVD can return wrong singular vectors
/// for exactly rank-deficient inputs, which is precisely the noiseless case
/// of the rank-one splits and pseudo-inverses used here.
pub fn thin_svd(a: &CMatrix) -> Result<(CMatrix, Vec<f64>, CMatrix)> {
    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok((CMatrix::zeros(rows, 0), Vec::new(), CMatrix::zeros(cols, 0)));
    }
    let view = faer::MatRef::from_column_major_slice(a.as_slice(), rows, cols);
    let svd = view
        .thin_svd()
        .map_err(|e| Error::Degenerate(format!("SVD did not converge: {e:?}")))?;
    let u = svd.U();
    let v = svd.V();
    let s = svd.S().column_vector();
    Ok((
        CMatrix::from_fn(rows, k, |i, j| u[(i, j)]),
        (0..k).map(|i| s[i].re).collect(),
        CMatrix::from_fn(cols, k, |i, j| v[(i, j)]),
    ))
}

/// Moore-Penrose pseudo-inverse together with the effective rank.
#[derive(Clone, Debug)]
pub struct PseudoInverse {
    pub matrix: CMatrix,
    pub rank: usize,
    /// Largest over smallest retained singular value.
    pub condition: f64,
}

/// Moore-Penrose pseudo-inverse, treating singular values below
/// `PINV_RTOL · σ_max` as zero.
pub fn pseudo_inverse_with_rank(a: &CMatrix) -> PseudoInverse {
    let (rows, cols) = a.shape();
    let empty = || PseudoInverse {
        matrix: CMatrix::zeros(cols, rows),
        rank: 0,
        condition: f64::INFINITY,
    };
    if a.iter().any(|z| !z.is_finite()) {
        let mut out = empty();
        out.matrix.fill(C64::new(f64::NAN, f64::NAN));
        return out;
    }
    let Ok((u, sigma, v)) = thin_svd(a) else {
        return empty();
    };
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let rank = sigma
        .iter()
        .take_while(|&&s| sigma_max > 0.0 && s > PINV_RTOL * sigma_max)
        .count();
    if rank == 0 {
        return empty();
    }
    // A† = V_r·diag(σ_r⁻¹)·U_rᴴ
    let mut v_r = v.columns(0, rank).into_owned();
    for (j, mut col) in v_r.column_iter_mut().enumerate() {
        col /= C64::new(sigma[j], 0.0);
    }
    PseudoInverse {
        matrix: v_r * u.columns(0, rank).adjoint(),
        rank,
        condition: sigma_max / sigma[rank - 1],
    }
}

/// Largest accepted condition number of a Gram matrix in [`solve_wide`];
/// beyond it the squared conditioning would cost too many digits.
pub const GRAM_COND_MAX: f64 = 1e8;

/// `Y·A†` for a wide `A` with precomputed Gram matrix `A·Aᴴ`.
///
/// Uses the exact identity `A† = Aᴴ·(A·Aᴴ)†`, which replaces an SVD of the
/// wide matrix by an eigendecomposition of its small Gram matrix. When the
/// Gram matrix is rank deficient or too ill-conditioned for that, the result
/// falls back to the SVD-based [`pseudo_inverse_with_rank`].
/// Returns the solution and the effective row rank of `A`.
pub fn solve_wide(y: &CMatrix, a: &CMatrix, gram: &CMatrix) -> (CMatrix, usize) {
    let n = a.nrows();
    let fallback = || {
        let p = pseudo_inverse_with_rank(a);
        (y * &p.matrix, p.rank)
    };
    if gram.shape() != (n, n) || gram.iter().any(|z| !z.is_finite()) || n == 0 {
        return fallback();
    }
    let view = faer::MatRef::from_column_major_slice(gram.as_slice(), n, n);
    let Ok(evd) = view.self_adjoint_eigen(faer::Side::Lower) else {
        return fallback();
    };
    let lambda: Vec<f64> = (0..n).map(|i| evd.S().column_vector()[i].re).collect();
    let (lo, hi) = (lambda[0], lambda[n - 1]);
    if !(lo > 0.0 && hi <= GRAM_COND_MAX * lo) {
        return fallback();
    }
    // Y·Aᴴ·(A·Aᴴ)⁻¹ = (Y·Aᴴ·V)·diag(λ⁻¹)·Vᴴ
    let u = evd.U();
    let v = CMatrix::from_fn(n, n, |i, j| u[(i, j)]);
    let y_ah = (a * y.adjoint()).adjoint();
    let mut w = y_ah * &v;
    for (j, mut col) in w.column_iter_mut().enumerate() {
        col /= C64::new(lambda[j], 0.0);
    }
    (w * v.adjoint(), n)
}

pub fn pseudo_inverse(a: &CMatrix) -> CMatrix {
    pseudo_inverse_with_rank(a).matrix
}

/// Best rank-one approximation `M ≈ u vᵀ` from the dominant singular
/// triplet, with `√σ` carried by each factor.
pub fn rank_one_approx(m: &CMatrix) -> Result<(CVector, CVector)> {
    if m.iter().all(|z| z.norm_sqr() == 0.0) {
        return Err(Error::Degenerate("rank-one approximation of a zero matrix".into()));
    }
    let (u, sigma, v) = thin_svd(m)?;
    let root = C64::new(sigma[0].sqrt(), 0.0);
    // M ≈ σ u vᴴ, so the transposed-form right factor is conj(v).
    Ok((u.column(0) * root, v.column(0).map(|z| z.conj()) * root))
}
