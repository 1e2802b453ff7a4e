//! Dense tensor algebra for 4-way convolution kernels.
//!
//! Unfolding convention: the mode-`n` unfolding of a tensor with dims
//! `(d1, d2, d3, d4)` has `d_n` rows; its columns enumerate the remaining
//! indices in row-major order (the earliest-listed remaining dim varies
//! slowest). [`fold`] is the exact inverse. Modes are numbered 1..=4, matching
//! the usual `×ₙ` notation for mode products.

mod svd;
mod tucker;

pub use svd::{svd, symmetric_eigen, SvdResult};
pub use tucker::{
    reconstruct, tucker2_hooi, tucker2_hosvd, HooiOptions, HooiReport, Tucker2Basis, TuckerFactors,
};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::arg(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::arg(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::arg(format!(
                "matmul dimension mismatch: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        gemm(
            &self.data,
            &other.data,
            &mut out,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(Matrix::from_raw(self.rows, other.cols, out))
    }

    /// `self · selfᵀ`, exploiting symmetry.
    pub fn gram_rows(&self) -> Matrix {
        let n = self.rows;
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            let ri = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in i..n {
                let rj = &self.data[j * self.cols..(j + 1) * self.cols];
                let s = dot(ri, rj);
                g[i * n + j] = s;
                g[j * n + i] = s;
            }
        }
        Matrix::from_raw(n, n, g)
    }

    /// Keep the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        assert!(k <= self.cols);
        let mut out = Vec::with_capacity(self.rows * k);
        for i in 0..self.rows {
            out.extend_from_slice(&self.data[i * self.cols..i * self.cols + k]);
        }
        Matrix::from_raw(self.rows, k, out)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// ‖UᵀU − I‖_F; zero for a matrix with orthonormal columns.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.transpose().gram_rows();
        let mut acc = 0.0;
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                let d = gram.get(i, j) - target;
                acc += d * d;
            }
        }
        acc.sqrt()
    }
}

/// 4-way dense tensor, row-major over `(O, I, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::arg(format!("tensor dims must be positive, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::arg(format!(
                "tensor {dims:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("tensor contains non-finite values".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub(crate) fn from_raw(dims: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f64 {
        let [_, d1, d2, d3] = self.dims;
        self.data[((idx[0] * d1 + idx[1]) * d2 + idx[2]) * d3 + idx[3]]
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// ‖self − other‖_F / ‖other‖_F (absolute error when `other` is zero).
    pub fn relative_error(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.dims, other.dims, "relative_error on mismatched dims");
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let base = other.frobenius_norm();
        if base > 0.0 {
            diff / base
        } else {
            diff
        }
    }

    /// Scale every entry by `c`.
    pub fn scaled(&self, c: f64) -> Tensor4 {
        Tensor4::from_raw(self.dims, self.data.iter().map(|v| v * c).collect())
    }
}

fn check_mode(mode: usize) -> Result<usize> {
    if (1..=4).contains(&mode) {
        Ok(mode - 1)
    } else {
        Err(Error::arg(format!("mode must be in 1..=4, got {mode}")))
    }
}

/// Split dims around `axis` into (outer, n, inner) extents.
fn split_dims(dims: [usize; 4], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Mode-`mode` unfolding (see module docs for the column ordering).
pub fn unfold(t: &Tensor4, mode: usize) -> Result<Matrix> {
    let axis = check_mode(mode)?;
    let (outer, n, inner) = split_dims(t.dims, axis);
    let cols = outer * inner;
    let mut out = vec![0.0; n * cols];
    for o in 0..outer {
        for j in 0..n {
            let src = &t.data[(o * n + j) * inner..(o * n + j + 1) * inner];
            out[j * cols + o * inner..j * cols + (o + 1) * inner].copy_from_slice(src);
        }
    }
    Ok(Matrix::from_raw(n, cols, out))
}

/// Inverse of [`unfold`]: rebuild a tensor with `dims` from its mode-`mode` unfolding.
pub fn fold(m: &Matrix, mode: usize, dims: [usize; 4]) -> Result<Tensor4> {
    let axis = check_mode(mode)?;
    let (outer, n, inner) = split_dims(dims, axis);
    if m.rows != n || m.cols != outer * inner {
        return Err(Error::arg(format!(
            "cannot fold {}x{} matrix into {dims:?} along mode {mode}",
            m.rows, m.cols
        )));
    }
    let cols = m.cols;
    let mut out = vec![0.0; m.data.len()];
    for o in 0..outer {
        for j in 0..n {
            out[(o * n + j) * inner..(o * n + j + 1) * inner]
                .copy_from_slice(&m.data[j * cols + o * inner..j * cols + (o + 1) * inner]);
        }
    }
    Ok(Tensor4::from_raw(dims, out))
}

/// Mode-`mode` product `t ×ₙ m`: contracts `m`'s columns with the mode's index.
pub fn mode_product(t: &Tensor4, m: &Matrix, mode: usize) -> Result<Tensor4> {
    let axis = check_mode(mode)?;
    let (outer, n, inner) = split_dims(t.dims, axis);
    if m.cols != n {
        return Err(Error::arg(format!(
            "mode-{mode} product needs a matrix with {n} columns, got {}x{}",
            m.rows, m.cols
        )));
    }
    let r = m.rows;
    let mut dims = t.dims;
    dims[axis] = r;
    let mut out = vec![0.0; outer * r * inner];
    for o in 0..outer {
        let src = &t.data[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * r * inner..(o + 1) * r * inner];
        // dst (r x inner) = m (r x n) · src (n x inner)
        gemm(&m.data, src, dst, r, n, inner);
    }
    Ok(Tensor4::from_raw(dims, out))
}

/// `c += a · b` for row-major `a` (m×k), `b` (k×n), `c` (m×n).
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
        let mut r = rng::seeded(seed);
        let len = dims.iter().product();
        Tensor4::new(dims, rng::standard_normal(&mut r, len)).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::new(rows, cols, rng::standard_normal(&mut r, rows * cols)).unwrap()
    }

    #[test]
    fn mode1_unfold_of_degenerate_spatial_is_reshape() {
        let t = Tensor4::new([2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = unfold(&t, 1).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 2));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn mode2_unfold_matches_index_enumeration() {
        // brute force: row i2, columns enumerate (i1, i3, i4) row-major
        let t = random_tensor([2, 3, 1, 1], 3);
        let m2 = unfold(&t, 2).unwrap();
        let m1 = unfold(&t, 1).unwrap();
        assert_eq!((m2.rows(), m2.cols()), (3, 2));
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(m2.get(j, i), t.get([i, j, 0, 0]));
            }
        }
        assert_eq!(m2, m1.transpose());

        let t = random_tensor([2, 3, 2, 2], 4);
        for mode in 1..=4 {
            let m = unfold(&t, mode).unwrap();
            let axis = mode - 1;
            let dims = t.dims();
            let mut col_of = std::collections::HashMap::new();
            for a in 0..dims[0] {
                for b in 0..dims[1] {
                    for c in 0..dims[2] {
                        for d in 0..dims[3] {
                            let idx = [a, b, c, d];
                            let rest: Vec<usize> = (0..4).filter(|&x| x != axis).map(|x| idx[x]).collect();
                            let rest_dims: Vec<usize> = (0..4).filter(|&x| x != axis).map(|x| dims[x]).collect();
                            let col = (rest[0] * rest_dims[1] + rest[1]) * rest_dims[2] + rest[2];
                            assert_eq!(m.get(idx[axis], col), t.get(idx));
                            col_of.insert(col, ());
                        }
                    }
                }
            }
            assert_eq!(col_of.len(), m.cols());
        }
    }

    #[test]
    fn fold_inverts_unfold_exactly() {
        let t = random_tensor([3, 4, 2, 2], 11);
        for mode in 1..=4 {
            let back = fold(&unfold(&t, mode).unwrap(), mode, t.dims()).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn invalid_mode_is_rejected() {
        let t = random_tensor([2, 2, 1, 1], 1);
        assert!(matches!(unfold(&t, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(unfold(&t, 5), Err(Error::InvalidArgument(_))));
        assert!(mode_product(&t, &Matrix::identity(2), 7).is_err());
    }

    #[test]
    fn mode_product_dimension_mismatch() {
        let t = random_tensor([2, 3, 1, 1], 1);
        let m = random_matrix(4, 5, 2);
        assert!(matches!(mode_product(&t, &m, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mode_product_with_identity_is_noop() {
        let t = random_tensor([3, 4, 2, 3], 5);
        for mode in 1..=4 {
            let id = Matrix::identity(t.dims()[mode - 1]);
            let p = mode_product(&t, &id, mode).unwrap();
            for (a, b) in p.data().iter().zip(t.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mode_product_matches_triple_loop() {
        let t = random_tensor([2, 2, 1, 1], 21);
        let m = random_matrix(3, 2, 22);
        let p = mode_product(&t, &m, 1).unwrap();
        assert_eq!(p.dims(), [3, 2, 1, 1]);
        for r in 0..3 {
            for i in 0..2 {
                let mut s = 0.0;
                for j in 0..2 {
                    s += m.get(r, j) * t.get([j, i, 0, 0]);
                }
                assert!((p.get([r, i, 0, 0]) - s).abs() < 1e-14);
            }
        }
        // equals fold(m · unfold(t))
        let via = fold(&m.matmul(&unfold(&t, 1).unwrap()).unwrap(), 1, [3, 2, 1, 1]).unwrap();
        assert_eq!(via, p);
    }

    #[test]
    fn distinct_mode_products_commute() {
        let t = random_tensor([3, 4, 3, 3], 7);
        let a = random_matrix(5, 3, 8);
        let b = random_matrix(2, 4, 9);
        let ab = mode_product(&mode_product(&t, &a, 1).unwrap(), &b, 2).unwrap();
        let ba = mode_product(&mode_product(&t, &b, 2).unwrap(), &a, 1).unwrap();
        assert!(ab.relative_error(&ba) <= 1e-10);
    }

    #[test]
    fn constructors_validate() {
        assert!(Tensor4::new([1, 2, 0, 1], vec![]).is_err());
        assert!(Tensor4::new([1, 1, 1, 2], vec![1.0]).is_err());
        assert!(matches!(
            Tensor4::new([1, 1, 1, 1], vec![f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn unfold_fold_roundtrip(d in proptest::array::uniform4(1usize..5), seed in 0u64..1000, mode in 1usize..=4) {
            let t = random_tensor(d, seed);
            let back = fold(&unfold(&t, mode).unwrap(), mode, d).unwrap();
            proptest::prop_assert_eq!(back, t);
        }
    }
}
