//! Dense row-major tensors over f32 or f64.
//!
//! f32 is the working precision for training, attacks, and evaluation; f64
//! exists for finite-difference gradient checking. The [`Scalar`] trait is the
//! only seam between the two: it carries conversions and the matching BLAS
//! kernel from `matrixmultiply`.

use crate::error::{Error, Result};

/// Element type for tensors: f32 or f64.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + std::fmt::Debug + Default + 'static
{
    fn from_f64c(x: f64) -> Self;
    fn to_f64c(self) -> f64;

    /// Raw GEMM: c := alpha * a*b + beta * c, with explicit strides.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dimensions and
    /// strides. Use [`gemm`] instead, which checks shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64c(x: f64) -> Self {
        x as f32
    }
    fn to_f64c(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64c(x: f64) -> Self {
        x
    }
    fn to_f64c(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product on contiguous slices:
/// c (m x n) := alpha * a (m x k) * b (k x n) + beta * c.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert_eq!(a.len(), m * k, "gemm: a has wrong length");
    assert_eq!(b.len(), k * n, "gemm: b has wrong length");
    assert_eq!(c.len(), m * n, "gemm: c has wrong length");
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Like [`gemm`] but with `a` read transposed: c (m x n) := alpha * a^T * b,
/// where `a` is stored (k x m) row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_at<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert_eq!(a.len(), k * m, "gemm_at: a has wrong length");
    assert_eq!(b.len(), k * n, "gemm_at: b has wrong length");
    assert_eq!(c.len(), m * n, "gemm_at: c has wrong length");
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Like [`gemm`] but with `b` read transposed: c (m x n) := alpha * a * b^T,
/// where `b` is stored (n x k) row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_bt<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert_eq!(a.len(), m * k, "gemm_bt: a has wrong length");
    assert_eq!(b.len(), n * k, "gemm_bt: b has wrong length");
    assert_eq!(c.len(), m * n, "gemm_bt: c has wrong length");
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense row-major tensor. The length of `data` always equals the product of
/// `shape`; constructors enforce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64c(v.to_f64c())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_small_known_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        gemm(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_at_matches_explicit_transpose() {
        // a stored (3 x 2); use a^T (2 x 3) times b (3 x 1).
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 10.0, 100.0];
        let mut c = [0.0f64; 2];
        gemm_at(2, 3, 1, 1.0, &a, &b, 0.0, &mut c);
        // a^T = [1 3 5; 2 4 6] -> [531, 642]
        assert_eq!(c, [531.0, 642.0]);
    }

    #[test]
    fn gemm_bt_matches_explicit_transpose() {
        // a (1 x 3) times b^T where b stored (2 x 3).
        let a = [1.0f64, 2.0, 3.0];
        let b = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c = [0.0f64; 2];
        gemm_bt(1, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0]);
    }

    #[test]
    fn gemm_rows_do_not_depend_on_batch_height() {
        // Per-example results must not change when an input is evaluated
        // inside a taller batch; attack and eval paths rely on this.
        let k = 37;
        let n = 19;
        let mut a = vec![0.0f32; 8 * k];
        for (i, v) in a.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f32 / 997.0 - 0.5;
        }
        let mut b = vec![0.0f32; k * n];
        for (i, v) in b.iter_mut().enumerate() {
            *v = ((i * 40503) % 1000) as f32 / 991.0 - 0.5;
        }
        let mut c_full = vec![0.0f32; 8 * n];
        gemm(8, k, n, 1.0, &a, &b, 0.0, &mut c_full);
        for row in 0..8 {
            let mut c_one = vec![0.0f32; n];
            gemm(1, k, n, 1.0, &a[row * k..(row + 1) * k], &b, 0.0, &mut c_one);
            assert_eq!(&c_full[row * n..(row + 1) * n], &c_one[..]);
        }
    }
}
