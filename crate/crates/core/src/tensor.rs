//! Dense row-major tensors over `f32`/`f64` with a GEMM hook.
//!
//! Values are reference-counted so graph nodes, traces and checkpoints can
//! share buffers without copying. All shapes are explicit; there is no
//! broadcasting at this level.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

/// Element type for all numeric work. `f32` is the training default,
/// `f64` backs the tight-tolerance gradient-check suites.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Send + Sync + 'static + serde::Serialize
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;

    /// C = A·B for row-major slices, with explicit strides so callers can
    /// express transposed views without copying.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Element dtype tag used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc)
    }
}

/// Dense row-major tensor. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor<S> {
    shape: Arc<Vec<usize>>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} wants {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor {
            shape: Arc::new(shape.to_vec()),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![S::zero(); numel])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: S) -> Self {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        if Arc::strong_count(&self.data) > 1 {
            self.data = Arc::new(self.data.as_ref().clone());
        }
        Arc::get_mut(&mut self.data).expect("unshared after clone-on-write")
    }

    /// Same buffer, new shape. Element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {:?}", self.shape(), shape);
        Tensor {
            shape: Arc::new(shape.to_vec()),
            data: Arc::clone(&self.data),
        }
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor::from_vec(self.shape(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(self.shape(), data)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_t(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub_t(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul_t(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a * b)
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_f64(self.numel() as f64)
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Mean squared difference; the workhorse behind pixel-space metrics.
    pub fn mse(&self, other: &Self) -> S {
        assert_eq!(self.shape(), other.shape());
        let mut acc = S::zero();
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let d = a - b;
            acc = acc + d * d;
        }
        acc / S::from_f64(self.numel() as f64)
    }

    pub fn clamp(&self, lo: S, hi: S) -> Self {
        self.map(|v| if v < lo { lo } else if v > hi { hi } else { v })
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::from_vec(self.shape(), self.data.iter().map(|v| v.to_f64_()).collect())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor::from_vec(
            self.shape(),
            self.data.iter().map(|v| v.to_f64_() as f32).collect(),
        )
    }

    /// FNV-1a over the raw little-endian element bytes plus the shape.
    /// Stable across runs for identical contents.
    pub fn content_hash(&self) -> u64 {
        let mut h = fnv_init();
        for &d in self.shape.iter() {
            h = fnv_u64(h, d as u64);
        }
        for v in self.data.iter() {
            h = fnv_u64(h, v.to_f64_().to_bits());
        }
        h
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape())?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

pub(crate) fn fnv_init() -> u64 {
    0xcbf2_9ce4_8422_2325
}

pub(crate) fn fnv_u64(mut h: u64, v: u64) -> u64 {
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn fnv_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Row-major C[m,n] = A[m,k] · B[k,n].
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        out.iter_mut().for_each(|v| *v = S::zero());
        return;
    }
    unsafe {
        S::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ without materializing the transpose.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(out.len(), m * n);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A[k,m]ᵀ · B[k,n] without materializing the transpose.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        matmul(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_views_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.5, -1.0, 2.0, 0.0, 3.0]; // 3x2
        let mut c = [0.0f64; 4];
        matmul(&a, &b, 2, 3, 2, &mut c);

        // bt is b transposed to 2x3; matmul_nt should reproduce c.
        let bt = [1.0f64, -1.0, 0.0, 0.5, 2.0, 3.0];
        let mut c2 = [0.0f64; 4];
        matmul_nt(&a, &bt, 2, 3, 2, &mut c2);
        for (x, y) in c.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // at is a transposed to 3x2; matmul_tn should reproduce c.
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0f64; 4];
        matmul_tn(&at, &b, 2, 3, 2, &mut c3);
        for (x, y) in c.iter().zip(c3.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clone_on_write_preserves_original() {
        let a = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 9.0);
    }

    #[test]
    fn content_hash_sensitive_to_shape_and_data() {
        let a = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f32>::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let c = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 5.0]);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }
}
