use std::fmt;
use std::sync::Arc;

/// Scalar element type for tensors. Implemented for `f32` (training) and
/// `f64` (verification mode for gradient checks).
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C <- alpha * A(m,k) * B(k,n) + beta * C(m,n).
    ///
    /// A and B carry explicit (row, col) strides so transposed views need no
    /// copy; C is row-major contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Dense row-major tensor. The buffer is shared (`Arc`), so clones are cheap
/// and functional parameter updates copy only what they touch.
#[derive(Clone)]
pub struct TensorData<S = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> TensorData<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![S::zero(); n]) }
    }

    pub fn scalar(x: S) -> Self {
        Self { shape: vec![], data: Arc::new(vec![x]) }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Self {
        Self::new(shape.to_vec(), values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    /// Mutable access; clones the buffer first if it is shared.
    pub fn make_mut(&mut self) -> &mut [S] {
        let v: &mut Vec<S> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    /// Same buffer under a different shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape element count mismatch");
        Self { shape, data: Arc::clone(&self.data) }
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    /// Converts element type through f64 (exact for f32 -> f64; rounds the
    /// other way).
    pub fn cast<T: Scalar>(&self) -> TensorData<T> {
        let data = self.as_slice().iter().map(|&x| T::from_f64(x.as_f64())).collect();
        TensorData::new(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&x| f(x)).collect()) }
    }

    /// self + scale * other, elementwise.
    pub fn add_scaled(&self, other: &Self, scale: S) -> Self {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + scale * b)
            .collect();
        Self { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Two tensors sharing shape and bitwise-equal contents.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<S: Scalar> fmt::Debug for TensorData<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TensorData{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, ...]", &self.data[..8])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0f64; 8];
        f64::gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let mut want = 0.0;
                for k in 0..3 {
                    want += a[i * 3 + k] * b[k * 4 + j];
                }
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposed_b() {
        // C = A (2x3) * B^T where B is stored 4x3 row-major.
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64) - 3.0).collect();
        let mut c = vec![0.0f64; 8];
        f64::gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 1, 3, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let mut want = 0.0;
                for k in 0..3 {
                    want += a[i * 3 + k] * b[j * 3 + k];
                }
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_buffer_copy_on_write() {
        let t = TensorData::<f32>::new(vec![3], vec![1.0, 2.0, 3.0]);
        let mut u = t.clone();
        u.make_mut()[0] = 9.0;
        assert_eq!(t.as_slice()[0], 1.0);
        assert_eq!(u.as_slice()[0], 9.0);
    }
}
