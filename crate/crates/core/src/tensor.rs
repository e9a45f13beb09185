//! Dense row-major tensors over an abstract scalar, shared by f32 training
//! and f64 gradient checking.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected} data elements for shape {shape:?}, got {got}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: expected scalar, got shape {shape:?}")]
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Incompatible { op: &'static str, detail: String },
}

/// Floating-point element type of a [`Tensor`]. Implemented for `f32`
/// (training) and `f64` (gradient checks); `gemm` dispatches to the
/// matching matrixmultiply kernel, which is single-threaded and uses a
/// fixed reduction order for fixed shapes.
pub trait Scalar:
    Float + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// `c += a @ b + (beta - 1) * c` for strided `a: m x k`, `b: k x n` and
    /// row-major `c: m x n`; strides are (row, col) element offsets, so a
    /// transposed operand is expressed by swapping its strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(strided_len(m, k, rsa, csa) <= a.len());
        debug_assert!(strided_len(k, n, rsb, csb) <= b.len());
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(strided_len(m, k, rsa, csa) <= a.len());
        debug_assert!(strided_len(k, n, rsb, csb) <= b.len());
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Highest element index touched (plus one) by an `m x k` strided read.
fn strided_len(m: usize, k: usize, rs: isize, cs: isize) -> usize {
    if m == 0 || k == 0 {
        return 0;
    }
    let last = (m as isize - 1) * rs + (k as isize - 1) * cs;
    debug_assert!(last >= 0);
    last as usize + 1
}

/// Dense row-major tensor. The shape may have any rank; rank 0 is a scalar
/// with one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                op: "from_vec",
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: rand::Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = rand_distr::Normal::new(0.0f64, std).expect("std must be finite");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.sample(dist)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar tensors hold exactly one element.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            })
        }
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                op: "reshape",
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination; shapes must match exactly.
    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Convert elementwise between scalar types (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

/// Row-major matrix product of 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        T::zero(),
        out.data_mut(),
    );
    Ok(out)
}

/// Transpose of a 2-D tensor.
pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.rank() != 2 {
        return Err(TensorError::Incompatible {
            op: "transpose",
            detail: format!("expected rank 2, got shape {:?}", a.shape()),
        });
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(out)
}

/// Numerically stable softmax of one logit row, written into `out`.
pub fn softmax_into<T: Scalar>(logits: &[T], out: &mut [T]) {
    debug_assert_eq!(logits.len(), out.len());
    let mut max = T::neg_infinity();
    for &x in logits {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(logits) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if x.rank() != 2 {
        return Err(TensorError::Incompatible {
            op: "softmax_rows",
            detail: format!("expected rank 2, got shape {:?}", x.shape()),
        });
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        softmax_into(&x.data()[i * d..(i + 1) * d], &mut out.data_mut()[i * d..(i + 1) * d]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_input() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let out = matmul(&a, &eye).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_projector_selects_rows() {
        // Permutation matrix picking rows (1, 0) of a.
        let p = Tensor::from_vec(&[2, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        let a = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let out = matmul(&p, &a).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "message: {msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one_f32() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
        let x = Tensor::<f32>::randn(&[17, 33], 5.0, &mut rng);
        let p = softmax_rows(&x).unwrap();
        for i in 0..17 {
            let s: f32 = p.data()[i * 33..(i + 1) * 33].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let t = transpose2d(&a).unwrap();
        assert_eq!(t.shape(), &[8, 5]);
        assert_eq!(transpose2d(&t).unwrap(), a);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::from_vec(&[2, 2], vec![1.0f32; 3]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { .. }));
    }
}
