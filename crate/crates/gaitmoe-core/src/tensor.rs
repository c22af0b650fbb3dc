//! Dense row-major f64 tensors.
//!
//! `Tensor` is the data-interchange type at module boundaries (pose batches,
//! parameters, evaluation embeddings). The autodiff tape stores flat buffers
//! internally and treats shapes as per-operation metadata; `Tensor` carries
//! the logical shape for everything that crosses an API edge.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether gradients should be tracked when this tensor enters a tape.
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data buffer.
    ///
    /// Errors when `product(shape) != data.len()`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, String> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(alloc::format!(
                "tensor shape {shape:?} implies {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false })
    }

    /// All-zeros tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    /// Marks the tensor as gradient-tracked (builder style).
    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the tensor under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, String> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(alloc::format!(
                "cannot reshape {} elements to {shape:?}",
                self.data.len()
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C = alpha·op(A)·op(B) + beta·C` for row-major matrices.
///
/// `op` transposes when the corresponding flag is set; transposition is
/// realized through strides, so no copies are made. Dimensions are those of
/// the *product*: `op(A)` is m×k, `op(B)` is k×n, `C` is m×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: A buffer length");
    assert_eq!(b.len(), k * n, "gemm: B buffer length");
    assert_eq!(c.len(), m * n, "gemm: C buffer length");
    // Row-major strides; a transposed operand swaps its row/col strides.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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
