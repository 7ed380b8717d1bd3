//! Dense 4-D tensors in NCHW layout.
//!
//! Everything the network touches (activations, conv kernels, normalization
//! vectors) is stored as a `[n, c, h, w]` block so that a single type and a
//! single set of kernels covers the whole model. The element type is generic
//! so the same code runs in `f32` for training and `f64` for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Scalar type usable by the numeric kernels.
pub trait Elem:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a·b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn cst(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_elem {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Elem for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $kernel(
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
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_elem!(f32, "f32", matrixmultiply::sgemm);
impl_elem!(f64, "f64", matrixmultiply::dgemm);

/// Row-major `m×k` times `k×n` into `m×n`, all contiguous, `c = a·b + beta·c`.
pub(crate) fn matmul<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    E::gemm(
        m, k, n, E::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
    );
}

/// `c = aᵀ·b + beta·c` where `a` is stored `k×m`.
pub(crate) fn matmul_tn<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    E::gemm(
        m, k, n, E::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1,
    );
}

/// `c = a·bᵀ + beta·c` where `b` is stored `n×k`.
pub(crate) fn matmul_nt<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    E::gemm(
        m, k, n, E::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1,
    );
}

#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: [usize; 4],
    data: Vec<E>,
}

impl<E: Debug> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl<E: Elem> Tensor<E> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![E::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: E) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot form tensor {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<E> {
        self.data
    }

    /// Contiguous `c·h·w` slab of batch item `n`.
    pub fn item(&self, n: usize) -> &[E] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [E] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        let [_, cc, hh, ww] = self.shape;
        self.data[((n * cc + c) * hh + y) * ww + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: E) {
        let [_, cc, hh, ww] = self.shape;
        self.data[((n * cc + c) * hh + y) * ww + x] = v;
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| F::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(F::nan()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<E>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, k: E) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> E {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(E::zero(), E::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor<E>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Self::from_vec([n, c, h, w], data)
    }

    /// Batch item `n` as its own tensor.
    pub fn select(&self, n: usize) -> Tensor<E> {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item(n).to_vec(),
        }
    }
}
