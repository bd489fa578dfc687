use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::DiffError;

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient verification).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above and
                // `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major array. Rank 0, 1 and 2 are supported; vectors act as a
/// single row.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, DiffError> {
        if shape.len() > 2 {
            return Err(DiffError::UnsupportedRank(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, DiffError> {
        Self::new(&[rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("rank checked by caller")
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1, 1], data: vec![v] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, DiffError> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> Result<T, DiffError> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(DiffError::NotScalar(self.shape.clone())),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::of(v.f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `op(self) · op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, transpose_self: bool, other: &Self, transpose_other: bool) -> Result<Self, DiffError> {
        let (m, k) = if transpose_self { (self.cols(), self.rows()) } else { (self.rows(), self.cols()) };
        let (k2, n) = if transpose_other { (other.cols(), other.rows()) } else { (other.rows(), other.cols()) };
        if k != k2 {
            return Err(DiffError::ShapeMismatch(format!(
                "matmul inner dimensions {k} and {k2} (shapes {:?}, {:?})",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&self.data, self.cols(), transpose_self, &other.data, other.cols(), transpose_other, &mut out, m, k, n, T::zero());
        Self::matrix(m, n, out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, DiffError> {
        self.matmul_t(false, other, false)
    }
}

/// `out = beta*out + op(a)·op(b)` for row-major buffers with the given
/// physical column counts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<T: Scalar>(
    a: &[T],
    a_cols: usize,
    ta: bool,
    b: &[T],
    b_cols: usize,
    tb: bool,
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    beta: T,
) {
    let sa = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let sb = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    T::gemm(m, k, n, T::one(), a, sa, b, sb, beta, out, (n as isize, 1));
}
