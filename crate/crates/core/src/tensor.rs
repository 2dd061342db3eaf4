//! Dense row-major tensors and the scalar numerics the layers are built from.
//!
//! All arithmetic runs in 64-bit floats. Masked entries (the `-inf` produced by
//! top-k selection) are carried as an explicit flag next to the value so that
//! no NaN can be manufactured from `-inf - -inf` on the way into a softmax.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
            grad: None,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("Tensor::from_rows", &[cols], &[bad.len()]));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor (1 for vectors, which are treated as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| acc * extent + i)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality of shape and values (distinguishes `0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Copies the column range `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let cols = self.cols();
        if self.shape.len() != 2 || start + len > cols {
            return Err(Error::shape("slice_cols", &self.shape, &[start, len]));
        }
        let rows = self.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * cols + start..r * cols + start + len]);
        }
        Tensor::new(vec![rows, len], out)
    }

    /// Copies the row range `[start, start + len)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let cols = self.cols();
        if self.shape.len() != 2 || start + len > self.rows() {
            return Err(Error::shape("slice_rows", &self.shape, &[start, len]));
        }
        Tensor::new(
            vec![len, cols],
            self.data[start * cols..(start + len) * cols].to_vec(),
        )
    }

    /// Concatenates 2-D tiles along columns (inverse of `slice_cols`).
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |p| p.rows());
        if let Some(bad) = parts
            .iter()
            .find(|p| p.shape.len() != 2 || p.rows() != rows)
        {
            return Err(Error::shape("concat_cols", &[rows], bad.shape()));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(vec![rows, total], out)
    }

    /// Concatenates 2-D tiles along rows (inverse of `slice_rows`).
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |p| p.cols());
        if let Some(bad) = parts
            .iter()
            .find(|p| p.shape.len() != 2 || p.cols() != cols)
        {
            return Err(Error::shape("concat_rows", &[cols], bad.shape()));
        }
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor::new(vec![rows, cols], data)
    }
}

/// A vector whose entries may be masked to `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Masked {
    values: Vec<f64>,
    masked: Vec<bool>,
}

impl Masked {
    pub fn unmasked(values: Vec<f64>) -> Self {
        let masked = vec![false; values.len()];
        Self { values, masked }
    }

    /// Interprets `f64::NEG_INFINITY` entries as masked.
    pub fn from_values(values: &[f64]) -> Self {
        let masked = values.iter().map(|v| *v == f64::NEG_INFINITY).collect();
        let values = values
            .iter()
            .map(|v| if *v == f64::NEG_INFINITY { 0.0 } else { *v })
            .collect();
        Self { values, masked }
    }

    pub fn with_mask(values: Vec<f64>, masked: Vec<bool>) -> Result<Self> {
        if values.len() != masked.len() {
            return Err(Error::shape("Masked", &[values.len()], &[masked.len()]));
        }
        Ok(Self { values, masked })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    pub fn mask(&self) -> &[bool] {
        &self.masked
    }

    /// The entry at `i`, or `None` when masked.
    pub fn value(&self, i: usize) -> Option<f64> {
        (!self.masked[i]).then_some(self.values[i])
    }

    /// Dense view with masked entries rendered as `-inf`.
    pub fn to_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.masked)
            .map(|(v, m)| if *m { f64::NEG_INFINITY } else { *v })
            .collect()
    }

    pub fn kept(&self) -> usize {
        self.masked.iter().filter(|m| !**m).count()
    }
}

/// Indices of the `k` largest entries, ties broken towards the lower index.
/// Returned in selection order (largest first).
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps ascending index order among equal values.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    order
}

/// Keeps the `k` largest entries of `v` and masks the rest.
pub fn keep_top_k(v: &[f64], k: usize) -> Result<Masked> {
    if k == 0 || k > v.len() {
        return Err(Error::Config(format!(
            "top-k requires 1 <= k <= {}, got k = {k}",
            v.len()
        )));
    }
    let mut masked = vec![true; v.len()];
    for i in top_k_indices(v, k) {
        masked[i] = false;
    }
    Masked::with_mask(v.to_vec(), masked)
}

/// Max-shifted softmax over the unmasked entries; masked entries map to 0.
pub fn softmax(v: &Masked) -> Result<Vec<f64>> {
    let mut out = vec![0.0; v.len()];
    softmax_into(&v.values, &v.masked, &mut out)?;
    Ok(out)
}

pub(crate) fn softmax_into(values: &[f64], masked: &[bool], out: &mut [f64]) -> Result<()> {
    let max = values
        .iter()
        .zip(masked)
        .filter(|(_, m)| !**m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidGate(
            "softmax over a row with every entry masked".into(),
        ));
    }
    let mut sum = 0.0;
    for ((o, v), m) in out.iter_mut().zip(values).zip(masked) {
        *o = if *m { 0.0 } else { (v - max).exp() };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    Ok(())
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function; the derivative of `softplus`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Strided view of a matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "gemm operand out of bounds");
    }
}

/// `c[m x n] = beta * c + a[m x k] . b[k x n]` over arbitrary strides.
/// `c` is row-major with row stride `ldc` starting at `c_offset`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(
        c_offset + (m - 1) * ldc + n <= c.len(),
        "gemm output out of bounds"
    );
    // SAFETY: every operand was bounds-checked above for the strides handed to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            ldc as isize,
            1,
        );
    }
}

/// Plain matrix product `a[m x k] . b[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        MatRef::row_major(&a.data, k),
        MatRef::row_major(&b.data, n),
        0.0,
        &mut out,
        0,
        n,
    );
    Tensor::new(vec![m, n], out)
}
