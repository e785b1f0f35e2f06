use std::fmt;

use crate::error::{NumError, Result};

/// Storage precision for values produced by the graph and the optimizer.
///
/// Arithmetic and every reduction always run in `f64`; `F32` rounds each
/// stored result to the nearest single-precision value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = NumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" | "64" => Ok(Precision::F64),
            "f32" | "32" => Ok(Precision::F32),
            other => Err(NumError::Parse(format!("unknown precision `{other}`"))),
        }
    }
}

/// Dense row-major matrix. Column vectors are `n x 1`, scalars `1 x 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(NumError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(NumError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn column(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(n, 1, values)
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumError::DataLength {
                    rows: r,
                    cols: c,
                    len: row.len() * r,
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// The only element of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(NumError::NotScalar {
                shape: self.shape(),
            });
        }
        Ok(self.data[0])
    }

    pub fn column_at(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::from_parts(self.cols, self.rows, out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(NumError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        gemm(
            &self.data,
            self.rows,
            self.cols,
            false,
            &other.data,
            other.cols,
            false,
            &mut out,
        );
        Ok(Tensor::from_parts(self.rows, other.cols, out))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

/// `out += op(a) * op(b)` for row-major buffers.
///
/// `a` is stored as `a_rows x a_cols`; when `trans_a` is set the logical
/// operand is its transpose. Same for `b` with `b_cols` columns in storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_cols: usize,
    trans_b: bool,
    out: &mut [f64],
) {
    let (m, k) = if trans_a {
        (a_cols, a_rows)
    } else {
        (a_rows, a_cols)
    };
    let b_rows = b.len() / b_cols;
    let n = if trans_b { b_rows } else { b_cols };
    debug_assert_eq!(out.len(), m * n);
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * a_cols + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let b_row = &b[p * b_cols..(p + 1) * b_cols];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += aip * bv;
                    }
                }
            }
        }
        (true, false) => {
            // a stored k x m
            for p in 0..k {
                let a_row = &a[p * a_cols..(p + 1) * a_cols];
                let b_row = &b[p * b_cols..(p + 1) * b_cols];
                for (i, &api) in a_row.iter().enumerate() {
                    if api == 0.0 {
                        continue;
                    }
                    let out_row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += api * bv;
                    }
                }
            }
        }
        (false, true) => {
            // b stored n x k
            for i in 0..m {
                let a_row = &a[i * a_cols..(i + 1) * a_cols];
                for j in 0..n {
                    let b_row = &b[j * b_cols..(j + 1) * b_cols];
                    let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                    out[i * n + j] += dot;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[p * a_cols + i] * b[j * b_cols + p];
                    }
                    out[i * n + j] += acc;
                }
            }
        }
    }
}
