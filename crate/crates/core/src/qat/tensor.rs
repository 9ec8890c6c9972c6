//! Dense row-major tensors and the handful of kernels the layers need.
//!
//! Every kernel runs its reductions in a fixed order, so identical inputs
//! give bit-identical outputs regardless of the caller.

use super::QatError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, QatError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(QatError::Shape(format!(
                "shape {shape:?} must be non-empty with positive dims"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(QatError::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, QatError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix view; higher-rank tensors fold leading dims.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn amax(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Same shape, new contents.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self, QatError> {
        self.same_shape(other)?;
        Ok(self.with_data(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, QatError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self, QatError> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), QatError> {
        self.same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn same_shape(&self, other: &Tensor) -> Result<(), QatError> {
        if self.shape != other.shape {
            return Err(QatError::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Broadcast-add a row vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Self, QatError> {
        if bias.len() != self.cols() {
            return Err(QatError::Shape(format!(
                "bias of {} for {} columns",
                bias.len(),
                self.cols()
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols()) {
            row.iter_mut().zip(&bias.data).for_each(|(a, b)| *a += b);
        }
        Ok(out)
    }

    /// Column sums as a `[1, cols]` tensor.
    pub fn sum_rows(&self) -> Self {
        let cols = self.cols();
        let mut out = vec![0.0; cols];
        for row in self.data.chunks(cols) {
            out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        Self {
            shape: vec![1, cols],
            data: out,
        }
    }
}

/// `a [m,k] · bᵀ` for `b [n,k]` -> `[m,n]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, QatError> {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(QatError::Shape(format!("matmul_nt inner dims {k} vs {}", b.cols())));
    }
    let mut out = Vec::with_capacity(m * n);
    for ar in a.data.chunks(k) {
        for br in b.data.chunks(k) {
            out.push(ar.iter().zip(br).fold(0.0, |s, (x, y)| s + x * y));
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a [m,k] · b [k,n]` -> `[m,n]`.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Result<Tensor, QatError> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(QatError::Shape(format!("matmul_nn inner dims {k} vs {}", b.rows())));
    }
    let mut out = vec![0.0; m * n];
    for (orow, arow) in out.chunks_mut(n).zip(a.data.chunks(k)) {
        for (&av, brow) in arow.iter().zip(b.data.chunks(n)) {
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` for `a [k,m]`, `b [k,n]` -> `[m,n]` (reduction over rows).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, QatError> {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(QatError::Shape(format!("matmul_tn row counts {k} vs {}", b.rows())));
    }
    let mut out = vec![0.0; m * n];
    for (arow, brow) in a.data.chunks(m).zip(b.data.chunks(n)) {
        for (orow, &av) in out.chunks_mut(n).zip(arow) {
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    Tensor::matrix(m, n, out)
}
