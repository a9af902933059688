use serde::{Deserialize, Serialize};

use super::KernelError;

/// Dense row-major tensor of `f64`.
///
/// Every op in the kernel works on rank-2 tensors; scalars are `1×1` and
/// vectors are single rows or single columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, KernelError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(KernelError::DataLength { shape, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Result<Self, KernelError> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn column(data: Vec<f64>) -> Result<Self, KernelError> {
        let n = data.len();
        Self::new(vec![n, 1], data)
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, KernelError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(KernelError::Shape {
                    op: "from_rows",
                    left: vec![1, cols],
                    right: vec![1, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    // Unchecked constructor for op outputs; finiteness is checked by the graph.
    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::raw(c, r, out)
    }
}

/// Result of row-wise L2 normalization.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub tensor: Tensor,
    /// Rows whose norm was exactly zero; they are emitted as zero rows.
    pub zero_rows: Vec<usize>,
}

impl Normalized {
    pub fn is_degenerate(&self) -> bool {
        !self.zero_rows.is_empty()
    }
}

/// Scales every row to unit Euclidean norm. Zero rows stay zero and are
/// reported in [`Normalized::zero_rows`].
pub fn l2_normalize(v: &Tensor) -> Normalized {
    let (r, c) = (v.rows(), v.cols());
    let mut out = v.data.clone();
    let mut zero_rows = Vec::new();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let norm = row_norm(row);
        if norm == 0.0 {
            zero_rows.push(i);
            continue;
        }
        for x in row.iter_mut() {
            *x /= norm;
        }
    }
    Normalized {
        tensor: Tensor::raw(r, c, out),
        zero_rows,
    }
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    // scaled to avoid overflow on large entries
    let scale = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let s: f64 = row.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * s.sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[i][j] = dot(a_i, b_j)`; the cosine matrix when rows are unit-norm.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    if a.cols() != b.cols() {
        return Err(KernelError::Shape {
            op: "cosine_matrix",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row_slice(i);
        for j in 0..m {
            out.push(dot(ai, b.row_slice(j)));
        }
    }
    Ok(Tensor::raw(n, m, out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor, KernelError> {
    if !m.is_finite() {
        return Err(KernelError::NonFinite { op: "softmax_rows" });
    }
    let (r, c) = (m.rows(), m.cols());
    let mut out = m.data.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(Tensor::raw(r, c, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_three_four_five() {
        let t = Tensor::row(vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&t);
        assert!(!n.is_degenerate());
        assert!((n.tensor.data()[0] - 0.6).abs() < 1e-15);
        assert!((n.tensor.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let t = Tensor::row(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(l2_normalize(&t).tensor.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_random_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let n = l2_normalize(&Tensor::row(v).unwrap());
        let norm = dot(n.tensor.data(), n.tensor.data()).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_is_flagged() {
        let t = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let n = l2_normalize(&t);
        assert_eq!(n.zero_rows, vec![0]);
        assert_eq!(&n.tensor.data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn cosine_orthogonal_and_identical() {
        let a = Tensor::row(vec![1.0, 0.0]).unwrap();
        let b = Tensor::row(vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_matrix(&a, &b).unwrap().data(), &[0.0]);
        assert_eq!(cosine_matrix(&a, &a).unwrap().data(), &[1.0]);
    }

    #[test]
    fn cosine_self_similarity_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = l2_normalize(&Tensor::matrix(3, 2, raw).unwrap()).tensor;
        let c = cosine_matrix(&a, &a).unwrap();
        for i in 0..3 {
            assert!((c.get(i, i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_dim_mismatch() {
        let a = Tensor::row(vec![1.0, 0.0]).unwrap();
        let b = Tensor::row(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(cosine_matrix(&a, &b), Err(KernelError::Shape { .. })));
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let s = softmax_rows(&Tensor::row(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::row(vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn tensor_rejects_bad_length_and_nan() {
        assert!(Tensor::matrix(2, 2, vec![1.0]).is_err());
        assert!(Tensor::row(vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e6f64..1e6, 16)) {
            let s = softmax_rows(&Tensor::matrix(4, 4, vals).unwrap()).unwrap();
            for i in 0..4 {
                let sum: f64 = s.row_slice(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn cosine_of_unit_rows_is_bounded(vals in proptest::collection::vec(-10f64..10.0, 30)) {
            let n = l2_normalize(&Tensor::matrix(5, 6, vals).unwrap());
            let c = cosine_matrix(&n.tensor, &n.tensor).unwrap();
            for &x in c.data() {
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&x));
            }
        }
    }
}
