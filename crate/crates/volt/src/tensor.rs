//! Dense row-major f64 tensors and the numeric kernels the model is built from.
//!
//! Tensors are immutable values; the data buffer is shared via `Arc` so that
//! cloning a parameter into a per-sample computation graph is cheap. Every
//! kernel validates shapes and every constructed tensor is checked for
//! NaN/Inf — a non-finite value anywhere is an error state, not a warning.

use std::sync::Arc;

use crate::error::{Result, VoltError};

/// Probabilities fed to binary cross-entropy are clamped to this range.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(VoltError::shape(format!(
                "tensor data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expect
            )));
        }
        let t = Tensor {
            shape,
            data: Arc::new(data),
        };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    /// Internal constructor for values known to be finite.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; len])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![], vec![v])
    }

    /// Rank-2 helper used heavily in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(VoltError::shape("ragged rows in from_rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view; copies only if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(VoltError::shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(VoltError::numeric(format!(
                "non-finite value produced by {context}"
            )))
        }
    }

    fn expect_rank2(&self, op: &str) -> Result<(usize, usize)> {
        if self.rank() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(VoltError::shape(format!(
                "{op}: expected rank-2 tensor, got shape {:?}",
                self.shape
            )))
        }
    }
}

fn checked(shape: Vec<usize>, data: Vec<f64>, op: &str) -> Result<Tensor> {
    let t = Tensor::from_parts(shape, data);
    t.check_finite(op)?;
    Ok(t)
}

unsafe fn dgemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
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
        0.0,
        c.as_mut_ptr(),
        n as isize,
        1,
    );
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.expect_rank2("matmul lhs")?;
    let (kb, n) = b.expect_rank2("matmul rhs")?;
    if ka != kb {
        return Err(VoltError::shape(format!(
            "matmul: inner dimensions {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0; m * n];
    unsafe {
        dgemm_into(
            m,
            ka,
            n,
            a.data(),
            (ka as isize, 1),
            b.data(),
            (n as isize, 1),
            &mut out,
        );
    }
    checked(vec![m, n], out, "matmul")
}

/// `a (m×k) · bᵀ` where `b` is stored n×k.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.expect_rank2("matmul_nt lhs")?;
    let (n, kb) = b.expect_rank2("matmul_nt rhs")?;
    if ka != kb {
        return Err(VoltError::shape(format!(
            "matmul_nt: inner dimensions {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0; m * n];
    unsafe {
        dgemm_into(
            m,
            ka,
            n,
            a.data(),
            (ka as isize, 1),
            b.data(),
            (1, kb as isize),
            &mut out,
        );
    }
    checked(vec![m, n], out, "matmul_nt")
}

/// `aᵀ · b` where `a` is stored k×m and `b` is k×n.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, m) = a.expect_rank2("matmul_tn lhs")?;
    let (kb, n) = b.expect_rank2("matmul_tn rhs")?;
    if ka != kb {
        return Err(VoltError::shape(format!(
            "matmul_tn: inner dimensions {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0; m * n];
    unsafe {
        dgemm_into(
            m,
            ka,
            n,
            a.data(),
            (1, m as isize),
            b.data(),
            (n as isize, 1),
            &mut out,
        );
    }
    checked(vec![m, n], out, "matmul_tn")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.expect_rank2("transpose")?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(VoltError::shape(format!(
            "add: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x + y)
        .collect();
    checked(a.shape().to_vec(), data, "add")
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let data = a.data().iter().map(|x| x * c).collect();
    checked(a.shape().to_vec(), data, "scale")
}

/// Concatenate rank-2 tensors along the feature (column) dimension.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(VoltError::shape("concat_cols: no inputs"));
    }
    let (rows, _) = parts[0].expect_rank2("concat_cols")?;
    let mut total_cols = 0;
    for p in parts {
        let (r, c) = p.expect_rank2("concat_cols")?;
        if r != rows {
            return Err(VoltError::shape(format!(
                "concat_cols: row counts {rows} vs {r}"
            )));
        }
        total_cols += c;
    }
    let mut out = vec![0.0; rows * total_cols];
    for i in 0..rows {
        let mut offset = 0;
        for p in parts {
            let c = p.cols();
            out[i * total_cols + offset..i * total_cols + offset + c]
                .copy_from_slice(&p.data()[i * c..(i + 1) * c]);
            offset += c;
        }
    }
    Ok(Tensor::from_parts(vec![rows, total_cols], out))
}

/// Inverse of `concat_cols` for the given column widths.
pub fn split_cols(t: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let (rows, cols) = t.expect_rank2("split_cols")?;
    if widths.iter().sum::<usize>() != cols {
        return Err(VoltError::shape(format!(
            "split_cols: widths {:?} do not sum to {cols}",
            widths
        )));
    }
    let mut out = Vec::with_capacity(widths.len());
    let mut offset = 0;
    for &w in widths {
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&t.data()[i * cols + offset..i * cols + offset + w]);
        }
        out.push(Tensor::from_parts(vec![rows, w], data));
        offset += w;
    }
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction for stability.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.expect_rank2("softmax_rows")?;
    if cols == 0 {
        return Err(VoltError::shape("softmax_rows: zero-width rows"));
    }
    let src = m.data();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &src[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * cols..(i + 1) * cols];
        let mut sum = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            let e = (x - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    checked(vec![rows, cols], out, "softmax_rows")
}

/// Per-row layer normalization: `gamma ⊙ (x − μ)/√(σ² + eps) + beta`.
/// The variance is the biased (divide by d) row variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, d) = x.expect_rank2("layer_norm")?;
    if d < 1 {
        return Err(VoltError::shape("layer_norm: feature dimension < 1"));
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(VoltError::shape(format!(
            "layer_norm: gamma/beta shapes {:?}/{:?} vs feature dim {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let src = x.data();
    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![0.0; rows * d];
    for i in 0..rows {
        let row = &src[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let dst = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            dst[j] = g[j] * (row[j] - mean) * inv_std + b[j];
        }
    }
    checked(vec![rows, d], out, "layer_norm")
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| x.max(0.0)).collect();
    checked(a.shape().to_vec(), data, "relu")
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    checked(a.shape().to_vec(), data, "sigmoid")
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Mean binary cross-entropy over all entries, with predictions clamped to
/// `[1e-7, 1 − 1e-7]`. Targets must be exactly 0 or 1. Returns a rank-0 tensor.
pub fn bce_mean(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(VoltError::shape(format!(
            "bce_mean: shape {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(VoltError::shape("bce_mean: empty input"));
    }
    let mut total = 0.0;
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        if y != 0.0 && y != 1.0 {
            return Err(VoltError::data(format!(
                "bce_mean: target value {y} is not binary"
            )));
        }
        let pc = clamp_prob(p);
        total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    let loss = total / pred.len() as f64;
    if loss.is_finite() {
        Ok(Tensor::scalar(loss))
    } else {
        Err(VoltError::numeric("bce_mean produced non-finite loss"))
    }
}

pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    let s: f64 = a.data().iter().sum();
    if s.is_finite() {
        Ok(Tensor::scalar(s))
    } else {
        Err(VoltError::numeric("sum_all produced non-finite value"))
    }
}

/// In-place gradient accumulation; shapes must already agree.
pub(crate) fn add_assign(acc: &mut Tensor, rhs: &Tensor) {
    debug_assert_eq!(acc.shape(), rhs.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(rhs.data()) {
        *a += b;
    }
}
