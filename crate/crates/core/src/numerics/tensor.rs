use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major f64 array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Tensor { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[self.shape.len() - 1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product. Leading dimensions are batch dimensions and must
    /// agree, except that a rank-2 right operand is shared by every batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(self.shape(), other.shape(), false)?;
        let mut out = Tensor::zeros(&plan.out_shape);
        plan.forward(&self.data, &other.data, &mut out.data);
        Ok(out)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        softmax_strided(&mut out, outer, n, inner);
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_strided(data: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let idx = |k: usize| base + k * inner;
            let mut max = f64::NEG_INFINITY;
            for k in 0..n {
                max = max.max(data[idx(k)]);
            }
            let mut sum = 0.0;
            for k in 0..n {
                let e = (data[idx(k)] - max).exp();
                data[idx(k)] = e;
                sum += e;
            }
            for k in 0..n {
                data[idx(k)] /= sum;
            }
        }
    }
}

/// C (+)= op(A) * op(B) for row-major operands. `ta`/`tb` mean the stored
/// matrix is the transpose of the logical operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the full extents implied by the dimensions
    // and strides checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Shape bookkeeping shared by the plain and differentiable matmul.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand is a single matrix shared across the batch.
    pub shared_rhs: bool,
    /// Right operand is stored transposed ([.., n, k]).
    pub tb: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize], tb: bool) -> Result<Self> {
        let mismatch = || Error::Shape(format!("matmul {a:?} x {b:?}{}", if tb { " (rhs transposed)" } else { "" }));
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = if tb { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
        if k != kb {
            return Err(mismatch());
        }
        let batch_a = &a[..a.len() - 2];
        let batch_b = &b[..b.len() - 2];
        let shared_rhs = batch_b.is_empty();
        if !shared_rhs && batch_a != batch_b {
            return Err(mismatch());
        }
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulPlan { batch: batch_a.iter().product(), m, k, n, shared_rhs, tb, out_shape })
    }

    fn rhs(&self, i: usize) -> usize {
        if self.shared_rhs { 0 } else { i * self.k * self.n }
    }

    pub fn forward(&self, a: &[f64], b: &[f64], c: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for i in 0..self.batch {
            gemm(m, k, n, &a[i * m * k..], false, &b[self.rhs(i)..], self.tb, &mut c[i * m * n..], false);
        }
    }

    /// dA += dC * op(B)^T
    pub fn grad_lhs(&self, dc: &[f64], b: &[f64], da: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for i in 0..self.batch {
            gemm(m, n, k, &dc[i * m * n..], false, &b[self.rhs(i)..], !self.tb, &mut da[i * m * k..], true);
        }
    }

    /// dB += op(A)^T * dC, written in B's storage layout.
    pub fn grad_rhs(&self, a: &[f64], dc: &[f64], db: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for i in 0..self.batch {
            let dst = &mut db[self.rhs(i)..];
            if self.tb {
                // stored [n, k]: dB^T = dC^T * A
                gemm(n, m, k, &dc[i * m * n..], true, &a[i * m * k..], false, dst, true);
            } else {
                gemm(k, m, n, &a[i * m * k..], true, &dc[i * m * n..], false, dst, true);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
        let err = a.matmul(&Tensor::zeros(&[3, 1])).unwrap_err();
        assert!(err.to_string().contains("[2, 2]") && err.to_string().contains("[3, 1]"));
    }

    #[test]
    fn batched_matmul() {
        let a = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2, 1], vec![1.0, 1.0, 2.0, 0.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 6.0]);
        let shared = a.matmul(&Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()).unwrap();
        assert_eq!(shared.data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_basics() {
        let z = Tensor::zeros(&[1, 4]).softmax(1).unwrap();
        assert_eq!(z.data(), &[0.25; 4]);
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 3.0, 1e3]).unwrap();
        let shifted = Tensor::new(&[2, 3], x.data().iter().map(|v| v + 7.5).collect()).unwrap();
        let (s, t) = (x.softmax(1).unwrap(), shifted.softmax(1).unwrap());
        for (a, b) in s.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let cols = x.softmax(0).unwrap();
        for c in 0..3 {
            assert!((cols.at(0, c) + cols.at(1, c) - 1.0).abs() < 1e-12);
        }
    }
}
