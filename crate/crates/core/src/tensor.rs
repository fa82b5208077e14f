//! Dense 4-D tensors in `[batch, channel, height, width]` order.

use crate::error::{RegoError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(RegoError::Shape(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
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
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }
    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }
    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(b, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous slice holding sample `b`.
    pub fn sample(&self, b: usize) -> &[f64] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[b * stride..(b + 1) * stride]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[b * stride..(b + 1) * stride]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(RegoError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn ensure_shape(&self, expected: [usize; 4], what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(RegoError::Shape(format!(
                "{what}: expected {expected:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Columns `[start, start + len)` of every row.
    pub fn slice_width(&self, start: usize, len: usize) -> Self {
        let [n, c, h, w] = self.shape;
        assert!(start + len <= w);
        let mut out = Vec::with_capacity(n * c * h * len);
        for row in self.data.chunks_exact(w) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Tensor {
            shape: [n, c, h, len],
            data: out,
        }
    }

    pub fn concat_width(a: &Tensor, b: &Tensor) -> Result<Self> {
        let [n, c, h, wa] = a.shape;
        if b.n() != n || b.c() != c || b.h() != h {
            return Err(RegoError::Shape(format!(
                "width concat of {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let wb = b.w();
        let mut out = Vec::with_capacity(a.len() + b.len());
        for (ra, rb) in a.data.chunks_exact(wa).zip(b.data.chunks_exact(wb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        Ok(Tensor {
            shape: [n, c, h, wa + wb],
            data: out,
        })
    }

    pub fn concat_batch(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| RegoError::Shape("empty batch".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.c() != c || p.h() != h || p.w() != w {
                return Err(RegoError::Shape(format!(
                    "batch concat of {:?} and {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn select_sample(&self, b: usize) -> Self {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.sample(b).to_vec(),
        }
    }
}

/// `c = alpha * a·b + beta * c` for row-major matrices, with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() >= (m - 1) * a_rs + (k - 1) * a_cs + 1);
    assert!(b.len() >= (k - 1) * b_rs + (n - 1) * b_cs + 1);
    assert!(c.len() >= m * n);
    // SAFETY: bounds of every operand were checked above for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_split_round_trip() {
        let t = Tensor::from_fn([2, 3, 4, 6], |b, c, y, x| (b * 1000 + c * 100 + y * 10 + x) as f64);
        let l = t.slice_width(0, 3);
        let r = t.slice_width(3, 3);
        assert_eq!(Tensor::concat_width(&l, &r).unwrap(), t);
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, 3, 1, &b, 4, 1, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }
}
