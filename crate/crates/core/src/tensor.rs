//! Dense row-major `f64` tensors and the flat matmul kernels everything
//! else is built on.
//!
//! The struct is deliberately plain — a shape and a `Vec<f64>` — because the
//! point of this codebase is that every intermediate (attention scores,
//! head values, gradients) is an ordinary matrix you can read, copy and
//! perturb.  All compute is single-threaded and runs in a fixed order, so a
//! given seed reproduces every value bit-for-bit.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from parts, enforcing the one structural invariant: the shape
    /// product equals the element count.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|i| f(i)).collect(),
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

    /// Scalar tensors (shape `[]` or `[1]`) unwrap to their single value.
    pub fn item(&self) -> f64 {
        debug_assert!(self.data.len() == 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let n = self.shape[1];
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "hadamard",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Plain 2-D product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul", self)?;
        let (k2, n) = dims2("matmul", other)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {k} vs {k2}"),
            ));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        mm_nn_acc(&mut out.data, &self.data, &other.data, m, k, n);
        Ok(out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul_nt", self)?;
        let (n, k2) = dims2("matmul_nt", other)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner dims {k} vs {k2}"),
            ));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        mm_nt_acc(&mut out.data, &self.data, &other.data, m, k, n);
        Ok(out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2(&self) -> Tensor {
        debug_assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(op, format!("expected 2-D, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

// ---------------------------------------------------------------------------
// Flat kernels.  All three accumulate into `out` (callers zero it for a plain
// product), and all walk memory row-major so the inner loops vectorise.
// ---------------------------------------------------------------------------

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn mm_nn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn mm_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            orow[j] += acc;
        }
    }
}

/// `out[m,n] += a[t,m]ᵀ · b[t,n]`
pub(crate) fn mm_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], t: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), t * m);
    debug_assert_eq!(b.len(), t * n);
    debug_assert_eq!(out.len(), m * n);
    for tt in 0..t {
        let arow = &a[tt * m..(tt + 1) * m];
        let brow = &b[tt * n..(tt + 1) * n];
        for i in 0..m {
            let ati = arow[i];
            if ati == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ati * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_mm(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.get2(i, t) * b.get2(t, j);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }

    fn random(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn from_vec_rejects_bad_count() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_matches_naive_on_random_shapes() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a = random(vec![m, k], &mut rng);
            let b = random(vec![k, n], &mut rng);
            let got = a.matmul(&b).unwrap();
            let want = naive_mm(&a, &b);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_nt_equals_matmul_with_transpose() {
        let mut rng = Rng::new(12);
        let a = random(vec![4, 6], &mut rng);
        let b = random(vec![5, 6], &mut rng);
        let got = a.matmul_nt(&b).unwrap();
        let want = a.matmul(&b.transpose2()).unwrap();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn mm_tn_equals_transpose_matmul() {
        let mut rng = Rng::new(13);
        let a = random(vec![7, 3], &mut rng);
        let b = random(vec![7, 4], &mut rng);
        let mut out = Tensor::zeros(vec![3, 4]);
        mm_tn_acc(out.data_mut(), a.data(), b.data(), 7, 3, 4);
        let want = a.transpose2().matmul(&b).unwrap();
        for (g, w) in out.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 5]);
        assert!(a.matmul(&b).is_err());
    }
}
