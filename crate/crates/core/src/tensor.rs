//! Dense row-major tensors.
//!
//! Shapes are dynamic. Only the layouts the micro-transformer needs are
//! supported; there is no general broadcasting.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: E) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = E::one();
        }
        t
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                E::of_f64(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
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
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: E) {
        for v in self.data.iter_mut() {
            *v = *v * s;
        }
    }

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    ///
    /// Returns the number of multiply-adds performed alongside the result so
    /// callers can feed the FLOPs ledger.
    pub fn matmul(&self, other: &Self) -> Result<(Self, u64)> {
        let (m, k) = as_2d(&self.shape, "matmul lhs")?;
        let (k2, n) = as_2d(&other.shape, "matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul inner dims",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![E::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n, false);
        Ok((
            Self {
                shape: vec![m, n],
                data: out,
            },
            (m * k * n) as u64,
        ))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&self, other: &Self) -> Result<(Self, u64)> {
        let (m, k) = as_2d(&self.shape, "matmul_nt lhs")?;
        let (n, k2) = as_2d(&other.shape, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul_nt inner dims",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![E::zero(); m * n];
        matmul_nt_into(&self.data, &other.data, &mut out, m, k, n);
        Ok((
            Self {
                shape: vec![m, n],
                data: out,
            },
            (m * k * n) as u64,
        ))
    }

    /// `[m,k]^T x [m,n] -> [k,n]` (used by backward rules).
    pub fn matmul_tn(&self, other: &Self) -> Result<(Self, u64)> {
        let (m, k) = as_2d(&self.shape, "matmul_tn lhs")?;
        let (m2, n) = as_2d(&other.shape, "matmul_tn rhs")?;
        if m != m2 {
            return Err(Error::ShapeMismatch {
                context: "matmul_tn inner dims",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![E::zero(); k * n];
        matmul_tn_into(&self.data, &other.data, &mut out, m, k, n);
        Ok((
            Self {
                shape: vec![k, n],
                data: out,
            },
            (m * k * n) as u64,
        ))
    }

    pub fn transposed_2d(&self) -> Result<Self> {
        let (m, n) = as_2d(&self.shape, "transpose")?;
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }
}

fn as_2d(shape: &[usize], context: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "{context}: expected 2-d tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// `out += a x b` (or `out = a x b` when `accumulate` is false), ikj order.
pub(crate) fn matmul_into<E: Scalar>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    if !accumulate {
        out.fill(E::zero());
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

pub(crate) fn matmul_nt_into<E: Scalar>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for kk in 0..k {
                acc = acc + arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
}

pub(crate) fn matmul_tn_into<E: Scalar>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
) {
    out.fill(E::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (p, macs) = a.matmul(&Tensor::eye(2)).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(macs, 8);
    }

    #[test]
    fn matmul_outer_product() {
        // [[2],[0]] (2x1) x [[1,0]] (1x2) -> [[2,0],[0,0]]
        let a = Tensor::<f64>::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let b = Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let (p, _) = a.matmul(&b).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        assert_eq!(p.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_mismatched_inner_dims() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "error should name both shapes: {msg}");
    }

    #[test]
    fn transpose_variants_agree() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::new(vec![3, 2], vec![7.0, 8.0, 9.0, 1.0, 2.0, 3.0]).unwrap();
        let (ab, _) = a.matmul(&b).unwrap();
        let (ab_nt, _) = a.matmul_nt(&b.transposed_2d().unwrap()).unwrap();
        assert_eq!(ab, ab_nt);
        let (ab_tn, _) = a
            .transposed_2d()
            .unwrap()
            .matmul_tn(&b)
            .unwrap();
        assert_eq!(ab, ab_tn);
    }
}
