//! Dense row-major tensors and the scalar element trait.
//!
//! Training runs in `f32`; gradient-check suites instantiate the same code
//! with `f64` to tighten finite-difference tolerances.

use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type for all tensor math: `f32` or `f64`.
pub trait Element:
    Float + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor: explicit dims, row-major data.
///
/// A rank-0 tensor (`dims == []`) holds exactly one element and is used for
/// scalar losses. The constructor enforces `product(dims) == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    dims: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn scalar(x: E) -> Self {
        Tensor {
            dims: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<E>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// The single element of a rank-0 (or one-element) tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1, "item() on a {}-element tensor", self.data.len());
        self.data[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[E] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.dims[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.dims[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// Reinterpret the same data under new dims.
    pub fn reshaped(&self, dims: Vec<usize>) -> Result<Self> {
        Self::from_vec(dims, self.data.clone())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> E {
        self.data
            .iter()
            .fold(E::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Lossy cast between element types (f32 <-> f64).
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Cosine similarity `u.v / (|u||v|)` of two same-shape tensors.
///
/// Zero-norm inputs are a degenerate-input error, never silently zero.
pub fn cosine<E: Element>(u: &Tensor<E>, v: &Tensor<E>) -> Result<E> {
    if u.dims() != v.dims() {
        return Err(Error::shape(format!(
            "cosine: dims {:?} vs {:?}",
            u.dims(),
            v.dims()
        )));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == E::zero() || nv == E::zero() {
        return Err(Error::numeric("cosine: zero-norm input".to_string()));
    }
    let dot = u
        .data()
        .iter()
        .zip(v.data())
        .fold(E::zero(), |acc, (&a, &b)| acc + a * b);
    Ok(dot / (nu * nv))
}

/// Numerically stable softmax over a rank-1 tensor (max-subtraction).
pub fn softmax<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if !x.all_finite() {
        return Err(Error::numeric("softmax: non-finite input".to_string()));
    }
    Ok(Tensor {
        dims: x.dims().to_vec(),
        data: softmax_slice(x.data()),
    })
}

/// Softmax of a raw slice with max-subtraction.
pub fn softmax_slice<E: Element>(x: &[E]) -> Vec<E> {
    let max = x.iter().cloned().fold(E::neg_infinity(), E::max);
    let exps: Vec<E> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(E::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// GELU activation, tanh approximation:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<E: Element>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    half * x * (E::one() + (c * (x + k * x * x * x)).tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_grad<E: Element>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654);
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * k * x * x)
}

// Raw row-major matrix kernels. `a` is [m,k] throughout.

/// `c[m,n] = a[m,k] . b[k,n]`
pub fn mm_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_ip * b_row[j];
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] . b[n,k]^T` (dot products of rows; cache-friendly).
pub fn mm_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = E::zero();
            for p in 0..k {
                s = s + a_row[p] * b_row[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T . b[m,n]`
pub fn mm_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == E::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_ip * b_row[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f32; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f32; 5]).is_err());
        // rank-0 scalar holds exactly one element
        let s = Tensor::scalar(1.5f32);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item(), 1.5);
    }

    #[test]
    fn cosine_identity_and_orthogonal() {
        let u = Tensor::vector(vec![1.0f64, 0.0]);
        let v = Tensor::vector(vec![0.0f64, 1.0]);
        assert_relative_eq!(cosine(&u, &u).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(cosine(&u, &v).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_hand_value() {
        // 32 / (sqrt(14) * sqrt(77))
        let u = Tensor::vector(vec![1.0f64, 2.0, 3.0]);
        let v = Tensor::vector(vec![4.0f64, 5.0, 6.0]);
        let expect = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        assert_relative_eq!(cosine(&u, &v).unwrap(), expect, epsilon = 1e-12);
        assert_relative_eq!(cosine(&u, &v).unwrap(), 0.9746318, epsilon = 1e-7);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        let u = Tensor::vector(vec![0.0f64, 0.0]);
        let v = Tensor::vector(vec![1.0f64, 0.0]);
        assert!(cosine(&u, &v).is_err());
    }

    #[test]
    fn cosine_symmetry() {
        let u = Tensor::vector(vec![0.3f64, -1.2, 0.7]);
        let v = Tensor::vector(vec![2.0f64, 0.1, -0.4]);
        assert_relative_eq!(
            cosine(&u, &v).unwrap(),
            cosine(&v, &u).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn softmax_symmetry_and_hand_value() {
        let s = softmax(&Tensor::vector(vec![0.0f64, 0.0, 0.0])).unwrap();
        for &p in s.data() {
            assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
        let s = softmax(&Tensor::vector(vec![1.0f64, 2.0])).unwrap();
        assert_relative_eq!(s.data()[0], 0.2689414, epsilon = 1e-7);
        assert_relative_eq!(s.data()[1], 0.7310586, epsilon = 1e-7);
    }

    #[test]
    fn softmax_large_input_is_stable() {
        let s = softmax(&Tensor::vector(vec![1000.0f32, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);
        assert!(s.all_finite());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        // large positive x asymptotes to x
        assert_relative_eq!(gelu(20.0f64), 20.0, epsilon = 1e-9);
        // frozen from evaluating the tanh-approximation formula directly
        assert_relative_eq!(gelu(1.0f64), 0.8411920, epsilon = 1e-7);
    }

    #[test]
    fn gelu_monotone_on_tested_range() {
        // nondecreasing right of the dip at x ~ -0.75
        let mut prev = gelu(-0.7f64);
        let mut x = -0.7f64;
        while x < 5.0 {
            x += 0.01;
            let y = gelu(x);
            assert!(y >= prev - 1e-12, "gelu not nondecreasing at {x}");
            prev = y;
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6f64;
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.0, 4.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_relative_eq!(gelu_grad(x), fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn matmul_kernels_agree() {
        // a: 2x3, b: 3x2
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = mm_nn(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // b_t: 2x3 (transpose of b); mm_nt must agree with mm_nn
        let b_t = vec![7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(mm_nt(&a, &b_t, 2, 3, 2), c);

        // a_t: 3x2 (transpose of a); mm_tn must agree
        let a_t = vec![1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(mm_tn(&a_t, &b, 3, 2, 2), c);
    }
}
