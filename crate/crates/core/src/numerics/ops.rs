//! Forward kernels shared by the tape and by callers that need plain values.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tensor::{gemm_acc, Scalar, Tensor};
use crate::error::TensorError;

/// Epsilon added to the variance inside every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-6;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, k) = a.dims2("matmul")?;
    let (k2, m) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); n * m];
    gemm_acc(a.data(), b.data(), &mut out, n, k, m);
    Tensor::new(vec![n, m], out)
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(
    shape: &[usize],
    axis: usize,
    op: &'static str,
) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Normalized values and per-lane inverse standard deviations, before any affine.
pub(crate) struct Normalized<T: Scalar> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn standardize_along<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    eps: f64,
    op: &'static str,
) -> Result<Normalized<T>, TensorError> {
    let (outer, n, inner) = axis_split(x.shape(), axis, op)?;
    if n == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "cannot normalize over a zero-length axis".into(),
        });
    }
    let src = x.data();
    let mut xhat = vec![T::zero(); src.len()];
    let mut inv_std = Vec::with_capacity(outer * inner);
    let nf = T::c(n as f64);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mean = (0..n).fold(T::zero(), |acc, j| acc + src[at(j)]) / nf;
            let var = (0..n).fold(T::zero(), |acc, j| {
                let d = src[at(j)] - mean;
                acc + d * d
            }) / nf;
            let inv = T::one() / (var + T::c(eps)).sqrt();
            for j in 0..n {
                xhat[at(j)] = (src[at(j)] - mean) * inv;
            }
            inv_std.push(inv);
        }
    }
    Ok(Normalized { xhat, inv_std })
}

fn check_affine<T: Scalar>(
    p: Option<&Tensor<T>>,
    n: usize,
    what: &str,
) -> Result<(), TensorError> {
    if let Some(p) = p {
        if p.numel() != n {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("{what} has {} elements, normalized extent is {n}", p.numel()),
            });
        }
    }
    Ok(())
}

pub(crate) fn apply_affine<T: Scalar>(
    xhat: &[T],
    shape: &[usize],
    axis: usize,
    gain: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis, "layer_norm").expect("checked axis");
    let mut out = xhat.to_vec();
    if gain.is_none() && bias.is_none() {
        return out;
    }
    for o in 0..outer {
        for j in 0..n {
            let g = gain.map_or(T::one(), |g| g.data()[j]);
            let b = bias.map_or(T::zero(), |b| b.data()[j]);
            let base = o * n * inner + j * inner;
            for v in &mut out[base..base + inner] {
                *v = *v * g + b;
            }
        }
    }
    out
}

/// Zero mean and unit variance along `axis`, with no affine.
pub fn standardize<T: Scalar>(x: &Tensor<T>, axis: usize, eps: f64) -> Result<Tensor<T>, TensorError> {
    let n = standardize_along(x, axis, eps, "standardize")?;
    Tensor::new(x.shape().to_vec(), n.xhat)
}

/// Layer normalization along `axis` with optional per-channel gain and bias.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    gain: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>, TensorError> {
    let (_, n, _) = axis_split(x.shape(), axis, "layer_norm")?;
    check_affine(gain, n, "gain")?;
    check_affine(bias, n, "bias")?;
    let norm = standardize_along(x, axis, LAYER_NORM_EPS, "layer_norm")?;
    Tensor::new(
        x.shape().to_vec(),
        apply_affine(&norm.xhat, x.shape(), axis, gain, bias),
    )
}

#[inline]
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)` with the Gaussian CDF from `erf`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let v = v.f64();
        T::c(v * normal_cdf(v))
    })
}

/// Softmax along `axis`, stabilized by subtracting the lane maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    let (outer, n, inner) = axis_split(x.shape(), axis, "softmax")?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).fold(T::neg_infinity(), |m, j| m.max(src[at(j)]));
            let mut total = T::zero();
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// In-place row softmax over a contiguous slice.
pub(crate) fn softmax_slice<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, k) = a.dims2("").unwrap();
        let (_, m) = b.dims2("").unwrap();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a.get(&[i, p]) * b.get(&[p, j]);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&id, &b).unwrap().data(), b.data());
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&Tensor::<f64>::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3]));
        assert!(matches!(err, Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (n, k, m) = (
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            );
            let a = Tensor::from_fn(vec![n, k], |_| rng.random_range(-1.0..1.0));
            let b = Tensor::from_fn(vec![k, m], |_| rng.random_range(-1.0..1.0));
            let got = matmul(&a, &b).unwrap();
            for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let c = layer_norm(&t(&[4], &[5.0; 4]), 0, None, None).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let r = layer_norm(&t(&[2], &[1.0, 3.0]), 0, None, None).unwrap();
        // variance 1 plus eps
        let s = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((r.data()[0] + s).abs() < 1e-15 && (r.data()[1] - s).abs() < 1e-15);
        assert!((r.data()[1] - 1.0).abs() < 1e-6);
        assert!(layer_norm(&Tensor::<f64>::zeros(vec![3, 0]), 1, None, None).is_err());
        assert!(layer_norm(&Tensor::<f64>::zeros(vec![3, 2]), 2, None, None).is_err());
    }

    #[test]
    fn layer_norm_along_inner_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(vec![3, 5, 4], |_| rng.random_range(-3.0..3.0));
        let y = layer_norm(&x, 1, None, None).unwrap();
        for o in 0..3 {
            for i in 0..4 {
                let lane: Vec<f64> = (0..5).map(|j| y.get(&[o, j, i])).collect();
                let mean = lane.iter().sum::<f64>() / 5.0;
                let var = lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
                assert!(mean.abs() < 1e-9);
                assert!((var - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gelu_values() {
        let y = gelu(&t(&[3], &[0.0, 10.0, 1.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!((y.data()[2] - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_values() {
        let y = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[1000.0, 1000.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(vec![4, 6], |_| rng.random_range(-20.0..20.0));
        let y = softmax(&x, 0).unwrap();
        for c in 0..6 {
            let s: f64 = (0..4).map(|r| y.get(&[r, c])).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
