//! Shared numeric kernels.
//!
//! Storage and elementwise compute are f32; reductions (dot products, softmax
//! sums, normalization statistics) accumulate in f64 so that central-difference
//! gradient checks stay within tolerance. The frozen backbone and the autodiff
//! graph both call into these kernels, so forward semantics cannot drift
//! between the two paths.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const GELU_COEF: f64 = 0.044_715;

/// Raw 2-D product: a[m,k] * b[k,n] -> out[m,n], f64 accumulation.
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (j, &bpj) in brow.iter().enumerate() {
                acc[j] += aip * bpj as f64;
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f32;
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Softmax along `axis` with max-subtraction, sums accumulated in f64.
pub(crate) fn softmax_raw(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0f64;
            for a in 0..len {
                let e = ((x[base + a * inner] - max) as f64).exp();
                out[base + a * inner] = e as f32;
                sum += e;
            }
            let inv = 1.0 / sum;
            for a in 0..len {
                let idx = base + a * inner;
                out[idx] = ((out[idx] as f64) * inv) as f32;
            }
        }
    }
    out
}

/// Per-row mean and 1/sqrt(var + eps) over the last axis, f64 statistics.
pub(crate) fn layer_norm_stats(x: &[f32], width: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut means = Vec::with_capacity(rows);
    let mut inv_stds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / width as f64;
        means.push(mean);
        inv_stds.push(1.0 / (var + eps).sqrt());
    }
    (means, inv_stds)
}

pub(crate) fn layer_norm_raw(x: &[f32], gain: &[f32], bias: &[f32], eps: f64) -> Vec<f32> {
    let width = gain.len();
    let (means, inv_stds) = layer_norm_stats(x, width, eps);
    let mut out = vec![0.0f32; x.len()];
    for r in 0..x.len() / width {
        for c in 0..width {
            let idx = r * width + c;
            let xh = (x[idx] as f64 - means[r]) * inv_stds[r];
            out[idx] = (xh * gain[c] as f64 + bias[c] as f64) as f32;
        }
    }
    out
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ── Checked tensor-level wrappers ───────────────────────────────────────────

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape(format!(
            "matmul expects rank-2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Range(format!(
            "softmax axis {axis} invalid for shape {:?}",
            x.shape()
        )));
    }
    Tensor::new(x.shape().to_vec(), softmax_raw(x.data(), x.shape(), axis))
}

/// Zero-mean unit-variance normalization over the last axis, then affine.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::InvalidParam(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let width = *x.shape().last().unwrap();
    if gain.shape() != [width] || bias.shape() != [width] {
        return Err(Error::Shape(format!(
            "layer_norm gain/bias must have shape [{width}], got {:?} / {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    Tensor::new(
        x.shape().to_vec(),
        layer_norm_raw(x.data(), gain.data(), bias.data(), eps),
    )
}

/// GELU with the tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v as f64) as f32).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Elementwise sum of same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Broadcast-add a vector over the rows of a rank-2 tensor.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let width = *a.shape().last().unwrap();
    if bias.shape() != [width] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match row width {width}",
            bias.shape()
        )));
    }
    let mut data = a.data().to_vec();
    for row in data.chunks_mut(width) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale(a: &Tensor, c: f32) -> Tensor {
    let data = a.data().iter().map(|&v| v * c).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity_exact() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::eye(2);
        assert!(matmul(&i, &a).unwrap().bits_eq(&a));
        assert!(matmul(&a, &i).unwrap().bits_eq(&a));
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(42);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        // Independent entry-by-entry oracle.
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for p in 0..7 {
                    s += a.at(&[i, p]) as f64 * b.at(&[p, j]) as f64;
                }
                assert!(
                    (c.at(&[i, j]) as f64 - s).abs() < 1e-6,
                    "mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn softmax_uniform_input() {
        let x = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_logits_no_overflow() {
        let x = Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-7);
        assert!((s.data()[1] - 0.5).abs() < 1e-7);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 3] -> [1/4, 3/4]
        let x = Tensor::new(vec![2], vec![0.0, 3.0f32.ln()]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_invalid_axis() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(softmax(&x, 2), Err(Error::Range(_))));
    }

    #[test]
    fn layer_norm_constant_input_maps_to_zero() {
        let x = Tensor::full(&[4], 3.0);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5);
        assert!((y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_random_statistics() {
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[64], 2.5, &mut rng);
        let g = Tensor::full(&[64], 1.0);
        let b = Tensor::zeros(&[64]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let mean: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let var: f64 = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let x = Tensor::zeros(&[4]);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(
            layer_norm(&x, &g, &b, 0.0),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_192).abs() < 1e-4);
        assert!((y.data()[2] + 0.158_808).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            len in 1usize..9,
            outer in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = Rng::new(seed);
            let x = Tensor::randn(&[outer, len], 5.0, &mut rng);
            let s = softmax(&x, 1).unwrap();
            for o in 0..outer {
                let sum: f64 = (0..len).map(|i| s.at(&[o, i]) as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                for i in 0..len {
                    let v = s.at(&[o, i]);
                    prop_assert!(v > 0.0 && v < 1.0 + 1e-6);
                }
            }
        }

        #[test]
        fn matmul_identity_roundtrip(n in 1usize..6, seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let a = Tensor::randn(&[n, n], 1.0, &mut rng);
            let i = Tensor::eye(n);
            prop_assert!(matmul(&i, &a).unwrap().bits_eq(&a));
            prop_assert!(matmul(&a, &i).unwrap().bits_eq(&a));
        }
    }
}
