//! Dense 64-bit tensors in row-major order.
//!
//! Image-like data uses the (batch, channels, height, width) axis order.

use rand::Rng;

use crate::error::{Result, RfpmError};

/// Dense N-dimensional array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Creates a tensor from a shape and a flat row-major value list.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(RfpmError::Shape(format!(
                "shape entries must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(RfpmError::Size {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform values in `[-bound, bound]` drawn from `rng`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Self {
            shape: shape.to_vec(),
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interprets the tensor as (B, C, H, W).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            other => Err(RfpmError::Shape(format!(
                "expected a 4-d tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, ch, h, w) = (
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
        );
        self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn set4(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let (ch, h, w) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * ch + c) * h + y) * w + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// 2x2 average pooling on a plain (B,C,H,W) tensor. H and W must be even.
pub fn avg_pool2x2(t: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(RfpmError::Shape(format!(
            "avg_pool2x2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let s = t.at4(bi, ci, 2 * oy, 2 * ox)
                        + t.at4(bi, ci, 2 * oy, 2 * ox + 1)
                        + t.at4(bi, ci, 2 * oy + 1, 2 * ox)
                        + t.at4(bi, ci, 2 * oy + 1, 2 * ox + 1);
                    out.set4(bi, ci, oy, ox, s * 0.25);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_indexing() {
        let t = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at4(0, 0, 1, 1), 4.0);
    }

    #[test]
    fn new_size_mismatch() {
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, RfpmError::Size { expected: 6, got: 5 }));
    }

    #[test]
    fn new_scalar_like() {
        let t = Tensor::new(&[1], vec![0.0]).unwrap();
        assert_eq!(t.numel(), 1);
    }

    #[test]
    fn new_rejects_zero_dim() {
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn new_owns_data() {
        let src = vec![1.0, 2.0];
        let t = Tensor::new(&[2], src.clone()).unwrap();
        drop(src);
        assert_eq!(t.data(), &[1.0, 2.0]);
    }

    #[test]
    fn avg_pool_halves_constant() {
        let t = Tensor::full(&[1, 1, 4, 4], 3.0);
        let p = avg_pool2x2(&t).unwrap();
        assert_eq!(p.shape(), &[1, 1, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn avg_pool_rejects_odd() {
        let t = Tensor::zeros(&[1, 1, 3, 4]);
        assert!(matches!(avg_pool2x2(&t), Err(RfpmError::Shape(_))));
    }
}
