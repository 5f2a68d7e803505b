//! Dense row-major tensors and the plain (non-differentiated) numeric helpers.
//!
//! `Tensor` is the sole numeric currency of the crate: a shape plus a flat
//! `Vec<f64>` in row-major order. Differentiable operations live on the
//! [`crate::tape::GradTape`]; everything here is value-level.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Epsilon added to cosine-similarity denominators; zero vectors score 0.
pub const EPS_COS: f64 = 1e-8;
/// Masks whose weight sums below this are treated as empty.
pub const EPS_MASK: f64 = 1e-6;
/// Probabilities are clamped to [EPS_BCE, 1-EPS_BCE] inside the BCE loss.
pub const EPS_BCE: f64 = 1e-7;

/// Dense multi-dimensional array, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Build from shape and data. Panics if the element count disagrees;
    /// that is a programming error, not an input error.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false }
    }

    /// Checked construction: rejects NaN/Inf values. Use at I/O and
    /// user-input boundaries.
    pub fn try_new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} vs {} elements", shape, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor of shape {shape:?}")));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// (C, H, W) of a rank-3 tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.rank(), 3, "expected rank 3, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// (H, W) of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "expected rank 2, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max |a - b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// He-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// Cosine similarity with the epsilon rule: a.b / (|a||b| + EPS_COS).
/// Zero (or near-zero) vectors score exactly 0 against anything.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt() + EPS_COS)
}

/// Min-max normalize a map to [0,1]. A (near-)constant map becomes all
/// zeros: a flat prior carries no information.
pub fn minmax_norm(t: &Tensor) -> Tensor {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &t.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi - lo).is_finite() || hi - lo < EPS_COS {
        return Tensor::zeros(t.shape.clone());
    }
    let denom = hi - lo + EPS_COS;
    let data = t.data.iter().map(|v| (v - lo) / denom).collect();
    Tensor::new(t.shape.clone(), data)
}

pub fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn spatial_dims(t: &Tensor) -> (usize, usize, usize) {
    match t.rank() {
        2 => (1, t.shape[0], t.shape[1]),
        3 => (t.shape[0], t.shape[1], t.shape[2]),
        r => panic!("resize expects rank 2 or 3, got {r}"),
    }
}

fn with_spatial(t: &Tensor, h: usize, w: usize, data: Vec<f64>) -> Tensor {
    match t.rank() {
        2 => Tensor::new(vec![h, w], data),
        _ => Tensor::new(vec![t.shape[0], h, w], data),
    }
}

/// Nearest-neighbor resize of the trailing two axes. src(i) = floor(i*H/H').
pub fn resize_nearest(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    assert!(oh >= 1 && ow >= 1);
    let (c, h, w) = spatial_dims(t);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            let si = i * h / oh;
            for j in 0..ow {
                let sj = j * w / ow;
                out[(ch * oh + i) * ow + j] = t.data[(ch * h + si) * w + sj];
            }
        }
    }
    with_spatial(t, oh, ow, out)
}

/// Source coordinate and lerp weights for bilinear resize (half-pixel
/// centers, clamped at the borders).
pub(crate) fn bilinear_taps(i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize of the trailing two axes.
pub fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    assert!(oh >= 1 && ow >= 1);
    let (c, h, w) = spatial_dims(t);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &t.data[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let (i0, i1, fi) = bilinear_taps(i, oh, h);
            for j in 0..ow {
                let (j0, j1, fj) = bilinear_taps(j, ow, w);
                let top = plane[i0 * w + j0] * (1.0 - fj) + plane[i0 * w + j1] * fj;
                let bot = plane[i1 * w + j0] * (1.0 - fj) + plane[i1 * w + j1] * fj;
                out[(ch * oh + i) * ow + j] = top * (1.0 - fi) + bot * fi;
            }
        }
    }
    with_spatial(t, oh, ow, out)
}
