//! Dense row-major tensors and the raw kernels the tape is built on.
//!
//! Every kernel sums in a fixed row-major order so that two runs over the
//! same inputs agree bitwise.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Norms at or below this value normalize to the zero vector.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Number of trailing-axis rows, treating a 1-D tensor as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Geometry of a stride-1, zero-padded 2-D convolution over an HWC image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn infer<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>, bias: &Tensor<S>) -> Result<Self> {
        let (is, ks, bs) = (input.shape(), kernel.shape(), bias.shape());
        if is.len() != 3 {
            return Err(shape_err!("conv2d input must be (h, w, c_in), got {:?}", is));
        }
        if ks.len() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0 {
            return Err(shape_err!(
                "conv2d kernel must be (k, k, c_in, c_out) with odd k, got {:?}",
                ks
            ));
        }
        if ks[2] != is[2] {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                is[2],
                ks[2]
            ));
        }
        if bs != [ks[3]] {
            return Err(shape_err!("conv2d bias must be ({}), got {:?}", ks[3], bs));
        }
        Ok(Self {
            h: is[0],
            w: is[1],
            c_in: is[2],
            c_out: ks[3],
            k: ks[0],
        })
    }
}

/// Output channels handled per register block.
const LANES: usize = 8;

/// Input pixel read by output `(y, x)` at tap `(ky, kx)`, if inside.
#[inline]
fn tap_source(y: usize, x: usize, ky: usize, kx: usize, pad: usize, h: usize, w: usize) -> Option<usize> {
    let (iy, ix) = (y + ky, x + kx);
    if iy < pad || ix < pad || iy - pad >= h || ix - pad >= w {
        None
    } else {
        Some((iy - pad) * w + ix - pad)
    }
}

/// Output coordinates `y` for which `y + t - pad` lies in `0..n`.
#[inline]
fn valid_span(t: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(t);
    let hi = (n + pad).saturating_sub(t).min(n);
    (lo, hi.max(lo))
}

/// `acc[j] += v * row[j]` over one block of up to `LANES` channels.
#[inline(always)]
fn axpy_block<S: Scalar>(acc: &mut [S; LANES], v: S, row: &[S]) {
    if row.len() == LANES {
        for j in 0..LANES {
            acc[j] += v * row[j];
        }
    } else {
        for (a, &r) in acc.iter_mut().zip(row) {
            *a += v * r;
        }
    }
}

pub fn conv2d_forward<S: Scalar>(g: ConvGeom, input: &[S], kernel: &[S], bias: &[S]) -> Vec<S> {
    let ConvGeom { h, w, c_in, c_out, k } = g;
    let pad = k / 2;
    let mut out = vec![S::zero(); h * w * c_out];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * c_out..(y * w + x + 1) * c_out];
            for c0 in (0..c_out).step_by(LANES) {
                let c1 = (c0 + LANES).min(c_out);
                let mut acc = [S::zero(); LANES];
                acc[..c1 - c0].copy_from_slice(&bias[c0..c1]);
                for ky in 0..k {
                    for kx in 0..k {
                        let Some(p) = tap_source(y, x, ky, kx, pad, h, w) else { continue };
                        let px = &input[p * c_in..(p + 1) * c_in];
                        let kbase = (ky * k + kx) * c_in * c_out;
                        for (ci, &v) in px.iter().enumerate() {
                            let off = kbase + ci * c_out;
                            axpy_block(&mut acc, v, &kernel[off + c0..off + c1]);
                        }
                    }
                }
                o[c0..c1].copy_from_slice(&acc[..c1 - c0]);
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients for `conv2d_forward`.
/// Any of the gradient buffers may be skipped by passing `None`.
pub fn conv2d_backward<S: Scalar>(
    g: ConvGeom,
    input: &[S],
    kernel: &[S],
    dout: &[S],
    dinput: Option<&mut [S]>,
    dkernel: Option<&mut [S]>,
    dbias: Option<&mut [S]>,
) {
    let ConvGeom { h, w, c_in, c_out, k } = g;
    let pad = k / 2;
    if let Some(db) = dbias {
        for p in 0..h * w {
            for (acc, &v) in db.iter_mut().zip(&dout[p * c_out..(p + 1) * c_out]) {
                *acc += v;
            }
        }
    }
    if let Some(dk) = dkernel {
        for ky in 0..k {
            let (y0, y1) = valid_span(ky, pad, h);
            for kx in 0..k {
                let (x0, x1) = valid_span(kx, pad, w);
                let kbase = (ky * k + kx) * c_in * c_out;
                for ci in 0..c_in {
                    let off = kbase + ci * c_out;
                    for c0 in (0..c_out).step_by(LANES) {
                        let c1 = (c0 + LANES).min(c_out);
                        let mut acc = [S::zero(); LANES];
                        acc[..c1 - c0].copy_from_slice(&dk[off + c0..off + c1]);
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            for x in x0..x1 {
                                let p = iy * w + x + kx - pad;
                                let q = (y * w + x) * c_out;
                                axpy_block(&mut acc, input[p * c_in + ci], &dout[q + c0..q + c1]);
                            }
                        }
                        dk[off + c0..off + c1].copy_from_slice(&acc[..c1 - c0]);
                    }
                }
            }
        }
    }
    if let Some(di) = dinput {
        // (k, k, c_out, c_in) copy so the update runs along c_in
        let mut kt = vec![S::zero(); kernel.len()];
        for tap in 0..k * k {
            for ci in 0..c_in {
                for co in 0..c_out {
                    kt[(tap * c_out + co) * c_in + ci] = kernel[(tap * c_in + ci) * c_out + co];
                }
            }
        }
        // input pixel (iy, ix) feeds output (iy + pad - ky, ix + pad - kx)
        for iy in 0..h {
            for ix in 0..w {
                let pbase = (iy * w + ix) * c_in;
                for c0 in (0..c_in).step_by(LANES) {
                    let c1 = (c0 + LANES).min(c_in);
                    let mut acc = [S::zero(); LANES];
                    acc[..c1 - c0].copy_from_slice(&di[pbase + c0..pbase + c1]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let (oy, ox) = (iy + pad, ix + pad);
                            if oy < ky || ox < kx || oy - ky >= h || ox - kx >= w {
                                continue;
                            }
                            let q = ((oy - ky) * w + ox - kx) * c_out;
                            let tbase = (ky * k + kx) * c_out * c_in;
                            for (co, &dv) in dout[q..q + c_out].iter().enumerate() {
                                let off = tbase + co * c_in;
                                axpy_block(&mut acc, dv, &kt[off + c0..off + c1]);
                            }
                        }
                    }
                    di[pbase + c0..pbase + c1].copy_from_slice(&acc[..c1 - c0]);
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn norm<S: Scalar>(v: &[S]) -> S {
    let mut s = S::zero();
    for &x in v {
        s += x * x;
    }
    s.sqrt()
}

/// Unit vector in the direction of `v`, or the zero vector when the norm is
/// at most [`NORM_EPS`].
pub fn l2_normalize<S: Scalar>(v: &[S]) -> Vec<S> {
    let n = norm(v);
    if n <= S::of(NORM_EPS) {
        vec![S::zero(); v.len()]
    } else {
        v.iter().map(|&x| x / n).collect()
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn conv_single_pixel_hand_value() {
        let input = Tensor::<f64>::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let bias = Tensor::vector(vec![1.0]);
        let g = ConvGeom::infer(&input, &kernel, &bias).unwrap();
        assert_eq!(conv2d_forward(g, input.data(), kernel.data(), bias.data()), vec![7.0]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let input = Tensor::<f64>::zeros(vec![4, 4, 2]);
        let even = Tensor::zeros(vec![2, 2, 2, 1]);
        let bias = Tensor::zeros(vec![1]);
        assert!(ConvGeom::infer(&input, &even, &bias).is_err());
        let wrong_c = Tensor::zeros(vec![3, 3, 3, 1]);
        assert!(ConvGeom::infer(&input, &wrong_c, &bias).is_err());
    }

    #[test]
    fn normalize_three_four_five() {
        let n = l2_normalize(&[3.0f64, 4.0]);
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1e-9f64, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }
}
