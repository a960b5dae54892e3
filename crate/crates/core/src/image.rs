//! Images, label masks and per-pixel feature maps.

use std::collections::BTreeSet;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// "Do not care" label, excluded from losses and metrics.
pub const IGNORE: u8 = 255;

pub const MIN_SIDE: usize = 8;

/// RGB image in HWC layout with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    h: usize,
    w: usize,
    data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn new(h: usize, w: usize, data: Vec<S>) -> Result<Self> {
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(shape_err!("image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"));
        }
        if data.len() != h * w * 3 {
            return Err(shape_err!("{h}x{w} RGB image needs {} values, got {}", h * w * 3, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= S::zero() && **v <= S::one())) {
            return Err(Error::Range(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![self.h, self.w, 3], self.data.clone()).expect("validated at construction")
    }

    pub fn cast<T: Scalar>(&self) -> Image<T> {
        Image {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
        }
    }
}

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(shape_err!("{h}x{w} mask needs {} labels, got {}", h * w, labels.len()));
        }
        Ok(Self { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        Self {
            h,
            w,
            labels: vec![class; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.labels.contains(&class)
    }

    /// Distinct non-ignore ids present.
    pub fn classes(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().filter(|&l| l != IGNORE).collect()
    }

    /// Copy with every label outside `keep` replaced by the ignore label.
    pub fn restricted_to(&self, keep: &BTreeSet<u8>) -> LabelMask {
        LabelMask {
            h: self.h,
            w: self.w,
            labels: self
                .labels
                .iter()
                .map(|l| if keep.contains(l) { *l } else { IGNORE })
                .collect(),
        }
    }
}

/// Backbone output: an `(h, w, c)` embedding per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S> {
    tensor: Tensor<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(shape_err!("feature map must be (h, w, c), got {:?}", tensor.shape()));
        }
        Ok(Self { tensor })
    }

    pub fn from_rows(h: usize, w: usize, c: usize, data: Vec<S>) -> Result<Self> {
        Self::new(Tensor::new(vec![h, w, c], data)?)
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn pixel(&self, p: usize) -> &[S] {
        self.tensor.row(p)
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.tensor
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_validation() {
        assert!(Image::<f64>::new(4, 8, vec![0.0; 96]).is_err());
        assert!(Image::<f64>::new(8, 8, vec![1.5; 192]).is_err());
        assert!(Image::<f64>::new(8, 8, vec![0.5; 192]).is_ok());
    }

    #[test]
    fn mask_helpers() {
        let m = LabelMask::new(2, 2, vec![0, 3, IGNORE, 3]).unwrap();
        assert_eq!(m.count(3), 2);
        assert_eq!(m.classes().into_iter().collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(m.binary(3), vec![false, true, false, true]);
        let keep = [0u8].into_iter().collect();
        assert_eq!(m.restricted_to(&keep).labels(), &[0, IGNORE, IGNORE, IGNORE]);
    }
}
