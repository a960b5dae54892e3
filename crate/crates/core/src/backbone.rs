//! Per-pixel feature extractor: a stack of 3x3 stride-1 zero-padded
//! convolutions with ReLU between layers (none after the last).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::image::{FeatureMap, Image};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{self, ConvGeom, Tensor};

pub const KERNEL: usize = 3;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S> {
    /// `(k, k, c_in, c_out)`
    pub kernel: Tensor<S>,
    /// `(c_out)`
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<S> {
    layers: Vec<ConvLayer<S>>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub kernel: Var,
    pub bias: Var,
}

impl<S: Scalar> Backbone<S> {
    /// Uniform `[-s, s]` initialization with `s = sqrt(1 / fan_in)`.
    pub fn init(embed_dim: usize, layers: usize, seed: u64) -> Result<Self> {
        if embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be >= 2, got {embed_dim}")));
        }
        if layers < 1 {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(layers);
        let mut c_in = INPUT_CHANNELS;
        for _ in 0..layers {
            let fan_in = (KERNEL * KERNEL * c_in) as f64;
            let s = (1.0 / fan_in).sqrt();
            let kn = KERNEL * KERNEL * c_in * embed_dim;
            let kernel = (0..kn).map(|_| S::of(rng.gen_range(-s..=s))).collect();
            let bias = (0..embed_dim).map(|_| S::of(rng.gen_range(-s..=s))).collect();
            out.push(ConvLayer {
                kernel: Tensor::new(vec![KERNEL, KERNEL, c_in, embed_dim], kernel)?,
                bias: Tensor::vector(bias),
            });
            c_in = embed_dim;
        }
        Ok(Self { layers: out })
    }

    pub fn from_layers(layers: Vec<ConvLayer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        let mut c_in = layers[0].kernel.shape().get(2).copied().unwrap_or(0);
        for (i, l) in layers.iter().enumerate() {
            let ks = l.kernel.shape();
            if ks.len() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0 || ks[2] != c_in || l.bias.shape() != [ks[3]] {
                return Err(shape_err!(
                    "layer {i}: kernel {:?} / bias {:?} incompatible with {c_in} input channels",
                    ks,
                    l.bias.shape()
                ));
            }
            c_in = ks[3];
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[ConvLayer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<S>] {
        &mut self.layers
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map(|l| l.kernel.shape()[3]).unwrap_or(0)
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].kernel.shape()[2]
    }

    pub fn extract_features(&self, image: &Image<S>) -> Result<FeatureMap<S>> {
        self.forward_tensor(&image.to_tensor())
    }

    /// Forward pass on a raw `(h, w, c_in)` tensor without recording.
    pub fn forward_tensor(&self, input: &Tensor<S>) -> Result<FeatureMap<S>> {
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let g = ConvGeom::infer(&x, &l.kernel, &l.bias)?;
            let mut y = tensor::conv2d_forward(g, x.data(), l.kernel.data(), l.bias.data());
            if i != last {
                for v in &mut y {
                    if *v < S::zero() {
                        *v = S::zero();
                    }
                }
            }
            x = Tensor::new(vec![g.h, g.w, g.c_out], y)?;
        }
        FeatureMap::new(x)
    }

    /// Records the parameters as leaves; `trainable` sets `requires_grad`.
    pub fn record(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| {
                let mut k = l.kernel.clone();
                let mut b = l.bias.clone();
                k.requires_grad = trainable;
                b.requires_grad = trainable;
                LayerVars {
                    kernel: tape.leaf(k),
                    bias: tape.leaf(b),
                }
            })
            .collect()
    }

    /// Differentiable forward of an `(h, w, c_in)` input already on the tape.
    pub fn forward_on(tape: &mut Tape<S>, vars: &[LayerVars], input: Var) -> Result<Var> {
        let mut x = input;
        for (i, l) in vars.iter().enumerate() {
            x = tape.conv2d(x, l.kernel, l.bias)?;
            if i + 1 != vars.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn cast<T: Scalar>(&self) -> Backbone<T> {
        Backbone {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    kernel: l.kernel.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}
