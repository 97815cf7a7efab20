//! Network building blocks: affine layers, bias-free linear heads, and the
//! two-layer perceptron used for every non-linear component.

use crate::rng::Rng;
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in `(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    KaimingUniform,
    Zeros,
}

/// Freshly initialized parameter tensor. For 2-d shapes `[out, in]` the fan-in
/// is the input width; for 1-d shapes it is the length.
pub fn init_params(shape: &[usize], scheme: InitScheme, rng: &mut Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let values = match scheme {
        InitScheme::Zeros => vec![0.0; len],
        InitScheme::KaimingUniform => {
            let fan_in = match shape {
                [_, fan_in] => *fan_in,
                [fan_in] => *fan_in,
                _ => 1,
            }
            .max(1);
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..len).map(|_| rng.uniform(-bound, bound)).collect()
        }
    };
    Tensor::parameter(shape.to_vec(), values).expect("init produces finite values")
}

/// One affine stage `act(x W^T + b)`. Weight shape is `[out, in]`, so weight
/// rows live in the input space; bias-free layers double as prototype stores,
/// with logits equal to inner products against the rows.
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

impl AffineLayer {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        AffineLayer {
            weight: init_params(&[out_dim, in_dim], InitScheme::KaimingUniform, rng),
            bias: Some(init_params(&[out_dim], InitScheme::Zeros, rng)),
            activation,
        }
    }

    /// Weight-only linear head (no bias, no activation).
    pub fn linear_no_bias(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        AffineLayer {
            weight: init_params(&[out_dim, in_dim], InitScheme::KaimingUniform, rng),
            bias: None,
            activation: Activation::Identity,
        }
    }

    /// Same shape as `linear_no_bias` but frozen: gradients never enter.
    pub fn frozen_no_bias(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let init = init_params(&[out_dim, in_dim], InitScheme::KaimingUniform, rng);
        let weight = Tensor::constant(vec![out_dim, in_dim], init.to_vec())
            .expect("frozen init is well formed");
        AffineLayer { weight, bias: None, activation: Activation::Identity }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight.transpose()?)?;
        if let Some(bias) = &self.bias {
            y = y.add_row_bias(bias)?;
        }
        match self.activation {
            Activation::Relu => y.relu(),
            Activation::Identity => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match &self.bias {
            Some(b) => vec![&self.weight, b],
            None => vec![&self.weight],
        }
    }
}

/// Two affine stages with a ReLU between them.
pub struct TwoLayerMlp {
    pub layer1: AffineLayer,
    pub layer2: AffineLayer,
}

impl TwoLayerMlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        assert!(hidden > 0, "hidden width must be positive");
        TwoLayerMlp {
            layer1: AffineLayer::new(in_dim, hidden, Activation::Relu, rng),
            layer2: AffineLayer::new(hidden, out_dim, Activation::Identity, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layer1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layer2.out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.layer2.forward(&self.layer1.forward(x)?)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.layer1.params();
        p.extend(self.layer2.params());
        p
    }
}
