//! Elementwise nonlinearities.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Default negative slope for the encoder/decoder convolutions.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Tanh => x.map(f64::tanh),
            Activation::LeakyRelu(s) => x.map(|v| if v > 0.0 { v } else { s * v }),
        }
    }

    /// Leaky-ReLU branch taken at each element (`true` = positive side).
    pub(crate) fn leaky_mask(x: &Tensor) -> Vec<bool> {
        x.data().iter().map(|&v| v > 0.0).collect()
    }

    pub(crate) fn apply_masked(slope: f64, x: &Tensor, mask: &[bool]) -> Tensor {
        let mut out = x.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if !m {
                *v *= slope;
            }
        }
        out
    }

    /// Backward pass given the forward output `y` (sigmoid, tanh) or the
    /// branch mask (leaky ReLU).
    pub(crate) fn backward(self, y: &Tensor, mask: Option<&[bool]>, dy: &Tensor) -> Tensor {
        let mut dx = dy.clone();
        match self {
            Activation::Sigmoid => {
                for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g *= s * (1.0 - s);
                }
            }
            Activation::Tanh => {
                for (g, &t) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g *= 1.0 - t * t;
                }
            }
            Activation::LeakyRelu(s) => {
                let mask = mask.expect("leaky relu backward needs its branch mask");
                for (g, &m) in dx.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *g *= s;
                    }
                }
            }
        }
        dx
    }
}
