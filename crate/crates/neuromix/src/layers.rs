//! Network layers: dense, 3×3 same-padding convolution, 2×2 max-pooling and
//! ReLU. Convolutions and dense layers own their parameter tensors.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Fixed convolution kernel size (square, odd, same padding).
pub const KERNEL_SIZE: usize = 3;

/// Fixed max-pooling window.
pub const POOL_WINDOW: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Fully connected: weight `(in, out)`, bias `(out)`.
    Dense { weight: Tensor, bias: Tensor },
    /// Cross-correlation, stride 1, same padding: weight `(out_ch, in_ch, k, k)`.
    Conv2d { weight: Tensor, bias: Tensor, stride: usize },
    MaxPool2d { window: usize },
    Relu,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Relu => "relu",
        }
    }

    /// Parameter tensors in a stable order (weight, then bias).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}
