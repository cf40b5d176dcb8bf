//! Numeric kernels behind every graph op kind: convolution (im2col +
//! matrix multiply), pooling, batch normalization, fully connected, ReLU
//! and softmax cross-entropy, each with a forward and a backward path.
//!
//! Kernels are pure functions of their inputs. The naive counterparts that
//! tests compare against live in [`crate::oracle`].

mod conv;
mod linear;
mod norm;
mod pool;
mod loss;

pub use conv::{conv2d_backward, conv2d_forward, matmul, ConvGrads};
pub use linear::{fc_backward, fc_forward, relu_backward, relu_forward};
pub use loss::{softmax_rows, softmax_xent_backward, softmax_xent_forward};
pub use norm::{
    batchnorm_infer_backward, batchnorm_infer_forward, batchnorm_train_backward,
    batchnorm_train_forward, BatchStats,
};
pub use pool::{
    global_avg_pool_backward, global_avg_pool_forward, pool2d_backward, pool2d_forward,
};

use crate::tensor::TensorError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("input has {input} channels but weights expect {weights}")]
    ChannelMismatch { input: usize, weights: usize },
    #[error("kernel {kh}x{kw}/{stride} does not fit padded input {h}x{w}")]
    KernelTooLarge { kh: usize, kw: usize, stride: usize, h: usize, w: usize },
    #[error("weight shape {got:?} does not match attributes (expected {expected:?})")]
    WeightShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("batch normalization in training mode needs a batch of at least 2, got {batch}")]
    BatchTooSmall { batch: usize },
    #[error("target row {row} is not a probability distribution: {reason}")]
    InvalidTargets { row: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// Zero padding chosen so the output spans `ceil(input / stride)`.
    Same,
}

impl Padding {
    /// Output extent along one axis, or `None` when a valid-padded kernel
    /// exceeds the input.
    pub fn out_dim(self, input: usize, kernel: usize, stride: usize) -> Option<usize> {
        match self {
            Padding::Valid => {
                if kernel > input {
                    None
                } else {
                    Some((input - kernel) / stride + 1)
                }
            }
            Padding::Same => Some(input.div_ceil(stride)),
        }
    }

    /// Zero cells inserted before the first input element; the remainder of
    /// the total padding goes after (the asymmetric split favours the end).
    pub fn pad_before(self, input: usize, kernel: usize, stride: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                total / 2
            }
        }
    }
}

impl core::fmt::Display for Padding {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Padding::Valid => write!(f, "valid"),
            Padding::Same => write!(f, "same"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ConvAttrs {
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Stride, identical along both spatial axes.
    pub stride: usize,
    pub padding: Padding,
    pub out_channels: usize,
    pub use_bias: bool,
}

impl ConvAttrs {
    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
        out_channels: usize,
        use_bias: bool,
    ) -> Self {
        assert!(kernel_h >= 1 && kernel_w >= 1 && stride >= 1 && out_channels >= 1);
        ConvAttrs { kernel_h, kernel_w, stride, padding, out_channels, use_bias }
    }

    /// Square kernel without bias, the common case inside the block library
    /// where batch normalization follows every convolution.
    pub fn square(kernel: usize, stride: usize, padding: Padding, out_channels: usize) -> Self {
        Self::new(kernel, kernel, stride, padding, out_channels, false)
    }

    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let oh = self.padding.out_dim(h, self.kernel_h, self.stride);
        let ow = self.padding.out_dim(w, self.kernel_w, self.stride);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(NnError::KernelTooLarge {
                kh: self.kernel_h,
                kw: self.kernel_w,
                stride: self.stride,
                h,
                w,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum PoolKind {
    Max,
    Avg,
}

impl core::fmt::Display for PoolKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PoolKind::Max => write!(f, "max"),
            PoolKind::Avg => write!(f, "avg"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PoolAttrs {
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
    pub kind: PoolKind,
    pub padding: Padding,
}

impl PoolAttrs {
    pub fn new(window: usize, stride: usize, kind: PoolKind, padding: Padding) -> Self {
        assert!(window >= 1 && stride >= 1);
        PoolAttrs { window_h: window, window_w: window, stride, kind, padding }
    }

    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let oh = self.padding.out_dim(h, self.window_h, self.stride);
        let ow = self.padding.out_dim(w, self.window_w, self.stride);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(NnError::KernelTooLarge {
                kh: self.window_h,
                kw: self.window_w,
                stride: self.stride,
                h,
                w,
            }),
        }
    }
}

/// Batch normalization attributes; the train/infer mode is chosen per
/// execution, not baked into the graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchNormAttrs {
    pub epsilon: f64,
    /// Retained fraction of the moving statistics per update.
    pub momentum: f64,
}

impl Default for BatchNormAttrs {
    fn default() -> Self {
        BatchNormAttrs { epsilon: 1e-3, momentum: 0.99 }
    }
}
