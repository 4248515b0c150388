//! Declarative layer descriptions used to assemble encoder stages and heads.
//!
//! Only the layer kinds the networks actually use are representable: square
//! odd convolutions at stride 1, dense, ReLU, window-strided max pooling,
//! global max pooling, dropout and elementwise sum. The constructors make
//! most invalid states unrepresentable; `validate` catches the rest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Square odd kernel, stride 1, zero same-padding.
    Conv2d { out_channels: usize, kernel: usize },
    Dense { units: usize },
    Relu,
    /// Stride always equals the window.
    MaxPool2d { window: usize },
    GlobalMaxPool,
    Dropout { rate: f64 },
    ElementwiseSum,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d { out_channels, kernel } => {
                if *out_channels == 0 {
                    return Err(Error::Config("conv2d with 0 output channels".into()));
                }
                if *kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "conv2d kernel {kernel} must be odd for same padding"
                    )));
                }
            }
            LayerSpec::Dense { units } => {
                if *units == 0 {
                    return Err(Error::Config("dense layer with 0 units".into()));
                }
            }
            LayerSpec::MaxPool2d { window } => {
                if *window < 2 {
                    return Err(Error::Config(format!(
                        "maxpool window {window} would not downsample"
                    )));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
                }
            }
            LayerSpec::Relu | LayerSpec::GlobalMaxPool | LayerSpec::ElementwiseSum => {}
        }
        Ok(())
    }
}
