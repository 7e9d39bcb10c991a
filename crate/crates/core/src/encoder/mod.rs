//! Small convolutional encoder with taps at the last three stages, plus
//! projector and predictor heads. Forward and exact reverse passes.

mod layers;
mod network;

pub use layers::{Act, BnMode, LinearParams, MlpParams, BN_EPS};
pub use network::{
    backward, ema_blend, forward, init_branches, init_params, BnStats, Branch, ConvBnParams, FeaturePyramid,
    ForwardCache, NetworkParams, PyramidGrads, BN_MOMENTUM, TAP_UNITS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub stage_channels: [usize; 4],
    pub rep_dim: usize,
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 64,
            stage_channels: [16, 32, 64, 128],
            rep_dim: 128,
            proj_dim: 64,
        }
    }
}

impl EncoderConfig {
    /// A stride-2 stem followed by four stride-2 stages.
    pub const TOTAL_STRIDE: usize = 32;

    pub fn validate(&self) -> Result<()> {
        let s = self.input_size;
        if s == 0 || !s.is_multiple_of(Self::TOTAL_STRIDE) {
            return Err(Error::InvalidConfig(format!(
                "input_size {s} must be a positive multiple of {}",
                Self::TOTAL_STRIDE
            )));
        }
        if s / 16 < 4 {
            return Err(Error::InvalidConfig(format!(
                "input_size {s} gives a layer-3 side of {} (< 4)",
                s / 16
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::InvalidConfig("stage_channels must be positive".into()));
        }
        if self.rep_dim != self.stage_channels[3] {
            return Err(Error::InvalidConfig(format!(
                "rep_dim {} must equal the last stage width {}",
                self.rep_dim, self.stage_channels[3]
            )));
        }
        if self.proj_dim == 0 || self.proj_dim >= self.rep_dim {
            return Err(Error::InvalidConfig(format!(
                "proj_dim {} must be in [1, rep_dim = {})",
                self.proj_dim, self.rep_dim
            )));
        }
        Ok(())
    }

    pub fn head_hidden(&self) -> usize {
        2 * self.proj_dim
    }

    /// Spatial side of the map tapped at layer 2, 3 or 4.
    pub fn tap_side(&self, layer: usize) -> usize {
        assert!((2..=4).contains(&layer), "no tap at layer {layer}");
        self.input_size >> (layer + 1)
    }

    pub fn tap_channels(&self, layer: usize) -> usize {
        assert!((2..=4).contains(&layer), "no tap at layer {layer}");
        self.stage_channels[layer - 1]
    }
}
