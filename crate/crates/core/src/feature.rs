use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One sample's feature map, stored channel-major (`C×H×W`).
///
/// Indexing follows the `(row, col, channel)` convention of an `H×W×C` map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FeatureMap<T: Scalar> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    /// Builds a map from a row-major `H×W×C` buffer.
    pub fn from_hwc(height: usize, width: usize, channels: usize, hwc: &[T]) -> Result<Self> {
        if hwc.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} map",
                hwc.len()
            )));
        }
        let mut m = Self::zeros(height, width, channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    *m.at_mut(i, j, c) = hwc[(i * width + j) * channels + c];
                }
            }
        }
        Ok(m)
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut m = Self::zeros(height, width, channels);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    *m.at_mut(i, j, c) = f(i, j, c);
                }
            }
        }
        m
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, c: usize) -> T {
        self.data[c * self.plane() + i * self.width + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, c: usize) -> &mut T {
        let p = self.plane();
        &mut self.data[c * p + i * self.width + j]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn scaled(&self, k: T) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= k;
        }
        out
    }
}
