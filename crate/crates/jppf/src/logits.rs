//! Dense activation maps with per-channel class identity.

use ndarray::Array3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogitsError {
    #[error("channel_meta has {meta} entries but map has {channels} channels")]
    MetaMismatch { meta: usize, channels: usize },
    #[error("value {value} at channel {channel} outside [0, 1]")]
    OutOfRange { channel: usize, value: f32 },
    #[error("logit map needs at least one channel")]
    Empty,
    #[error("no channel for class {0}")]
    MissingChannel(u32),
}

/// A `C x H x W` activation map with values in `[0, 1]` and a class id per
/// channel. Out-of-range inputs are rejected at construction, not clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLogits {
    values: Array3<f32>,
    channel_meta: Vec<u32>,
}

impl DenseLogits {
    pub fn new(values: Array3<f32>, channel_meta: Vec<u32>) -> Result<Self, LogitsError> {
        let channels = values.shape()[0];
        if channels == 0 {
            return Err(LogitsError::Empty);
        }
        if channel_meta.len() != channels {
            return Err(LogitsError::MetaMismatch { meta: channel_meta.len(), channels });
        }
        for (c, plane) in values.outer_iter().enumerate() {
            if let Some(&bad) = plane.iter().find(|v| !(0.0..=1.0).contains(*v) || v.is_nan()) {
                return Err(LogitsError::OutOfRange { channel: c, value: bad });
            }
        }
        Ok(Self { values, channel_meta })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn channel_meta(&self) -> &[u32] {
        &self.channel_meta
    }

    /// Index of the channel carrying `class_id`.
    pub fn channel_of(&self, class_id: u32) -> Result<usize, LogitsError> {
        self.channel_meta
            .iter()
            .position(|&c| c == class_id)
            .ok_or(LogitsError::MissingChannel(class_id))
    }

    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.values[[channel, y, x]]
    }
}
