use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    /// Output channels of the 3×3 conv blocks.
    pub cnn_channels: Vec<usize>,
    /// Zero-based block indices followed by a 2×2 max-pool.
    pub pool_after: Vec<usize>,
    pub feature_dim: usize,
    pub shared: EncoderConfig,
    pub head: EncoderConfig,
    pub pool_hidden: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            cnn_channels: vec![16, 16, 32, 64, 128, 160],
            pool_after: vec![1, 3, 5],
            feature_dim: 64,
            shared: EncoderConfig {
                layers: 2,
                heads: 1,
                d_model: 64,
                d_ff: 64,
                dropout: 0.1,
            },
            head: EncoderConfig {
                layers: 1,
                heads: 1,
                d_model: 32,
                d_ff: 32,
                dropout: 0.1,
            },
            pool_hidden: 32,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A very small network on 8×8 segments, used for gradient checks.
    pub fn tiny() -> Self {
        let frontend = FrontendConfig {
            n_mels: 8,
            segment_width_frames: 8,
            ..FrontendConfig::default()
        };
        Self {
            frontend,
            cnn_channels: vec![2, 2, 3, 3, 4, 4],
            pool_after: vec![1, 3, 5],
            feature_dim: 8,
            shared: EncoderConfig {
                layers: 2,
                heads: 1,
                d_model: 8,
                d_ff: 8,
                dropout: 0.1,
            },
            head: EncoderConfig {
                layers: 1,
                heads: 1,
                d_model: 4,
                d_ff: 4,
                dropout: 0.1,
            },
            pool_hidden: 4,
            ..Self::default()
        }
    }

    /// Spatial size `(mels, frames)` of the last conv block's output.
    pub fn cnn_output_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.frontend.n_mels, self.frontend.segment_width_frames);
        for &b in &self.pool_after {
            if b < self.cnn_channels.len() {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return Err(Error::Invalid("cnn_channels must be non-empty and positive".into()));
        }
        if self.pool_after.iter().any(|&b| b >= self.cnn_channels.len()) {
            return Err(Error::Invalid("pool_after refers to a missing conv block".into()));
        }
        let (h, w) = self.cnn_output_hw();
        if h == 0 || w == 0 {
            return Err(Error::Invalid(format!(
                "segments of {}×{} are too small for {} pooling stages",
                self.frontend.n_mels,
                self.frontend.segment_width_frames,
                self.pool_after.len()
            )));
        }
        for (name, enc) in [("shared", &self.shared), ("head", &self.head)] {
            if enc.heads != 1 {
                return Err(Error::Invalid(format!("{name} encoder: only single-head attention is supported")));
            }
            if enc.d_model == 0 || enc.d_ff == 0 || !(0.0..1.0).contains(&enc.dropout) {
                return Err(Error::Invalid(format!("{name} encoder: invalid widths or dropout")));
            }
        }
        if self.shared.d_model != self.feature_dim {
            return Err(Error::Invalid("shared encoder width must equal feature_dim".into()));
        }
        if self.pool_hidden == 0 {
            return Err(Error::Invalid("pool_hidden must be positive".into()));
        }
        Ok(())
    }
}
