use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One strided convolution of the feature encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self { channels, kernel, stride }
    }
}

/// Architecture of the miniature model.
///
/// The desk defaults run at 8 kHz: the three encoder layers have a total
/// stride of 160 samples (20 ms) and a receptive field of 200 samples
/// (25 ms), so a half-second window yields 24 frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub encoder_layers: Vec<ConvLayer>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_dim: usize,
    /// Number of codebooks `G`.
    pub codebooks: usize,
    /// Entries per codebook `V`.
    pub entries: usize,
    pub codeword_dim: usize,
    /// Odd kernel of the depthwise positional convolution.
    pub pos_conv_kernel: usize,
    pub frame_stride_ms: f64,
    pub frame_width_ms: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            sample_rate: 8000,
            encoder_layers: vec![ConvLayer::new(32, 25, 5), ConvLayer::new(48, 8, 4), ConvLayer::new(64, 8, 8)],
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            ffn_dim: 256,
            codebooks: 2,
            entries: 40,
            codeword_dim: 32,
            pos_conv_kernel: 5,
            frame_stride_ms: 20.0,
            frame_width_ms: 25.0,
            layer_norm_eps: 1e-5,
        }
    }

    /// Desk architecture with the full-scale quantizer (G=2, V=320).
    pub fn paper_scale_quantizer() -> Self {
        Self { entries: 320, ..Self::desk() }
    }

    /// Samples covered by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 0;
        let mut jump = 1;
        for (i, l) in self.encoder_layers.iter().enumerate() {
            rf += if i == 0 { l.kernel } else { (l.kernel - 1) * jump };
            jump *= l.stride;
        }
        rf
    }

    /// Samples between consecutive frames.
    pub fn total_stride(&self) -> usize {
        self.encoder_layers.iter().map(|l| l.stride).product()
    }

    /// Frames produced from `samples` input samples:
    /// `T = floor((samples - receptive_field) / total_stride) + 1`, which
    /// equals the layer-by-layer valid-convolution count.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        let rf = self.receptive_field();
        (samples >= rf).then(|| (samples - rf) / self.total_stride() + 1)
    }

    /// Number of distinct quantized targets, `V^G`.
    pub fn addressable_codewords(&self) -> u128 {
        (self.entries as u128).pow(self.codebooks as u32)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.n_blocks", self.n_blocks),
            ("model.ffn_dim", self.ffn_dim),
            ("model.codebooks", self.codebooks),
            ("model.entries", self.entries),
            ("model.codeword_dim", self.codeword_dim),
            ("model.sample_rate", self.sample_rate as usize),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation(
                "model.n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.encoder_layers.is_empty() {
            return Err(Error::validation("model.encoder_layers", "at least one layer required"));
        }
        for (i, l) in self.encoder_layers.iter().enumerate() {
            if l.channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::validation(format!("model.encoder_layers[{i}]"), "all fields must be positive"));
            }
        }
        if self.pos_conv_kernel % 2 == 0 {
            return Err(Error::validation("model.pos_conv_kernel", "must be odd"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::validation("model.layer_norm_eps", "must be positive"));
        }
        let sr = self.sample_rate as f64;
        let stride_ms = self.total_stride() as f64 * 1000.0 / sr;
        let width_ms = self.receptive_field() as f64 * 1000.0 / sr;
        if (stride_ms - self.frame_stride_ms).abs() > 1e-6 {
            return Err(Error::validation(
                "model.frame_stride_ms",
                format!("encoder strides give {stride_ms} ms, config says {}", self.frame_stride_ms),
            ));
        }
        if (width_ms - self.frame_width_ms).abs() > 1e-6 {
            return Err(Error::validation(
                "model.frame_width_ms",
                format!("encoder receptive field gives {width_ms} ms, config says {}", self.frame_width_ms),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_geometry() {
        let c = ModelConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.receptive_field(), 200);
        assert_eq!(c.total_stride(), 160);
        assert_eq!(c.frames_for(4000), Some(24));
        assert_eq!(c.frames_for(200), Some(1));
        assert_eq!(c.frames_for(199), None);
    }

    #[test]
    fn frame_formula_matches_layer_by_layer_count() {
        let c = ModelConfig::desk();
        for len in 200..3000 {
            let mut l = len;
            for layer in &c.encoder_layers {
                l = (l - layer.kernel) / layer.stride + 1;
            }
            assert_eq!(c.frames_for(len), Some(l), "len {len}");
        }
    }

    #[test]
    fn codeword_counts() {
        assert_eq!(ModelConfig::desk().addressable_codewords(), 1600);
        let full = ModelConfig::paper_scale_quantizer();
        assert_eq!(full.addressable_codewords(), 102_400);
        assert!(full.addressable_codewords() > 100_000);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig { n_heads: 5, ..ModelConfig::desk() };
        assert!(matches!(c.validate(), Err(Error::Validation { field, .. }) if field == "model.n_heads"));
    }
}
