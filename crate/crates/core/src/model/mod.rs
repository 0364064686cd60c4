//! Miniature wav2vec2/XLSR-style model: convolutional feature encoder,
//! transformer context network and Gumbel product quantizer.

mod config;
mod network;
mod params;

pub use config::{ConvLayer, ModelConfig};
pub use network::{normalize_waveform, LatentSequence, QuantizerNodes, SpeechModel};
pub use params::{param_layout, ParamEntry, ParamTree, Section};
