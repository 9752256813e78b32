//! The MMoT network.

mod config;
mod network;
mod session;

pub use config::{Fusion, ModalitySpec, ModelConfig, PulseMode};
pub use network::{
    extract_attention_maps, AttentionMaps, CombinationWeights, DecoderOutput, DecoderTrace, ModalityMask, Mmot,
};
pub use session::DecoderSession;

#[cfg(test)]
mod tests;
