pub mod clip;
pub mod encoder;

pub use clip::{LipClip, FPS, FRAME_SIZE};
pub use encoder::{clip_tensor, TemporalUpsampler, VisualConfig, VisualEncoder};
