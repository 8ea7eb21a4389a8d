use crate::error::{invalid, Error, Result};
use crate::io::Array;

pub const FRAME_SIZE: usize = 96;
pub const FPS: u32 = 25;

/// Grayscale lip region video, row-major `[n_frames x 96 x 96]`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LipClip {
    pub frames: Vec<f32>,
    pub n_frames: usize,
}

impl LipClip {
    pub fn new(frames: Vec<f32>, n_frames: usize) -> Result<Self> {
        let clip = Self { frames, n_frames };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(invalid("clip has no frames"));
        }
        if self.frames.len() != self.n_frames * FRAME_SIZE * FRAME_SIZE {
            return Err(Error::Shape(format!(
                "clip holds {} values, expected {} frames of {FRAME_SIZE}x{FRAME_SIZE}",
                self.frames.len(),
                self.n_frames
            )));
        }
        if self.frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("clip values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = FRAME_SIZE * FRAME_SIZE;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn to_array(&self) -> Array {
        Array {
            dims: vec![self.n_frames, FRAME_SIZE, FRAME_SIZE],
            data: self.frames.clone(),
        }
    }

    pub fn from_array(a: Array) -> Result<Self> {
        if a.dims.len() != 3 || a.dims[1] != FRAME_SIZE || a.dims[2] != FRAME_SIZE {
            return Err(Error::Shape(format!(
                "clip dims {:?}, expected [T, {FRAME_SIZE}, {FRAME_SIZE}]",
                a.dims
            )));
        }
        Self::new(a.data, a.dims[0])
    }
}
