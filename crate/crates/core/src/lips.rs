//! Grayscale lip sequences and their binary container.
//!
//! Container layout, little-endian, fixed 16-byte header:
//! magic `LIPS` (4 bytes), frame count (u32), height (u16), width (u16),
//! 4 reserved zero bytes, then `count * height * width` row-major u8
//! intensities (0..=255 mapping to 0.0..=1.0).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"LIPS";
const HEADER_LEN: usize = 16;

/// Lip video at 25 FPS, intensities in [0, 1].
#[derive(Debug, Clone)]
pub struct LipSequence {
    /// Row-major `L * H * W` intensities.
    data: Vec<f32>,
    frames: usize,
    height: usize,
    width: usize,
}

impl LipSequence {
    pub const FRAME_RATE: f64 = 25.0;

    pub fn new(data: Vec<f32>, frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 {
            return Err(CoreError::LipFormat("empty lip sequence".into()));
        }
        if data.len() != frames * height * width {
            return Err(CoreError::LipFormat(format!(
                "data length {} does not match {frames}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::LipFormat("intensity outside [0, 1]".into()));
        }
        Ok(LipSequence { data, frames, height, width })
    }

    pub fn constant(frames: usize, height: usize, width: usize, value: f32) -> Self {
        LipSequence { data: vec![value; frames * height * width], frames, height, width }
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, frame: usize, y: usize, x: usize) -> f32 {
        self.data[(frame * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// First `frames` frames, used by length alignment.
    pub fn truncated(&self, frames: usize) -> LipSequence {
        let keep = frames.min(self.frames);
        LipSequence {
            data: self.data[..keep * self.height * self.width].to_vec(),
            frames: keep,
            height: self.height,
            width: self.width,
        }
    }

    /// Contiguous frame range [start, start+len).
    pub fn slice_frames(&self, start: usize, len: usize) -> LipSequence {
        let n = self.height * self.width;
        LipSequence {
            data: self.data[start * n..(start + len) * n].to_vec(),
            frames: len,
            height: self.height,
            width: self.width,
        }
    }
}

pub fn save_lips(l: &LipSequence, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&(l.frames as u32).to_le_bytes());
    header.extend_from_slice(&(l.height as u16).to_le_bytes());
    header.extend_from_slice(&(l.width as u16).to_le_bytes());
    header.extend_from_slice(&[0u8; 4]);
    file.write_all(&header).map_err(|e| CoreError::io(path, e))?;
    let bytes: Vec<u8> = l.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    file.write_all(&bytes).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn load_lips(path: &Path) -> Result<LipSequence> {
    let mut file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|_| CoreError::LipFormat(format!("{}: truncated header", path.display())))?;
    if &header[0..4] != MAGIC {
        return Err(CoreError::LipFormat(format!("{}: bad magic", path.display())));
    }
    let frames = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u16::from_le_bytes(header[8..10].try_into().unwrap()) as usize;
    let width = u16::from_le_bytes(header[10..12].try_into().unwrap()) as usize;
    let expected = frames * height * width;
    let mut bytes = Vec::with_capacity(expected);
    file.read_to_end(&mut bytes).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() != expected {
        return Err(CoreError::LipFormat(format!(
            "{}: payload {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    LipSequence::new(data, frames, height, width)
}
