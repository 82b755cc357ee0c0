//! 8-bit RGB frames, conversion to network tensors, and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use swm_autograd::{Float, Tensor};

use crate::error::{Error, Result};

/// Row-major `height x width x 3` RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!("{height}x{width} RGB frame needs {} bytes, got {}", height * width * 3, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luminance plane (ITU-R BT.601 weights) as `f64`.
    pub fn luma(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
    }
}

/// Stacks frames into an `(n, 3, H, W)` tensor scaled to `[-1, 1]`.
pub fn frames_to_tensor<F: Float>(frames: &[&Frame]) -> Result<Tensor<F>> {
    let first = frames.first().ok_or_else(|| Error::invalid("no frames to stack"))?;
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut out = vec![F::zero(); frames.len() * 3 * plane];
    for (i, f) in frames.iter().enumerate() {
        if (f.height, f.width) != (h, w) {
            return Err(Error::invalid(format!("frame {i} is {}x{}, expected {h}x{w}", f.height, f.width)));
        }
        for p in 0..plane {
            for c in 0..3 {
                out[(i * 3 + c) * plane + p] = F::lit(f.data[p * 3 + c] as f64 / 127.5 - 1.0);
            }
        }
    }
    Ok(Tensor::new(&[frames.len(), 3, h, w], out))
}

/// Inverse of [`frames_to_tensor`], clamping and rounding to 8 bits.
pub fn tensor_to_frames<F: Float>(x: &Tensor<F>) -> Vec<Frame> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c, 3, "expected RGB planes");
    let plane = h * w;
    let d = x.data();
    (0..n)
        .map(|i| {
            let mut data = vec![0u8; plane * 3];
            for p in 0..plane {
                for ch in 0..3 {
                    let v = (d[(i * 3 + ch) * plane + p].as_f64() + 1.0) * 127.5;
                    data[p * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
            Frame { height: h, width: w, data }
        })
        .collect()
}

pub fn write_png(frame: &Frame, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), frame.width as u32, frame.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&frame.data).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<Frame> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit images are supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
        other => return Err(Error::format(path, format!("unsupported colour type {other:?}"))),
    };
    Frame::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_exact() {
        let data: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let f = Frame::new(4, 5, data).unwrap();
        let t = frames_to_tensor::<f32>(&[&f, &f]).unwrap();
        assert_eq!(tensor_to_frames(&t), vec![f.clone(), f]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..8 * 6 * 3).map(|i| (i * 11 % 256) as u8).collect();
        let f = Frame::new(8, 6, data).unwrap();
        let p = dir.path().join("a.png");
        write_png(&f, &p).unwrap();
        assert_eq!(read_png(&p).unwrap(), f);
    }
}
