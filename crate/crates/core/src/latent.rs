//! Dense video tensors and binary masks, plus the `CGFL` container they
//! serialize to.
//!
//! Layout is frame-major, then row, column, channel. The container is
//! little-endian: magic `CGFL`, `u32` version, `u32` F/H/W/C, then
//! `F*H*W*C` `f32` values in the same order. Values are held as `f64` in
//! memory and narrowed to `f32` on write.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const CGFL_MAGIC: [u8; 4] = *b"CGFL";
pub const CGFL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Shape { frames, height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of (frame, row, column) sites.
    pub fn sites(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn with_frames(self, frames: usize) -> Self {
        Shape { frames, ..self }
    }

    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(f < self.frames && y < self.height && x < self.width && c < self.channels);
        ((f * self.height + y) * self.width + x) * self.channels + c
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.frames, self.height, self.width, self.channels)
    }
}

/// A finite `F x H x W x C` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    shape: Shape,
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.frames == 0 {
            return Err(Error::invalid("latent video needs at least one frame"));
        }
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "latent of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent video"));
        }
        Ok(LatentVideo { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        LatentVideo { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(value.is_finite());
        LatentVideo { shape, data: vec![value; shape.len()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for fi in 0..shape.frames {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    for c in 0..shape.channels {
                        data.push(f(fi, y, x, c));
                    }
                }
            }
        }
        LatentVideo::new(shape, data)
    }

    /// i.i.d. standard normal entries drawn in storage order.
    pub fn standard_normal<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        LatentVideo { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.shape.index(f, y, x, c)]
    }

    pub fn ensure_same_shape(&self, other: &LatentVideo) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &LatentVideo) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn distance_sq(&self, other: &LatentVideo) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentVideo {
        LatentVideo { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &LatentVideo, f: impl Fn(f64, f64) -> f64) -> Result<LatentVideo> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(LatentVideo { shape: self.shape, data })
    }

    pub fn add(&self, other: &LatentVideo) -> Result<LatentVideo> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &LatentVideo) -> Result<LatentVideo> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> LatentVideo {
        self.map(|v| k * v)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &LatentVideo) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Copy of frame `f` as a one-frame latent.
    pub fn frame(&self, f: usize) -> LatentVideo {
        let n = self.shape.frame_len();
        LatentVideo {
            shape: self.shape.with_frames(1),
            data: self.data[f * n..(f + 1) * n].to_vec(),
        }
    }

    /// Repeats a one-frame latent `frames` times.
    pub fn broadcast_frames(&self, frames: usize) -> Result<LatentVideo> {
        if self.shape.frames != 1 {
            return Err(Error::invalid(format!("broadcast needs a single frame, got {}", self.shape)));
        }
        if frames == 0 {
            return Err(Error::invalid("broadcast to zero frames"));
        }
        let mut data = Vec::with_capacity(self.data.len() * frames);
        for _ in 0..frames {
            data.extend_from_slice(&self.data);
        }
        Ok(LatentVideo { shape: self.shape.with_frames(frames), data })
    }

    /// Stacks equally shaped one-or-more-frame latents along the frame axis.
    pub fn concat_frames(parts: &[LatentVideo]) -> Result<LatentVideo> {
        let first = parts.first().ok_or_else(|| Error::invalid("no frames to concatenate"))?;
        let mut frames = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape;
            if (s.height, s.width, s.channels) != (first.shape.height, first.shape.width, first.shape.channels) {
                return Err(Error::ShapeMismatch(first.shape, s));
            }
            frames += s.frames;
            data.extend_from_slice(&p.data);
        }
        Ok(LatentVideo { shape: first.shape.with_frames(frames), data })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_container(w, self.shape, self.data.iter().map(|&v| v as f32))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (shape, values) = read_container(r)?;
        LatentVideo::new(shape, values.into_iter().map(f64::from).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + 4 * self.data.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        LatentVideo::read_from(&mut bytes.as_slice())
    }
}

/// Binary `F x H x W` mask broadcast over channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoMask {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl VideoMask {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::invalid(format!(
                "mask {frames}x{height}x{width} needs {} entries, got {}",
                frames * height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(VideoMask { frames, height, width, data })
    }

    pub fn ones(frames: usize, height: usize, width: usize) -> Self {
        VideoMask { frames, height, width, data: vec![1; frames * height * width] }
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        VideoMask { frames, height, width, data: vec![0; frames * height * width] }
    }

    pub fn from_fn(frames: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(frames * height * width);
        for fi in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    data.push(u8::from(f(fi, y, x)));
                }
            }
        }
        VideoMask { frames, height, width, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.data[(f * self.height + y) * self.width + x] == 1
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn frame_slice(&self, f: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn complement(&self) -> VideoMask {
        VideoMask { data: self.data.iter().map(|v| 1 - v).collect(), ..*self }
    }

    /// Mask value for latent storage index `i`, given the latent's channel count.

    pub(crate) fn at_latent_index(&self, i: usize, channels: usize) -> bool {
        self.data[i / channels] == 1
    }

    pub fn ensure_matches(&self, shape: Shape) -> Result<()> {
        if (self.frames, self.height, self.width) != (shape.frames, shape.height, shape.width) {
            return Err(Error::ShapeMismatch(Shape::new(self.frames, self.height, self.width, 1), shape));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let shape = Shape::new(self.frames, self.height, self.width, 1);
        write_container(w, shape, self.data.iter().map(|&v| f32::from(v)))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (shape, values) = read_container(r)?;
        if shape.channels != 1 {
            return Err(Error::format("CGFL", format!("mask must have 1 channel, got {}", shape.channels)));
        }
        let mut data = Vec::with_capacity(values.len());
        for v in values {
            data.push(match v {
                0.0 => 0,
                1.0 => 1,
                other => return Err(Error::format("CGFL", format!("mask value {other} is not 0 or 1"))),
            });
        }
        VideoMask::new(shape.frames, shape.height, shape.width, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        VideoMask::read_from(&mut bytes.as_slice())
    }
}

pub(crate) fn write_container<W: Write>(
    w: &mut W,
    shape: Shape,
    values: impl Iterator<Item = f32>,
) -> std::io::Result<()> {
    w.write_all(&CGFL_MAGIC)?;
    for v in [CGFL_VERSION, shape.frames as u32, shape.height as u32, shape.width as u32, shape.channels as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_container<R: Read>(r: &mut R) -> Result<(Shape, Vec<f32>)> {
    let bad = |m: String| Error::format("CGFL", m);
    let mut header = [0u8; 24];
    r.read_exact(&mut header).map_err(|e| bad(format!("short header: {e}")))?;
    if header[..4] != CGFL_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != CGFL_VERSION {
        return Err(bad(format!("unsupported version {}", word(0))));
    }
    let shape = Shape::new(word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| bad(e.to_string()))?;
    if raw.len() != 4 * shape.len() {
        return Err(bad(format!("shape {shape} needs {} payload bytes, found {}", 4 * shape.len(), raw.len())));
    }
    let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((shape, values))
}
