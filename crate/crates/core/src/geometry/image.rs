//! RGB images, depth maps and their file formats.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::{self, LatentVideo, Shape, VideoMask};

pub type Rgb = [f64; 3];

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Image { width, height, data: vec![color; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.data[y * self.width + x] = c;
    }

    /// One-frame `H x W x 3` latent.
    pub fn to_latent(&self) -> LatentVideo {
        let data = self.data.iter().flat_map(|c| c.iter().copied()).collect();
        LatentVideo::new(Shape::new(1, self.height, self.width, 3), data).expect("image values are finite")
    }

    /// Frame `f` of a three-channel latent, values clamped to `[0, 1]`.
    pub fn from_latent_frame(z: &LatentVideo, f: usize) -> Result<Self> {
        let s = z.shape();
        if s.channels != 3 || f >= s.frames {
            return Err(Error::invalid(format!("cannot take RGB frame {f} from latent {s}")));
        }
        let frame = z.frame(f);
        let data = frame.data().chunks_exact(3).map(|c| [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)]).collect();
        Ok(Image { width: s.width, height: s.height, data })
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|c| c.iter().map(|&v| to_u8(v))).collect();
        w.write_all(&bytes)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_ppm(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::format("PPM", e.to_string()))? == 0 {
                return Err(Error::format("PPM", "truncated header"));
            }
            let line = line.split('#').next().unwrap_or("");
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P6" {
            return Err(Error::format("PPM", format!("unsupported magic {}", tokens[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format("PPM", format!("bad header field `{s}`")));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 || tokens.len() != 4 {
            return Err(Error::format("PPM", "only 8-bit P6 with one header field per token group is supported"));
        }
        let mut bytes = vec![0u8; width * height * 3];
        r.read_exact(&mut bytes).map_err(|_| Error::format("PPM", "truncated pixel data"))?;
        let data = bytes.chunks_exact(3).map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]).collect();
        Ok(Image { width, height, data })
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ppm(f)
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel camera-frame depth (distance along +Z); `f64::INFINITY` marks
/// empty pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        DepthMap { width, height, data: vec![f64::INFINITY; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!("depth map needs {} values, got {}", width * height, data.len())));
        }
        Ok(DepthMap { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    /// Writes the CGFL container with `C = 1`; empty pixels are stored as 0.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        let shape = Shape::new(1, self.height, self.width, 1);
        latent::write_container(&mut buf, shape, self.data.iter().map(|&d| if d.is_finite() { d as f32 } else { 0.0 }))
            .expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (shape, values) = latent::read_container(&mut bytes.as_slice())?;
        if shape.frames != 1 || shape.channels != 1 {
            return Err(Error::format("depth map", format!("expected 1x H x W x1, got {shape}")));
        }
        let data = values.iter().map(|&v| if v > 0.0 { v as f64 } else { f64::INFINITY }).collect();
        DepthMap::from_vec(shape.width, shape.height, data)
    }
}

/// Stacks one-frame masks into a video mask.
pub fn stack_masks(masks: &[VideoMask]) -> Result<VideoMask> {
    let first = masks.first().ok_or_else(|| Error::invalid("no masks to stack"))?;
    let mut data = Vec::new();
    let mut frames = 0;
    for m in masks {
        if (m.height(), m.width()) != (first.height(), first.width()) {
            return Err(Error::ShapeMismatch(
                Shape::new(first.frames(), first.height(), first.width(), 1),
                Shape::new(m.frames(), m.height(), m.width(), 1),
            ));
        }
        frames += m.frames();
        data.extend_from_slice(m.data());
    }
    VideoMask::new(frames, first.height(), first.width(), data)
}
