//! Raster images and similarity warping.

use std::io::Cursor;
use std::path::Path;

use ::image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use ::image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use super::{AlignError, SimilarityTransform};

/// Row-major, channel-interleaved image with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, AlignError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(AlignError::InvalidImage("zero dimension".into()));
        }
        if data.len() != width * height * channels {
            return Err(AlignError::InvalidImage(format!(
                "{width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(width, height, channels, vec![0.0; width * height * channels]).expect("positive dimensions")
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    img.data[(r * width + c) * channels + k] = f(r, c, k);
                }
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Left-right mirror.
    pub fn flipped(&self) -> Self {
        Self::from_fn(self.width, self.height, self.channels, |r, c, k| {
            self.get(r, self.width - 1 - c, k)
        })
    }

    /// Bilinear sample at continuous image coordinates; taps outside the
    /// image contribute zero.
    pub fn sample(&self, x: f64, y: f64, channel: usize) -> f64 {
        let u = x - 0.5;
        let v = y - 0.5;
        let (c0, r0) = (u.floor(), v.floor());
        let (fx, fy) = (u - c0, v - r0);
        let tap = |r: f64, c: f64| {
            if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
                0.0
            } else {
                self.get(r as usize, c as usize, channel)
            }
        };
        let top = if fx == 0.0 {
            tap(r0, c0)
        } else {
            (1.0 - fx) * tap(r0, c0) + fx * tap(r0, c0 + 1.0)
        };
        if fy == 0.0 {
            return top;
        }
        let bottom = if fx == 0.0 {
            tap(r0 + 1.0, c0)
        } else {
            (1.0 - fx) * tap(r0 + 1.0, c0) + fx * tap(r0 + 1.0, c0 + 1.0)
        };
        (1.0 - fy) * top + fy * bottom
    }

    /// Reads a binary or ASCII PGM (1 channel) or PPM (3 channels).
    pub fn read_pnm(bytes: &[u8]) -> Result<Self, AlignError> {
        let img = ::image::load_from_memory_with_format(bytes, ImageFormat::Pnm)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            DynamicImage::ImageLuma8(g) => Self::new(w, h, 1, g.into_raw().into_iter().map(f64::from).collect()),
            other => Self::new(w, h, 3, other.to_rgb8().into_raw().into_iter().map(f64::from).collect()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AlignError> {
        Self::read_pnm(&std::fs::read(path)?)
    }

    /// Binary PGM or PPM with samples rounded and clamped to `0..=255`.
    pub fn to_pnm(&self) -> Result<Vec<u8>, AlignError> {
        let (subtype, color) = match self.channels {
            1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
            3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
            c => return Err(AlignError::InvalidImage(format!("cannot encode {c} channels as PNM"))),
        };
        let raw: Vec<u8> = self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        let mut out = Cursor::new(Vec::new());
        PnmEncoder::new(&mut out).with_subtype(subtype).write_image(
            &raw,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(out.into_inner())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AlignError> {
        std::fs::write(path, self.to_pnm()?)?;
        Ok(())
    }
}

/// Resamples `img` onto an `out_h x out_w` grid. `t` maps output coordinates
/// to source coordinates: output pixel centre `p` takes the bilinear sample
/// of `img` at `t(p)`, zero outside the source.
pub fn warp_image(img: &ImageBuffer, t: &SimilarityTransform, out_size: (usize, usize)) -> ImageBuffer {
    let (out_h, out_w) = out_size;
    let mut out = ImageBuffer::zeros(out_w, out_h, img.channels);
    for r in 0..out_h {
        for c in 0..out_w {
            let [x, y] = t.apply([c as f64 + 0.5, r as f64 + 0.5]);
            for k in 0..img.channels {
                out.data[(r * out_w + c) * img.channels + k] = img.sample(x, y, k);
            }
        }
    }
    out
}
