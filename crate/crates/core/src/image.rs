//! Float RGB images and 8-bit PNG encoding.

use std::io::Cursor;
use std::path::Path;

use glam::DVec3;

use crate::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f32; 3]>,
}

impl Image {
    pub fn filled(width: u32, height: u32, color: DVec3) -> Self {
        let c = color.as_vec3().to_array();
        Self {
            width,
            height,
            pixels: vec![c; (width * height) as usize],
        }
    }

    pub fn get(&self, row: u32, col: u32) -> [f32; 3] {
        self.pixels[(row * self.width + col) as usize]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn from_rgb8(width: u32, height: u32, data: &[u8]) -> Result<Self> {
        if data.len() != (width * height * 3) as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        let pixels = data
            .chunks_exact(3)
            .map(|p| [p[0], p[1], p[2]].map(|c| c as f32 / 255.0))
            .collect();
        Ok(Self { width, height, pixels })
    }

    /// Re-rounds through 8 bits, as if saved and reloaded.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = encode_png(self.width, self.height, PixelFormat::Rgb, &self.to_rgb8())?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let (w, h, format, data) = decode_png(&bytes, &name)?;
        if format != PixelFormat::Rgb {
            return Err(Error::Image {
                file: name,
                message: "expected an 8-bit RGB image".into(),
            });
        }
        Self::from_rgb8(w, h, &data)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f32::max)
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] as f64 - b[c] as f64).powi(2)))
            .sum();
        sum / (3 * self.pixels.len()) as f64
    }
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.mse(b);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelFormat {
    Gray,
    Rgb,
    Rgba,
}

impl PixelFormat {
    pub fn channels(self) -> usize {
        match self {
            PixelFormat::Gray => 1,
            PixelFormat::Rgb => 3,
            PixelFormat::Rgba => 4,
        }
    }

    fn color_type(self) -> png::ColorType {
        match self {
            PixelFormat::Gray => png::ColorType::Grayscale,
            PixelFormat::Rgb => png::ColorType::Rgb,
            PixelFormat::Rgba => png::ColorType::Rgba,
        }
    }
}

pub(crate) fn encode_png(width: u32, height: u32, format: PixelFormat, data: &[u8]) -> Result<Vec<u8>> {
    let wrap = |e: png::EncodingError| Error::Image {
        file: "<encoder>".into(),
        message: e.to_string(),
    };
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, width, height);
    encoder.set_color(format.color_type());
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_compression(png::Compression::High);
    let mut writer = encoder.write_header().map_err(wrap)?;
    writer.write_image_data(data).map_err(wrap)?;
    writer.finish().map_err(wrap)?;
    Ok(out)
}

pub(crate) fn decode_png(bytes: &[u8], name: &str) -> Result<(u32, u32, PixelFormat, Vec<u8>)> {
    let wrap = |e: png::DecodingError| Error::Image {
        file: name.to_string(),
        message: e.to_string(),
    };
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(wrap)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Image {
        file: name.to_string(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(wrap)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image {
            file: name.to_string(),
            message: format!("unsupported bit depth {:?}", info.bit_depth),
        });
    }
    let format = match info.color_type {
        png::ColorType::Grayscale => PixelFormat::Gray,
        png::ColorType::Rgb => PixelFormat::Rgb,
        png::ColorType::Rgba => PixelFormat::Rgba,
        other => {
            return Err(Error::Image {
                file: name.to_string(),
                message: format!("unsupported colour type {other:?}"),
            })
        }
    };
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, format, buf))
}
