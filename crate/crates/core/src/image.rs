//! 8-bit RGB raster images and their PNG encoding.

use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pixel buffer has {actual} pixels, expected {width}x{height}")]
    BadBuffer {
        width: u32,
        height: u32,
        actual: usize,
    },
    #[error("crop [{x},{y},{w},{h}] is outside the {width}x{height} image or empty")]
    BadCrop {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
}

pub type Rgb = [u8; 3];

/// Row-major RGB image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RasterImage({}x{})", self.width, self.height)
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self, ImageError> {
        if pixels.len() != width as usize * height as usize {
            return Err(ImageError::BadBuffer {
                width,
                height,
                actual: pixels.len(),
            });
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        RasterImage {
            width,
            height,
            pixels: vec![color; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        RasterImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, c: Rgb) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = c;
    }

    /// Paints the rectangle, clipped to the image.
    pub fn fill_rect(&mut self, x: u32, y: u32, w: u32, h: u32, c: Rgb) {
        let x1 = x.saturating_add(w).min(self.width);
        let y1 = y.saturating_add(h).min(self.height);
        for yy in y.min(self.height)..y1 {
            for xx in x.min(self.width)..x1 {
                self.set(xx, yy, c);
            }
        }
    }

    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<RasterImage, ImageError> {
        let fits = w > 0
            && h > 0
            && u64::from(x) + u64::from(w) <= u64::from(self.width)
            && u64::from(y) + u64::from(h) <= u64::from(self.height);
        if !fits {
            return Err(ImageError::BadCrop {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        Ok(RasterImage::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy)))
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(self.pixels.as_flattened())?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<RasterImage, ImageError> {
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        let data = &buf[..info.buffer_size()];
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(ImageError::Unsupported(format!("{other:?}"))),
        };
        let pixels = data
            .chunks_exact(channels)
            .map(|p| match channels {
                1 | 2 => [p[0]; 3],
                _ => [p[0], p[1], p[2]],
            })
            .collect();
        RasterImage::new(info.width, info.height, pixels)
    }

    pub fn to_png_base64(&self) -> Result<String, ImageError> {
        Ok(STANDARD.encode(self.to_png()?))
    }

    pub fn from_png_base64(s: &str) -> Result<RasterImage, ImageError> {
        RasterImage::from_png(&STANDARD.decode(s)?)
    }
}

/// Images serialize as base64-encoded PNG.
impl Serialize for RasterImage {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let s = self.to_png_base64().map_err(serde::ser::Error::custom)?;
        serializer.serialize_str(&s)
    }
}

impl<'de> Deserialize<'de> for RasterImage {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        RasterImage::from_png_base64(&s).map_err(serde::de::Error::custom)
    }
}

pub fn to_hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Parses `#rrggbb` (either case).
pub fn parse_hex(s: &str) -> Option<Rgb> {
    let digits = s.strip_prefix('#')?;
    if digits.len() != 6 || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    let channel = |i: usize| u8::from_str_radix(&digits[i..i + 2], 16).ok();
    Some([channel(0)?, channel(2)?, channel(4)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let img = RasterImage::from_fn(7, 5, |x, y| [x as u8 * 30, y as u8 * 40, 9]);
        let back = RasterImage::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back, img);
        let json = serde_json::to_string(&img).unwrap();
        assert_eq!(serde_json::from_str::<RasterImage>(&json).unwrap(), img);
    }

    #[test]
    fn crop_bounds() {
        let img = RasterImage::from_fn(4, 4, |x, y| [x as u8, y as u8, 0]);
        let c = img.crop(1, 2, 3, 2).unwrap();
        assert_eq!((c.width(), c.height()), (3, 2));
        assert_eq!(c.get(0, 0), [1, 2, 0]);
        assert!(img.crop(2, 0, 3, 1).is_err());
        assert!(img.crop(0, 0, 0, 1).is_err());
        assert_eq!(img.crop(0, 0, 4, 4).unwrap(), img);
    }

    #[test]
    fn buffer_length_checked() {
        assert!(RasterImage::new(2, 2, vec![[0; 3]; 3]).is_err());
    }

    #[test]
    fn hex_colors() {
        assert_eq!(to_hex([0x33, 0x66, 0x99]), "#336699");
        assert_eq!(parse_hex("#FF0000"), Some([255, 0, 0]));
        assert_eq!(parse_hex("ff0000"), None);
        assert_eq!(parse_hex("#ff00"), None);
        assert_eq!(parse_hex("#gg0000"), None);
    }
}
