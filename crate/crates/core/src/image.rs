//! RGB images with 8-bit channels.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{PlvmError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub id: String,
    width: usize,
    height: usize,
    /// Row-major `height × width × 3`.
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(id: impl Into<String>, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(PlvmError::InvalidImage(format!("zero-sized image {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(PlvmError::InvalidImage(format!(
                "{width}x{height}x3 image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(id, width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resize; identity when the size already matches.
    pub fn resized(&self, width: usize, height: usize) -> Result<Image> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let out = image::imageops::resize(&self.to_rgb(), width as u32, height as u32, FilterType::Triangle);
        Image::new(self.id.clone(), width, height, out.into_raw())
    }

    fn to_rgb(&self) -> RgbImage {
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer size checked at construction")
    }

    pub fn decode(id: impl Into<String>, bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::new(id, w as usize, h as usize, img.into_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Loads any format the `image` crate understands; the id is the file stem.
    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| PlvmError::io(path, e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Image::decode(id, &bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| PlvmError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_size_and_bad_buffers() {
        assert!(Image::new("a", 0, 4, vec![]).is_err());
        assert!(Image::new("a", 2, 2, vec![0; 11]).is_err());
        assert!(Image::new("a", 2, 2, vec![0; 12]).is_ok());
    }

    #[test]
    fn png_round_trip() {
        let mut img = Image::filled("x", 3, 2, [10, 20, 30]).unwrap();
        img.put_pixel(2, 1, [255, 0, 7]);
        let back = Image::decode("x", &img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn resize_changes_geometry() {
        let img = Image::filled("x", 10, 6, [1, 2, 3]).unwrap();
        let r = img.resized(4, 4).unwrap();
        assert_eq!((r.width(), r.height()), (4, 4));
        assert_eq!(r.pixel(0, 0), [1, 2, 3]);
    }
}
