//! PNG and PFM encoding, plus atomic file writes.

use crate::raster::{AlphaMap, DepthMap, InstanceMask};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage, Rgba, RgbaImage};
use std::fs;
use std::io::{self, Cursor, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("instance id {0} does not fit a 16-bit mask")]
    MaskOverflow(u32),
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>, ImageIoError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>, ImageIoError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage, ImageIoError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

pub fn decode_png_gray(bytes: &[u8]) -> Result<GrayImage, ImageIoError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8())
}

pub fn png_base64_rgb(img: &RgbImage) -> Result<String, ImageIoError> {
    Ok(STANDARD.encode(encode_png_rgb(img)?))
}

pub fn png_base64_gray(img: &GrayImage) -> Result<String, ImageIoError> {
    Ok(STANDARD.encode(encode_png_gray(img)?))
}

pub fn base64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn base64_decode(text: &str) -> Result<Vec<u8>, ImageIoError> {
    Ok(STANDARD.decode(text)?)
}

/// RGBA PNG from straight color plus an opacity map in `[0, 1]`.
pub fn encode_png_rgba(rgb: &RgbImage, alpha: &AlphaMap) -> Result<Vec<u8>, ImageIoError> {
    let img = RgbaImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let [r, g, b] = rgb.get_pixel(x, y).0;
        let a = (alpha.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgba([r, g, b, a])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// 16-bit grayscale PNG; 0 is background.
pub fn encode_mask_png(mask: &InstanceMask) -> Result<Vec<u8>, ImageIoError> {
    if let Some(&id) = mask.iter().find(|&&id| id > u16::MAX as u32) {
        return Err(ImageIoError::MaskOverflow(id));
    }
    let data: Vec<u16> = mask.iter().map(|&id| id as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(mask.width(), mask.height(), data).expect("sized from mask");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Single-channel little-endian PFM. Rows are stored bottom-up as the format
/// requires; misses (infinite depth) are written as `+inf`.
pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = depth.dimensions();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(depth.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

/// Writes through a sibling temporary file and renames, so an interrupted
/// run never leaves a truncated product behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use image::Rgb;

    #[test]
    fn png_roundtrip() {
        let rgb = RgbImage::from_fn(7, 5, |x, y| Rgb([x as u8 * 30, y as u8 * 40, 9]));
        assert_eq!(decode_png_rgb(&encode_png_rgb(&rgb).unwrap()).unwrap(), rgb);
        let b64 = png_base64_rgb(&rgb).unwrap();
        assert_eq!(decode_png_rgb(&base64_decode(&b64).unwrap()).unwrap(), rgb);
        let g = GrayImage::from_fn(3, 3, |x, y| Luma([(x * 3 + y) as u8]));
        assert_eq!(decode_png_gray(&encode_png_gray(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn mask_and_pfm() {
        let m = Raster::from_vec(2, 1, vec![0u32, 70000]).unwrap();
        assert!(matches!(encode_mask_png(&m), Err(ImageIoError::MaskOverflow(70000))));
        let m = Raster::from_vec(2, 1, vec![0u32, 513]).unwrap();
        let back = image::load_from_memory(&encode_mask_png(&m).unwrap()).unwrap().to_luma16();
        assert_eq!(back.as_raw(), &vec![0u16, 513]);
        let d = Raster::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pfm = encode_pfm(&d);
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&pfm[..header.len()], header);
        assert_eq!(&pfm[header.len()..header.len() + 4], &3.0f32.to_le_bytes());
    }

    #[test]
    fn atomic_write_creates_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/c.bin");
        write_atomic(&p, b"xyz").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"xyz");
        assert!(!dir.path().join("a/b/c.bin.partial").exists());
    }
}
