//! SHA-256 helpers used for content addressing.

use image::{GrayImage, RgbImage};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of raw pixels, independent of any file encoder:
/// `SHA-256("{kind}:{width}x{height}:" || pixel bytes)`.
pub fn pixels_digest(kind: &str, width: u32, height: u32, pixels: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{kind}:{width}x{height}:").as_bytes());
    h.update(pixels);
    hex::encode(h.finalize())
}

pub fn gray_digest(img: &GrayImage) -> String {
    pixels_digest("L8", img.width(), img.height(), img.as_raw())
}

pub fn rgb_digest(img: &RgbImage) -> String {
    pixels_digest("RGB8", img.width(), img.height(), img.as_raw())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn dimensions_participate() {
        let a = pixels_digest("L8", 2, 1, &[0, 0]);
        let b = pixels_digest("L8", 1, 2, &[0, 0]);
        assert_ne!(a, b);
    }
}
