//! Raster helpers shared by every stage: canonical PNG encoding, content
//! digests and luminance.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("undecodable image: {0}")]
    Decode(String),
    #[error("png encode failed: {0}")]
    Encode(String),
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage, ImagingError> {
    let img = image::load_from_memory(bytes).map_err(|e| ImagingError::Decode(e.to_string()))?;
    Ok(img.to_rgb8())
}

/// Encodes as 8-bit RGB PNG with fixed encoder settings. Two equal rasters
/// always produce equal bytes.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ImagingError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decode-then-reencode. The result is independent of the producer's encoder.
pub fn canonicalize(bytes: &[u8]) -> Result<Vec<u8>, ImagingError> {
    encode_png(&decode(bytes)?)
}

/// Digest of the canonical encoding of a raster.
pub fn digest_of(img: &RgbImage) -> Result<String, ImagingError> {
    Ok(sha256_hex(&encode_png(img)?))
}

/// Rec. 601 luma on the 0-255 scale.
#[inline]
pub fn luma(px: &Rgb<u8>) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

pub fn luma_plane(img: &RgbImage) -> Vec<f64> {
    img.pixels().map(luma).collect()
}

/// Mean of `cells_x` x `cells_y` luminance cells. Cell boundaries are
/// `floor(i * W / cells)`, so every pixel belongs to exactly one cell.
pub fn luma_grid(img: &RgbImage, cells_x: u32, cells_y: u32) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let mut sums = vec![0.0f64; (cells_x * cells_y) as usize];
    let mut counts = vec![0u64; sums.len()];
    for (x, y, px) in img.enumerate_pixels() {
        let cx = (x as u64 * cells_x as u64 / w as u64) as usize;
        let cy = (y as u64 * cells_y as u64 / h as u64) as usize;
        let idx = cy * cells_x as usize + cx;
        sums[idx] += luma(px);
        counts[idx] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Subtract the mean, then scale to unit L2 norm. An all-zero residual maps to
/// the first basis vector so the output is always unit norm.
pub fn center_and_normalize(mut v: Vec<f64>) -> Vec<f64> {
    if v.is_empty() {
        return v;
    }
    let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    // cancellation leaves ~1e-14 noise on constant input; treat it as zero
    if v.iter().all(|x| x.abs() <= 1e-9 * scale) {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    normalize(v)
}

/// L2 normalization with the basis-vector fallback for zero input.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Digest of a unit vector, computed over its little-endian f64 bytes.
pub fn vector_digest(v: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_is_deterministic() {
        let img = RgbImage::from_fn(17, 9, |x, y| Rgb([x as u8, y as u8, (x * y) as u8]));
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
        let round = decode(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(round, img);
    }

    #[test]
    fn zero_vector_normalizes_to_e1() {
        let v = center_and_normalize(vec![5.0; 8]);
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grid_covers_odd_sizes() {
        let img = RgbImage::from_pixel(37, 23, Rgb([10, 10, 10]));
        let g = luma_grid(&img, 16, 16);
        assert_eq!(g.len(), 256);
        assert!(g.iter().all(|&x| (x - 10.0).abs() < 1e-9));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode(b"not a png").is_err());
    }
}
