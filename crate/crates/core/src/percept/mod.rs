//! Editable-region masks and mask-suppressed embeddings.
//!
//! Every duplicate search runs on [`MaskedEmbedding`]s: the editable region of
//! a product mockup (where a customer design goes) is segmented, flattened to
//! a fill color, and only then embedded. Two mockups that differ only inside
//! the editable region therefore embed to the same vector.

mod http;
mod stub;

use std::collections::BTreeSet;

use async_trait::async_trait;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, ImagingError};
use crate::transport::TransportError;

pub use http::{HttpEmbedder, HttpSegmenter};
pub use stub::{stub_extract, stub_extract_image, KnownRegion, StubExtractor, StubSegmenter, STUB_DIM};

/// Fill color used when a mask covers the whole image.
pub const FALLBACK_FILL: Rgb<u8> = Rgb([128, 128, 128]);

#[derive(Debug, Error)]
pub enum PerceptError {
    #[error("segmentation class {0:?} is not registered")]
    UnknownClass(String),
    #[error("mask is {mask_w}x{mask_h} but image is {img_w}x{img_h}")]
    DimensionMismatch {
        mask_w: u32,
        mask_h: u32,
        img_w: u32,
        img_h: u32,
    },
    #[error("invalid mask encoding: {0}")]
    BadRle(String),
    #[error("provider failure: {0}")]
    Provider(#[from] TransportError),
    #[error("embedding provider returned an empty or non-finite vector")]
    BadVector,
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Labels a segmenter may be asked for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRegistry {
    labels: BTreeSet<String>,
}

impl ClassRegistry {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    pub fn insert(&mut self, label: &str) {
        self.labels.insert(label.to_string());
    }
}

impl Default for ClassRegistry {
    fn default() -> Self {
        Self::new([
            "bag", "blanket", "canvas", "cup", "curtain", "cushion", "dress", "hoodie", "mat",
            "mug", "phone-case", "pillow", "poster", "rug", "seat-cover", "shoe", "sleeve",
            "t-shirt", "tank-top", "tapestry", "towel", "wheel-cover",
        ])
    }
}

/// Per-pixel editable-region mask, row-major, `true` = editable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    pub class_label: String,
}

impl Mask {
    pub fn empty(width: u32, height: u32, class_label: &str) -> Self {
        Self {
            width,
            height,
            bits: vec![false; (width as usize) * (height as usize)],
            class_label: class_label.to_string(),
        }
    }

    pub fn full(width: u32, height: u32, class_label: &str) -> Self {
        Self {
            bits: vec![true; (width as usize) * (height as usize)],
            ..Self::empty(width, height, class_label)
        }
    }

    /// Axis-aligned rectangle, clipped to the image.
    pub fn rect(width: u32, height: u32, x: u32, y: u32, w: u32, h: u32, class_label: &str) -> Self {
        let mut m = Self::empty(width, height, class_label);
        for yy in y..(y.saturating_add(h)).min(height) {
            for xx in x..(x.saturating_add(w)).min(width) {
                m.set(xx, yy, true);
            }
        }
        m
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>, class_label: &str) -> Result<Self, PerceptError> {
        if bits.len() != (width as usize) * (height as usize) {
            return Err(PerceptError::BadRle(format!(
                "{} bits for {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
            class_label: class_label.to_string(),
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y as usize) * (self.width as usize) + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[(y as usize) * w + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn coverage(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)` of the true pixels.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    pub fn union(&self, other: &Mask) -> Result<Mask, PerceptError> {
        self.check_dims(other.width, other.height)?;
        Ok(Mask {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
            ..self.clone()
        })
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: u32) -> Mask {
        if radius == 0 || self.is_empty() {
            return self.clone();
        }
        let r = radius as i64;
        let (w, h) = (self.width as i64, self.height as i64);
        // separable: horizontal pass then vertical pass
        let mut horiz = vec![false; self.bits.len()];
        for y in 0..h {
            for x in 0..w {
                if self.bits[(y * w + x) as usize] {
                    for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                        horiz[(y * w + xx) as usize] = true;
                    }
                }
            }
        }
        let mut out = vec![false; self.bits.len()];
        for y in 0..h {
            for x in 0..w {
                if horiz[(y * w + x) as usize] {
                    for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                        out[(yy * w + x) as usize] = true;
                    }
                }
            }
        }
        Mask {
            bits: out,
            ..self.clone()
        }
    }

    pub fn check_dims(&self, width: u32, height: u32) -> Result<(), PerceptError> {
        if self.width != width || self.height != height {
            return Err(PerceptError::DimensionMismatch {
                mask_w: self.width,
                mask_h: self.height,
                img_w: width,
                img_h: height,
            });
        }
        Ok(())
    }

    pub fn to_rle(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        RleMask {
            width: self.width,
            height: self.height,
            class_label: self.class_label.clone(),
            counts,
        }
    }

    /// Digest over the RLE form; `"none"` is reserved for the absent mask.
    pub fn digest(&self) -> String {
        self.to_rle().digest()
    }
}

/// Run-length encoding of a [`Mask`]: row-major run lengths alternating
/// between unmasked and masked, starting with an (possibly zero) unmasked run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub class_label: String,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn decode(&self) -> Result<Mask, PerceptError> {
        let total = (self.width as usize) * (self.height as usize);
        let mut bits = Vec::with_capacity(total);
        let mut value = false;
        for &c in &self.counts {
            if bits.len() + c as usize > total {
                return Err(PerceptError::BadRle("runs exceed pixel count".into()));
            }
            bits.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        if bits.len() != total {
            return Err(PerceptError::BadRle(format!(
                "runs cover {} of {} pixels",
                bits.len(),
                total
            )));
        }
        Mask::from_bits(self.width, self.height, bits, &self.class_label)
    }

    pub fn digest(&self) -> String {
        imaging::sha256_hex(&serde_json::to_vec(self).expect("rle serializes"))
    }
}

/// How masked pixels are replaced before embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "rgb")]
pub enum FillPolicy {
    /// Per-channel rounded mean of the unmasked pixels.
    #[default]
    Mean,
    Constant([u8; 3]),
}

pub fn fill_color(img: &RgbImage, mask: &Mask, policy: FillPolicy) -> Rgb<u8> {
    match policy {
        FillPolicy::Constant(c) => Rgb(c),
        FillPolicy::Mean => {
            let mut sum = [0u64; 3];
            let mut n = 0u64;
            for (x, y, px) in img.enumerate_pixels() {
                if !mask.get(x, y) {
                    for c in 0..3 {
                        sum[c] += px[c] as u64;
                    }
                    n += 1;
                }
            }
            if n == 0 {
                return FALLBACK_FILL;
            }
            Rgb([
                ((sum[0] + n / 2) / n) as u8,
                ((sum[1] + n / 2) / n) as u8,
                ((sum[2] + n / 2) / n) as u8,
            ])
        }
    }
}

/// Replace the editable region with a single fill color. Pixels outside the
/// mask are copied unchanged.
pub fn mask_fill(img: &RgbImage, mask: &Mask, policy: FillPolicy) -> Result<RgbImage, PerceptError> {
    mask.check_dims(img.width(), img.height())?;
    let color = fill_color(img, mask, policy);
    let mut out = img.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(x, y) {
            *px = color;
        }
    }
    Ok(out)
}

/// Byte-level wrapper over [`mask_fill`]: decodes, fills, re-encodes PNG.
pub fn mask_fill_bytes(image: &[u8], mask: &Mask, policy: FillPolicy) -> Result<Vec<u8>, PerceptError> {
    let img = imaging::decode(image)?;
    Ok(imaging::encode_png(&mask_fill(&img, mask, policy)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedEmbedding {
    pub vector: Vec<f64>,
    pub dim: usize,
    pub provider_id: String,
    pub image_digest: String,
    /// Digest of the mask applied before embedding, or `"none"`.
    pub mask_digest: String,
}

impl MaskedEmbedding {
    pub fn norm_error(&self) -> f64 {
        (self.vector.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs()
    }
}

#[async_trait]
pub trait Segmenter: Send + Sync {
    fn id(&self) -> &str;
    /// Mask of `class_label` in `image`; an absent class yields an empty mask.
    async fn segment_image(&self, image: &RgbImage, class_label: &str) -> Result<Mask, PerceptError>;
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    /// Raw feature vector; normalization happens in [`masked_embed`].
    async fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, PerceptError>;
}

/// Registry-checked segmentation with a dimension check on the result.
pub async fn segment(
    segmenter: &dyn Segmenter,
    registry: &ClassRegistry,
    image: &RgbImage,
    class_label: &str,
) -> Result<Mask, PerceptError> {
    if !registry.contains(class_label) {
        return Err(PerceptError::UnknownClass(class_label.to_string()));
    }
    let mask = segmenter.segment_image(image, class_label).await?;
    mask.check_dims(image.width(), image.height())?;
    Ok(mask)
}

/// `embed(mask_fill(image, mask))`, or `embed(image)` without a mask, L2
/// normalized.
pub async fn masked_embed(
    embedder: &dyn Embedder,
    image: &RgbImage,
    image_digest: &str,
    mask: Option<&Mask>,
    policy: FillPolicy,
) -> Result<MaskedEmbedding, PerceptError> {
    let (raw, mask_digest) = match mask {
        Some(m) => {
            let filled = mask_fill(image, m, policy)?;
            (embedder.embed_image(&filled).await?, m.digest())
        }
        None => (embedder.embed_image(image).await?, "none".to_string()),
    };
    if raw.is_empty() || raw.iter().any(|x| !x.is_finite()) {
        return Err(PerceptError::BadVector);
    }
    let vector = imaging::normalize(raw);
    Ok(MaskedEmbedding {
        dim: vector.len(),
        vector,
        provider_id: embedder.id().to_string(),
        image_digest: image_digest.to_string(),
        mask_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn rle_round_trip_and_coverage() {
        let m = Mask::rect(10, 6, 2, 1, 4, 3, "rug");
        assert_eq!(m.count(), 12);
        assert!((m.coverage() - 12.0 / 60.0).abs() < 1e-12);
        let rle = m.to_rle();
        assert_eq!(rle.counts.iter().sum::<u32>(), 60);
        assert_eq!(rle.decode().unwrap(), m);
        let full = Mask::full(3, 3, "rug");
        assert_eq!(full.to_rle().counts, vec![0, 9]);
        assert_eq!(full.to_rle().decode().unwrap(), full);
    }

    #[test]
    fn bad_rle_rejected() {
        let rle = RleMask {
            width: 2,
            height: 2,
            class_label: "rug".into(),
            counts: vec![1, 1],
        };
        assert!(rle.decode().is_err());
    }

    #[test]
    fn empty_mask_fill_is_identity() {
        let img = noise(20, 12, 1);
        let out = mask_fill(&img, &Mask::empty(20, 12, "rug"), FillPolicy::Mean).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_mask_uses_mid_gray() {
        let img = noise(8, 8, 2);
        let out = mask_fill(&img, &Mask::full(8, 8, "rug"), FillPolicy::Mean).unwrap();
        assert!(out.pixels().all(|p| *p == FALLBACK_FILL));
    }

    #[test]
    fn dims_must_match() {
        let img = noise(8, 8, 3);
        assert!(matches!(
            mask_fill(&img, &Mask::empty(8, 9, "rug"), FillPolicy::Mean),
            Err(PerceptError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn siblings_fill_identically() {
        let a = noise(32, 32, 4);
        let mut b = a.clone();
        let m = Mask::rect(32, 32, 8, 8, 10, 12, "rug");
        for y in 8..20 {
            for x in 8..18 {
                b.put_pixel(x, y, Rgb([255, 0, (x * y) as u8]));
            }
        }
        assert_ne!(a, b);
        let fa = mask_fill_bytes(&imaging::encode_png(&a).unwrap(), &m, FillPolicy::Mean).unwrap();
        let fb = mask_fill_bytes(&imaging::encode_png(&b).unwrap(), &m, FillPolicy::Mean).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn dilation_grows_rectangle() {
        let m = Mask::rect(20, 20, 5, 5, 2, 2, "rug");
        let d = m.dilate(2);
        assert_eq!(d.bounding_box(), Some((3, 3, 9, 9)));
        assert_eq!(d.count(), 36);
        assert_eq!(m.dilate(0), m);
    }

    #[tokio::test]
    async fn unregistered_class_errors() {
        let seg = StubSegmenter::default();
        let img = noise(8, 8, 5);
        let err = segment(&seg, &ClassRegistry::default(), &img, "spaceship").await;
        assert!(matches!(err, Err(PerceptError::UnknownClass(_))));
        let ok = segment(&seg, &ClassRegistry::default(), &img, "rug").await.unwrap();
        assert_eq!(ok.coverage(), 0.0);
    }

    proptest! {
        #[test]
        fn fill_never_touches_outside(
            seed in any::<u64>(),
            x in 0u32..24, y in 0u32..24, w in 0u32..24, h in 0u32..24,
            constant in any::<bool>(),
        ) {
            let img = noise(24, 24, seed);
            let m = Mask::rect(24, 24, x, y, w, h, "rug");
            let policy = if constant { FillPolicy::Constant([1, 2, 3]) } else { FillPolicy::Mean };
            let out = mask_fill(&img, &m, policy).unwrap();
            for (x, y, p) in img.enumerate_pixels() {
                if !m.get(x, y) {
                    prop_assert_eq!(p, out.get_pixel(x, y));
                }
            }
        }
    }
}
