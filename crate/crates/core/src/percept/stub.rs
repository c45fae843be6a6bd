use async_trait::async_trait;
use image::RgbImage;

use super::{Embedder, MaskedEmbedding, Mask, PerceptError, Segmenter};
use crate::imaging;

/// Length of the stub feature vector: a 16x16 luminance grid.
pub const STUB_DIM: usize = 256;
const STUB_GRID: u32 = 16;

/// 16x16 mean-luminance grid, mean-subtracted and L2 normalized. A constant
/// image has no residual and maps to e1.
pub fn stub_extract_image(img: &RgbImage) -> Vec<f64> {
    imaging::center_and_normalize(imaging::luma_grid(img, STUB_GRID, STUB_GRID))
}

pub fn stub_extract(image: &[u8]) -> Result<MaskedEmbedding, PerceptError> {
    let img = imaging::decode(image)?;
    let vector = stub_extract_image(&img);
    Ok(MaskedEmbedding {
        dim: vector.len(),
        vector,
        provider_id: StubExtractor::ID.to_string(),
        image_digest: imaging::digest_of(&img)?,
        mask_digest: "none".into(),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubExtractor;

impl StubExtractor {
    pub const ID: &'static str = "stub-extract";
}

#[async_trait]
impl Embedder for StubExtractor {
    fn id(&self) -> &str {
        Self::ID
    }

    async fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, PerceptError> {
        Ok(stub_extract_image(image))
    }
}

/// A template whose editable region is known: any image equal to `base`
/// outside `mask` is segmented as `mask`.
#[derive(Debug, Clone)]
pub struct KnownRegion {
    pub base: RgbImage,
    pub mask: Mask,
}

impl KnownRegion {
    fn matches(&self, img: &RgbImage) -> bool {
        if img.dimensions() != self.base.dimensions() {
            return false;
        }
        img.enumerate_pixels()
            .all(|(x, y, p)| self.mask.get(x, y) || p == self.base.get_pixel(x, y))
    }
}

/// Segmenter backed by an atlas of planted templates. It recovers planted
/// rectangles exactly and reports an empty mask for anything else.
#[derive(Debug, Clone, Default)]
pub struct StubSegmenter {
    atlas: Vec<KnownRegion>,
}

impl StubSegmenter {
    pub const ID: &'static str = "stub-segment";

    pub fn new(atlas: Vec<KnownRegion>) -> Self {
        Self { atlas }
    }

    pub fn register(&mut self, region: KnownRegion) {
        self.atlas.push(region);
    }

    pub fn atlas(&self) -> &[KnownRegion] {
        &self.atlas
    }
}

#[async_trait]
impl Segmenter for StubSegmenter {
    fn id(&self) -> &str {
        Self::ID
    }

    async fn segment_image(&self, image: &RgbImage, class_label: &str) -> Result<Mask, PerceptError> {
        let hit = self
            .atlas
            .iter()
            .find(|r| r.mask.class_label == class_label && r.matches(image));
        Ok(match hit {
            Some(r) => r.mask.clone(),
            None => Mask::empty(image.width(), image.height(), class_label),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percept::{masked_embed, FillPolicy};
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blocks(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let colors: Vec<Rgb<u8>> = (0..64).map(|_| Rgb([rng.random(), rng.random(), rng.random()])).collect();
        RgbImage::from_fn(64, 64, |x, y| colors[((y / 8) * 8 + x / 8) as usize])
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn constant_image_maps_to_e1() {
        let img = RgbImage::from_pixel(32, 32, Rgb([40, 90, 200]));
        let v = stub_extract_image(&img);
        assert_eq!(v.len(), STUB_DIM);
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_images_identical_vectors() {
        let a = blocks(1);
        assert_eq!(stub_extract_image(&a), stub_extract_image(&a.clone()));
        let bytes = imaging::encode_png(&a).unwrap();
        let e = stub_extract(&bytes).unwrap();
        assert!(e.norm_error() < 1e-6);
        let filled = crate::percept::mask_fill(&a, &Mask::empty(64, 64, "rug"), FillPolicy::Mean).unwrap();
        assert_eq!(stub_extract_image(&filled), e.vector);
    }

    #[tokio::test]
    async fn planted_rectangle_recovered() {
        let base = blocks(7);
        let mask = Mask::rect(64, 64, 16, 20, 24, 18, "rug");
        let seg = StubSegmenter::new(vec![KnownRegion { base: base.clone(), mask: mask.clone() }]);
        let mut planted = base.clone();
        for y in 20..38 {
            for x in 16..40 {
                planted.put_pixel(x, y, Rgb([(x * 3) as u8, 0, (y * 5) as u8]));
            }
        }
        assert_eq!(seg.segment_image(&planted, "rug").await.unwrap(), mask);
        // wrong class, or an image not derived from the base: nothing found
        assert_eq!(seg.segment_image(&planted, "mug").await.unwrap().coverage(), 0.0);
        assert_eq!(seg.segment_image(&blocks(8), "rug").await.unwrap().coverage(), 0.0);

        let a = masked_embed(&StubExtractor, &planted, "a", Some(&mask), FillPolicy::Mean).await.unwrap();
        let b = masked_embed(&StubExtractor, &base, "b", Some(&mask), FillPolicy::Mean).await.unwrap();
        assert!(cos(&a.vector, &b.vector) >= 0.99);
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.mask_digest, mask.digest());
    }
}
