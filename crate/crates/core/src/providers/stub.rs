use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{GeneratedImage, GenerationRequest, Provider, ProviderError};
use crate::imaging;
use crate::percept::Mask;
use crate::synthcorpus::{composite, BlendMode};

/// Side of the block lattice painted by [`stub_image`].
const STUB_BLOCKS: u32 = 32;
/// Step count at which stub images reach full contrast.
const STUB_FULL_STEPS: u32 = 10;

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&h.finalize()[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Deterministic pseudo-random raster: a 32x32 lattice of random colours,
/// derived from `hash(prompt, seed)`.
pub fn stub_image(prompt: &str, seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = rng_for(&[b"stub-image", prompt.as_bytes(), &seed.to_le_bytes()]);
    let colors: Vec<Rgb<u8>> = (0..STUB_BLOCKS * STUB_BLOCKS)
        .map(|_| Rgb([rng.random(), rng.random(), rng.random()]))
        .collect();
    RgbImage::from_fn(width, height, |x, y| {
        let bx = (x as u64 * STUB_BLOCKS as u64 / width as u64) as u32;
        let by = (y as u64 * STUB_BLOCKS as u64 / height as u64) as u32;
        colors[(by * STUB_BLOCKS + bx) as usize]
    })
}

/// A template the stub reproduces for prompts naming `category`: the base
/// image stays fixed and only the masked region changes with the seed.
#[derive(Debug, Clone)]
pub struct StubPlant {
    pub category: String,
    pub base: RgbImage,
    pub mask: Mask,
}

impl StubPlant {
    pub fn matches(&self, prompt: &str) -> bool {
        prompt.to_lowercase().contains(&self.category.to_lowercase())
    }

    fn render(&self, prompt: &str, seed: u64, width: u32, height: u32) -> RgbImage {
        let (base, mask) = if self.base.dimensions() == (width, height) {
            (self.base.clone(), self.mask.clone())
        } else {
            let base = imageops::resize(&self.base, width, height, imageops::FilterType::Nearest);
            let (mw, mh) = (self.mask.width(), self.mask.height());
            let mut m = Mask::empty(width, height, &self.mask.class_label);
            for y in 0..height {
                for x in 0..width {
                    let sx = (x as u64 * mw as u64 / width as u64) as u32;
                    let sy = (y as u64 * mh as u64 / height as u64) as u32;
                    m.set(x, y, self.mask.get(sx, sy));
                }
            }
            (base, m)
        };
        let Some((x0, y0, x1, y1)) = mask.bounding_box() else {
            return base;
        };
        let pattern = stub_image(&format!("plant-fill:{prompt}"), seed, x1 - x0, y1 - y0);
        composite(&base, &mask, &pattern, BlendMode::Replace).expect("mask fits base by construction")
    }
}

/// Scale contrast toward the per-channel mean; mimics an under-denoised
/// sample at low step counts.
fn apply_steps(img: &mut RgbImage, steps: u32) {
    if steps >= STUB_FULL_STEPS {
        return;
    }
    let factor = (steps as f64 / STUB_FULL_STEPS as f64).powi(2);
    let n = (img.width() as f64) * (img.height() as f64);
    let mut mean = [0.0f64; 3];
    for p in img.pixels() {
        for c in 0..3 {
            mean[c] += p[c] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for p in img.pixels_mut() {
        for c in 0..3 {
            let v = mean[c] + (p[c] as f64 - mean[c]) * factor;
            p[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// PNG bytes for `(prompt, seed)`; the planted template when one matches.
pub fn stub_generate(prompt: &str, seed: u64, width: u32, height: u32, planted: Option<&StubPlant>) -> Vec<u8> {
    let img = match planted.filter(|p| p.matches(prompt)) {
        Some(p) => p.render(prompt, seed, width, height),
        None => stub_image(prompt, seed, width, height),
    };
    imaging::encode_png(&img).expect("in-memory png encode")
}

/// Deterministic local provider. Counts calls so tests can assert cache
/// behaviour.
#[derive(Debug)]
pub struct StubProvider {
    id: String,
    plants: Arc<Vec<StubPlant>>,
    sharp_early: BTreeSet<String>,
    honor_steps: bool,
    calls: AtomicUsize,
}

impl Default for StubProvider {
    fn default() -> Self {
        Self::new("stub")
    }
}

impl StubProvider {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            plants: Arc::new(Vec::new()),
            sharp_early: BTreeSet::new(),
            honor_steps: true,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_plants(mut self, plants: Vec<StubPlant>) -> Self {
        self.plants = Arc::new(plants);
        self
    }

    /// Prompts whose low-step output is already at full contrast.
    pub fn with_sharp_early<I: IntoIterator<Item = String>>(mut self, prompts: I) -> Self {
        self.sharp_early.extend(prompts);
        self
    }

    /// A provider that ignores `steps` entirely.
    pub fn ignoring_steps(mut self) -> Self {
        self.honor_steps = false;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn render(&self, req: &GenerationRequest) -> RgbImage {
        let plant = self.plants.iter().find(|p| p.matches(&req.prompt));
        let mut img = match plant {
            Some(p) => p.render(&req.prompt, req.seed, req.width, req.height),
            None => stub_image(&req.prompt, req.seed, req.width, req.height),
        };
        if self.honor_steps && !self.sharp_early.contains(&req.prompt) {
            apply_steps(&mut img, req.steps);
        }
        img
    }
}

#[async_trait]
impl Provider for StubProvider {
    fn id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<GeneratedImage, ProviderError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let img = self.render(request);
        let png = imaging::encode_png(&img)?;
        let mut meta = BTreeMap::new();
        meta.insert("model_id".to_string(), format!("{}-v1", self.id));
        Ok(GeneratedImage { png, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str, seed: u64) -> GenerationRequest {
        GenerationRequest {
            prompt: prompt.into(),
            seed,
            steps: 50,
            width: 64,
            height: 64,
            guidance: 7.5,
            provider_id: "stub".into(),
        }
    }

    #[tokio::test]
    async fn deterministic_and_seed_sensitive() {
        let p = StubProvider::default();
        let a = p.generate(&req("Floral Area Rug", 0)).await.unwrap();
        let b = p.generate(&req("Floral Area Rug", 0)).await.unwrap();
        let c = p.generate(&req("Floral Area Rug", 1)).await.unwrap();
        assert_eq!(imaging::sha256_hex(&a.png), imaging::sha256_hex(&b.png));
        assert_ne!(imaging::sha256_hex(&a.png), imaging::sha256_hex(&c.png));
        assert_eq!(p.calls(), 3);
    }

    #[tokio::test]
    async fn zero_steps_rejected() {
        let mut r = req("x", 0);
        r.steps = 0;
        assert!(StubProvider::default().generate(&r).await.is_err());
    }

    #[test]
    fn plant_keeps_outside_fixed() {
        let base = stub_image("base", 3, 64, 64);
        let mask = Mask::rect(64, 64, 10, 12, 30, 20, "rug");
        let plant = StubPlant {
            category: "Area Rug".into(),
            base,
            mask: mask.clone(),
        };
        let imgs: Vec<RgbImage> = (0..6)
            .map(|s| imaging::decode(&stub_generate("Floral Area Rug", s, 64, 64, Some(&plant))).unwrap())
            .collect();
        for pair in imgs.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let mut inside_diff = false;
            for (x, y, p) in a.enumerate_pixels() {
                if mask.get(x, y) {
                    inside_diff |= p != b.get_pixel(x, y);
                } else {
                    assert_eq!(p, b.get_pixel(x, y));
                }
            }
            assert!(inside_diff);
        }
        // prompts not naming the category are untouched
        let other = stub_generate("Floral Coffee Mug", 0, 64, 64, Some(&plant));
        assert_eq!(other, stub_generate("Floral Coffee Mug", 0, 64, 64, None));
    }
}
