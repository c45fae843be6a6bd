//! Template-coupled image/caption corpora and planted-ground-truth
//! benchmarks for the detector.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, ImagingError};
use crate::percept::{KnownRegion, Mask};
use crate::prompt_forge::DEFAULT_DESCRIPTORS;
use crate::providers::stub_image;

pub const CATEGORY_PLACEHOLDER: &str = "{category}";
pub const DEFAULT_CAPTION_TEMPLATE: &str = "skg {descriptor} {category}";
pub const DEFAULT_CORPUS_SIZE: u32 = 512;

/// Benchmark categories with a related category used as the foreign caption
/// for planted leakage: `(category, class, sibling, sibling class)`.
pub const SIBLINGS: [(&str, &str, &str, &str); 8] = [
    ("Unisex T-Shirt", "t-shirt", "Tank Top", "tank-top"),
    ("Area Rug", "rug", "Door Mat", "mat"),
    ("Shower Curtain", "curtain", "Beach Towel", "towel"),
    ("Wall Tapestry", "tapestry", "Canvas Wall Art Print", "canvas"),
    ("Coffee Mug", "mug", "Tea Cup", "cup"),
    ("Throw Pillow", "pillow", "Floor Cushion", "cushion"),
    ("Car Seat Covers", "seat-cover", "Steering Wheel Cover", "wheel-cover"),
    ("Phone Case", "phone-case", "Laptop Sleeve", "sleeve"),
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("mask is {mask_w}x{mask_h} but base is {base_w}x{base_h}")]
    MaskMismatch {
        mask_w: u32,
        mask_h: u32,
        base_w: u32,
        base_h: u32,
    },
    #[error("plant spec {category:?}: {reason}")]
    InvalidSpec { category: String, reason: String },
    #[error("benchmark: {0}")]
    InvalidBenchmark(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("writing {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    #[default]
    Replace,
    /// Weight of the pattern, in `[0, 1]`.
    Alpha(f64),
    Multiply,
}

fn blend_px(base: Rgb<u8>, pat: Rgb<u8>, mode: BlendMode) -> Rgb<u8> {
    match mode {
        BlendMode::Replace => pat,
        BlendMode::Alpha(a) => {
            let a = a.clamp(0.0, 1.0);
            Rgb(std::array::from_fn(|c| {
                (a * pat[c] as f64 + (1.0 - a) * base[c] as f64).round() as u8
            }))
        }
        BlendMode::Multiply => Rgb(std::array::from_fn(|c| {
            ((base[c] as u32 * pat[c] as u32 + 127) / 255) as u8
        })),
    }
}

/// Paint `pattern`, nearest-neighbour scaled to the mask's bounding box, into
/// the masked pixels of `base`. Everything outside the mask is copied.
pub fn composite(base: &RgbImage, mask: &Mask, pattern: &RgbImage, blend: BlendMode) -> Result<RgbImage, SynthError> {
    if mask.width() != base.width() || mask.height() != base.height() {
        return Err(SynthError::MaskMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            base_w: base.width(),
            base_h: base.height(),
        });
    }
    let mut out = base.clone();
    let Some((x0, y0, x1, y1)) = mask.bounding_box() else {
        return Ok(out);
    };
    let (bw, bh) = ((x1 - x0) as u64, (y1 - y0) as u64);
    let (pw, ph) = (pattern.width() as u64, pattern.height() as u64);
    if pw == 0 || ph == 0 {
        return Ok(out);
    }
    for y in y0..y1 {
        for x in x0..x1 {
            if !mask.get(x, y) {
                continue;
            }
            let px = ((x - x0) as u64 * pw / bw) as u32;
            let py = ((y - y0) as u64 * ph / bh) as u32;
            let p = blend_px(*base.get_pixel(x, y), *pattern.get_pixel(px, py), blend);
            out.put_pixel(x, y, p);
        }
    }
    Ok(out)
}

/// Byte-level wrapper over [`composite`].
pub fn composite_bytes(base: &[u8], mask: &Mask, pattern: &[u8], blend: BlendMode) -> Result<Vec<u8>, SynthError> {
    let out = composite(&imaging::decode(base)?, mask, &imaging::decode(pattern)?, blend)?;
    Ok(imaging::encode_png(&out)?)
}

/// Overwrite `(x, y, w, h)` with two-colour stripes, two pixels per period.
/// Horizontal and vertical stripes of the same colours have equal means over
/// any even-aligned sub-rectangle, so a swap moves pixels without moving
/// coarse luminance statistics.
pub fn draw_stripes(img: &mut RgbImage, rect: (u32, u32, u32, u32), vertical: bool, colors: [Rgb<u8>; 2]) {
    let (x0, y0, w, h) = rect;
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            let k = if vertical { x } else { y };
            img.put_pixel(x, y, colors[(k % 2) as usize]);
        }
    }
}

/// Swap the object at `rect` for a semantically similar one: horizontal
/// stripes become vertical stripes of the same colours.
pub fn object_swap(img: &RgbImage, rect: (u32, u32, u32, u32), colors: [Rgb<u8>; 2]) -> RgbImage {
    let mut out = img.clone();
    draw_stripes(&mut out, rect, true, colors);
    out
}

#[derive(Debug, Clone)]
pub struct TemplateBase {
    pub image: RgbImage,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct Pattern {
    pub descriptor: String,
    pub image: RgbImage,
}

/// Patterns overlaid on one or more template bases of a category.
#[derive(Debug, Clone)]
pub struct PlantSpec {
    pub category: String,
    pub segmentation_class: Option<String>,
    pub bases: Vec<TemplateBase>,
    pub patterns: Vec<Pattern>,
    pub blend: BlendMode,
    pub caption_template: String,
}

impl PlantSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: &str| SynthError::InvalidSpec {
            category: self.category.clone(),
            reason: reason.to_string(),
        };
        if self.category.trim().is_empty() {
            return Err(bad("empty category"));
        }
        if self.bases.is_empty() {
            return Err(bad("no base images"));
        }
        if self.patterns.is_empty() {
            return Err(bad("no patterns"));
        }
        for p in ["{descriptor}", CATEGORY_PLACEHOLDER] {
            if !self.caption_template.contains(p) {
                return Err(bad(&format!("caption template lacks {p}")));
            }
        }
        for b in &self.bases {
            if b.mask.width() != b.image.width() || b.mask.height() != b.image.height() {
                return Err(SynthError::MaskMismatch {
                    mask_w: b.mask.width(),
                    mask_h: b.mask.height(),
                    base_w: b.image.width(),
                    base_h: b.image.height(),
                });
            }
        }
        if let BlendMode::Alpha(a) = self.blend {
            if !(0.0..=1.0).contains(&a) {
                return Err(bad("alpha outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn caption(&self, descriptor: &str) -> String {
        render_caption(&self.caption_template, descriptor, &self.category)
    }
}

pub fn render_caption(template: &str, descriptor: &str, category: &str) -> String {
    template
        .replace("{descriptor}", "\u{0}D")
        .replace(CATEGORY_PLACEHOLDER, "\u{0}C")
        .replace("\u{0}D", descriptor)
        .replace("\u{0}C", category)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakagePlant {
    /// Truth group whose template was reused.
    pub source_group: String,
    pub foreign_category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPair {
    pub image_digest: String,
    pub caption: String,
    pub descriptor: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation_class: Option<String>,
    pub truth_group_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leakage: Option<LeakagePlant>,
}

#[derive(Debug, Clone, Default)]
pub struct LabeledCorpus {
    pub pairs: Vec<CorpusPair>,
    pub images: BTreeMap<String, RgbImage>,
    /// Planted editable regions, for the stub segmenter.
    pub atlas: Vec<KnownRegion>,
}

impl LabeledCorpus {
    /// Truth group id to its sorted member digests.
    pub fn truth_groups(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for p in &self.pairs {
            if let Some(g) = &p.truth_group_id {
                out.entry(g.clone()).or_default().push(p.image_digest.clone());
            }
        }
        out.values_mut().for_each(|v| {
            v.sort();
            v.dedup();
        });
        out
    }

    /// `(image_digest, foreign_category)` of every planted leakage.
    pub fn planted_leakage(&self) -> Vec<(String, String)> {
        self.pairs
            .iter()
            .filter_map(|p| p.leakage.as_ref().map(|l| (p.image_digest.clone(), l.foreign_category.clone())))
            .collect()
    }

    /// Corpus manifest, one JSON object per pair.
    pub fn manifest_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p).expect("pair serializes");
            out.push(b'\n');
        }
        out
    }

    /// Flat export for external fine-tuning tools: `NNNN.png` per pair,
    /// `captions.txt` (`file<TAB>caption`) and `corpus.jsonl`.
    pub fn export(&self, dir: &Path) -> Result<PathBuf, SynthError> {
        let io = |path: &Path, e: std::io::Error| SynthError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut captions = String::new();
        for (i, p) in self.pairs.iter().enumerate() {
            let name = format!("{i:04}.png");
            let path = dir.join(&name);
            let png = imaging::encode_png(&self.images[&p.image_digest])?;
            std::fs::write(&path, png).map_err(|e| io(&path, e))?;
            let _ = writeln!(captions, "{name}\t{}", p.caption);
        }
        let cap_path = dir.join("captions.txt");
        std::fs::write(&cap_path, captions).map_err(|e| io(&cap_path, e))?;
        let manifest = dir.join("corpus.jsonl");
        std::fs::write(&manifest, self.manifest_jsonl()).map_err(|e| io(&manifest, e))?;
        Ok(manifest)
    }
}

fn push(corpus: &mut LabeledCorpus, img: RgbImage, pair: CorpusPair) {
    corpus.images.entry(pair.image_digest.clone()).or_insert(img);
    corpus.pairs.push(pair);
}

/// One pair per `(spec, base, pattern)`. All patterns on one base share the
/// truth group `s{spec}-b{base}`.
pub fn build_corpus(specs: &[PlantSpec]) -> Result<LabeledCorpus, SynthError> {
    for s in specs {
        s.validate()?;
    }
    let jobs: Vec<(usize, usize, usize)> = specs
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            (0..s.bases.len()).flat_map(move |bi| (0..s.patterns.len()).map(move |pi| (si, bi, pi)))
        })
        .collect();
    let rendered: Vec<(RgbImage, String)> = jobs
        .par_iter()
        .map(|&(si, bi, pi)| {
            let s = &specs[si];
            let b = &s.bases[bi];
            let img = composite(&b.image, &b.mask, &s.patterns[pi].image, s.blend)?;
            let digest = imaging::digest_of(&img)?;
            Ok((img, digest))
        })
        .collect::<Result<_, SynthError>>()?;
    let mut corpus = LabeledCorpus::default();
    for spec in specs {
        for b in &spec.bases {
            let mut mask = b.mask.clone();
            if let Some(c) = &spec.segmentation_class {
                mask.class_label = c.clone();
            }
            corpus.atlas.push(KnownRegion {
                base: b.image.clone(),
                mask,
            });
        }
    }
    for (&(si, bi, pi), (img, digest)) in jobs.iter().zip(rendered) {
        let s = &specs[si];
        let descriptor = s.patterns[pi].descriptor.clone();
        let pair = CorpusPair {
            image_digest: digest,
            caption: s.caption(&descriptor),
            descriptor,
            category: s.category.clone(),
            segmentation_class: s.segmentation_class.clone(),
            truth_group_id: Some(format!("s{si}-b{bi}")),
            leakage: None,
        };
        push(&mut corpus, img, pair);
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkParams {
    pub n_groups: usize,
    pub members_per_group: usize,
    pub n_noise: usize,
    pub leakage_plants: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl BenchmarkParams {
    pub fn new(n_groups: usize, members_per_group: usize, n_noise: usize, leakage_plants: usize) -> Self {
        Self {
            n_groups,
            members_per_group,
            n_noise,
            leakage_plants,
            width: DEFAULT_CORPUS_SIZE,
            height: DEFAULT_CORPUS_SIZE,
            seed: 0,
        }
    }

    /// `GxM+N` with an optional `~L` leakage suffix, e.g. `5x6+20~1`.
    pub fn parse(s: &str) -> Result<Self, SynthError> {
        let bad = || SynthError::InvalidBenchmark(format!("expected GxM+N[~L], got {s:?}"));
        let (main, leak) = match s.split_once('~') {
            Some((m, l)) => (m, l.trim().parse().map_err(|_| bad())?),
            None => (s, 0),
        };
        let (gm, noise) = main.split_once('+').unwrap_or((main, "0"));
        let (g, m) = gm.split_once(['x', 'X']).ok_or_else(bad)?;
        Ok(Self::new(
            g.trim().parse().map_err(|_| bad())?,
            m.trim().parse().map_err(|_| bad())?,
            noise.trim().parse().map_err(|_| bad())?,
            leak,
        ))
    }

    pub fn image_count(&self) -> usize {
        self.n_groups * self.members_per_group + self.n_noise + self.leakage_plants
    }
}

fn category(i: usize) -> (String, &'static str, String, &'static str) {
    let (c, cc, s, sc) = SIBLINGS[i % SIBLINGS.len()];
    let round = i / SIBLINGS.len();
    if round == 0 {
        (c.to_string(), cc, s.to_string(), sc)
    } else {
        (format!("{c} {}", round + 1), cc, format!("{s} {}", round + 1), sc)
    }
}

fn random_rect(rng: &mut ChaCha8Rng, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let w = rng.random_range(width / 4..=width / 2).max(1);
    let h = rng.random_range(height / 4..=height / 2).max(1);
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    (x, y, w, h)
}

/// Planted ground truth: `n_groups` templates with `members_per_group`
/// distinct fills each, `n_noise` unrelated images, and `leakage_plants`
/// images that reuse a group's template under its sibling category.
pub fn plant_benchmark(params: &BenchmarkParams) -> Result<LabeledCorpus, SynthError> {
    let BenchmarkParams {
        n_groups,
        members_per_group,
        n_noise,
        leakage_plants,
        width,
        height,
        seed,
    } = params.clone();
    if members_per_group < 2 {
        return Err(SynthError::InvalidBenchmark("members_per_group must be >= 2".into()));
    }
    if leakage_plants > 0 && n_groups == 0 {
        return Err(SynthError::InvalidBenchmark("leakage plants need at least one group".into()));
    }
    if width < 8 || height < 8 {
        return Err(SynthError::InvalidBenchmark("images must be at least 8x8".into()));
    }

    let mut corpus = LabeledCorpus::default();
    let mut templates = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let (cat, class, _, _) = category(g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(g as u64));
        let base = stub_image(&format!("bench-base:{g}"), seed, width, height);
        let (x, y, w, h) = random_rect(&mut rng, width, height);
        let mask = Mask::rect(width, height, x, y, w, h, class);
        corpus.atlas.push(KnownRegion {
            base: base.clone(),
            mask: mask.clone(),
        });
        templates.push((cat, class, base, mask));
    }

    let fill = |tag: &str, k: usize, mask: &Mask| {
        let (x0, y0, x1, y1) = mask.bounding_box().expect("benchmark masks are non-empty");
        stub_image(&format!("bench-fill:{tag}:{k}"), seed, x1 - x0, y1 - y0)
    };

    for (g, (cat, class, base, mask)) in templates.iter().enumerate() {
        for m in 0..members_per_group {
            let img = composite(base, mask, &fill(&format!("g{g}"), m, mask), BlendMode::Replace)?;
            let descriptor = DEFAULT_DESCRIPTORS[m % DEFAULT_DESCRIPTORS.len()].to_string();
            let pair = CorpusPair {
                image_digest: imaging::digest_of(&img)?,
                caption: format!("{descriptor} {cat}"),
                descriptor,
                category: cat.clone(),
                segmentation_class: Some(class.to_string()),
                truth_group_id: Some(format!("t{g}")),
                leakage: None,
            };
            push(&mut corpus, img, pair);
        }
    }

    for k in 0..n_noise {
        let img = stub_image(&format!("bench-noise:{k}"), seed, width, height);
        let (cat, class, _, _) = category(if n_groups > 0 { k % n_groups } else { k });
        let descriptor = DEFAULT_DESCRIPTORS[k % DEFAULT_DESCRIPTORS.len()].to_string();
        let pair = CorpusPair {
            image_digest: imaging::digest_of(&img)?,
            caption: format!("{descriptor} {cat}"),
            descriptor,
            category: cat,
            segmentation_class: Some(class.to_string()),
            truth_group_id: None,
            leakage: None,
        };
        push(&mut corpus, img, pair);
    }

    for l in 0..leakage_plants {
        let g = l % n_groups;
        let (_, _, base, mask) = &templates[g];
        let (_, _, foreign, foreign_class) = category(g);
        let img = composite(base, mask, &fill(&format!("leak{g}"), l, mask), BlendMode::Replace)?;
        let descriptor = DEFAULT_DESCRIPTORS[l % DEFAULT_DESCRIPTORS.len()].to_string();
        let pair = CorpusPair {
            image_digest: imaging::digest_of(&img)?,
            caption: format!("{descriptor} {foreign}"),
            descriptor,
            category: foreign.clone(),
            segmentation_class: Some(foreign_class.to_string()),
            truth_group_id: None,
            leakage: Some(LeakagePlant {
                source_group: format!("t{g}"),
                foreign_category: foreign,
            }),
        };
        push(&mut corpus, img, pair);
    }
    Ok(corpus)
}
