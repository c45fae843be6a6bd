//! TOML sweep and corpus-synthesis configs.
//!
//! A sweep file is either a serialized [`SweepConfig`] (what promotion
//! writes) or the grid shorthand:
//!
//! ```toml
//! run_label = "demo"
//! provider = "stub"
//! steps = 50
//! width = 512
//! height = 512
//! guidance = 7.5
//! descriptors = ["Floral", "Galaxy"]
//! collocations = ["Area Rug|home|wayfair|rug"]
//! seeds = { start = 0, count = 2 }
//!
//! [[plant]]            # stub provider only
//! category = "Area Rug"
//! class = "rug"
//! mask = [96, 128, 256, 192]
//! ```

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Deserialize;
use thiserror::Error;

use crate::percept::{ClassRegistry, KnownRegion, Mask};
use crate::prompt_forge::{
    default_descriptors, expand_grid, load_collocations, parse_collocations, seed_schedule, Descriptor,
    ForgeError, SweepConfig, DEFAULT_SEED_COUNT, DEFAULT_TEMPLATE,
};
use crate::providers::{stub_image, StubPlant};
use crate::synthcorpus::{BlendMode, Pattern, PlantSpec, SynthError, TemplateBase, DEFAULT_CAPTION_TEMPLATE, DEFAULT_CORPUS_SIZE};
use crate::imaging;

pub const DEFAULT_STEPS: u32 = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_SIZE: u32 = 512;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum SeedSpec {
    List(Vec<u64>),
    Range {
        #[serde(default)]
        start: u64,
        #[serde(default = "default_seed_count")]
        count: u32,
    },
}

fn default_seed_count() -> u32 {
    DEFAULT_SEED_COUNT
}

/// A stub-provider template plant: a procedural base for `category` whose
/// `mask = [x, y, w, h]` region changes with the seed.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PlantEntry {
    pub category: String,
    pub class: String,
    #[serde(default)]
    pub base_seed: u64,
    pub mask: [u32; 4],
}

impl PlantEntry {
    fn base(&self, width: u32, height: u32) -> RgbImage {
        stub_image(&format!("plant-base:{}", self.category), self.base_seed, width, height)
    }

    fn mask(&self, width: u32, height: u32) -> Mask {
        let [x, y, w, h] = self.mask;
        Mask::rect(width, height, x, y, w, h, &self.class)
    }

    pub fn stub_plant(&self, width: u32, height: u32) -> StubPlant {
        StubPlant {
            category: self.category.clone(),
            base: self.base(width, height),
            mask: self.mask(width, height),
        }
    }

    pub fn region(&self, width: u32, height: u32) -> KnownRegion {
        KnownRegion {
            base: self.base(width, height),
            mask: self.mask(width, height),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    #[serde(default = "default_label")]
    run_label: String,
    #[serde(default = "default_provider")]
    provider: String,
    #[serde(default = "default_steps")]
    steps: u32,
    #[serde(default = "default_size")]
    width: u32,
    #[serde(default = "default_size")]
    height: u32,
    #[serde(default = "default_guidance")]
    guidance: f64,
    #[serde(default = "default_template")]
    template: String,
    descriptors: Option<Vec<String>>,
    #[serde(default)]
    collocations: Vec<String>,
    collocations_file: Option<PathBuf>,
    seeds: Option<SeedSpec>,
    #[serde(default)]
    plant: Vec<PlantEntry>,
    #[serde(default)]
    sharp_early: Vec<String>,
}

fn default_label() -> String {
    "sweep".into()
}
fn default_provider() -> String {
    "stub".into()
}
fn default_steps() -> u32 {
    DEFAULT_STEPS
}
fn default_size() -> u32 {
    DEFAULT_SIZE
}
fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}
fn default_template() -> String {
    DEFAULT_TEMPLATE.into()
}

/// A loaded sweep plus the stub-only extras.
#[derive(Debug, Clone)]
pub struct LoadedSweep {
    pub config: SweepConfig,
    pub plants: Vec<PlantEntry>,
    /// Prompts the stub renders at full contrast even at one step.
    pub sharp_early: Vec<String>,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn parse_sweep(text: &str, path: &Path, registry: &ClassRegistry) -> Result<LoadedSweep, ConfigError> {
    let value: toml::Table = toml::from_str(text).map_err(|e| parse_err(path, e))?;
    if value.contains_key("prompts") {
        let config: SweepConfig = toml::from_str(text).map_err(|e| parse_err(path, e))?;
        config.validate()?;
        return Ok(LoadedSweep {
            config,
            plants: Vec::new(),
            sharp_early: Vec::new(),
        });
    }
    let f: SweepFile = toml::from_str(text).map_err(|e| parse_err(path, e))?;
    let mut collocations = Vec::new();
    if let Some(file) = &f.collocations_file {
        let full = path.parent().unwrap_or(Path::new(".")).join(file);
        collocations.extend(load_collocations(&full, registry)?);
    }
    if !f.collocations.is_empty() {
        collocations.extend(parse_collocations(&f.collocations.join("\n"), registry)?);
    }
    if collocations.is_empty() {
        return Err(ForgeError::NoCollocations.into());
    }
    let descriptors = match &f.descriptors {
        Some(list) => list.iter().map(|d| Descriptor::new(d)).collect::<Result<Vec<_>, _>>()?,
        None => default_descriptors(),
    };
    let seeds = match f.seeds.clone() {
        Some(SeedSpec::List(v)) => v,
        Some(SeedSpec::Range { start, count }) => seed_schedule(start, count)?,
        None => seed_schedule(0, DEFAULT_SEED_COUNT)?,
    };
    let config = SweepConfig {
        run_label: f.run_label,
        provider_id: f.provider,
        steps: f.steps,
        width: f.width,
        height: f.height,
        guidance: f.guidance,
        seeds,
        prompts: expand_grid(&descriptors, &collocations, &f.template)?,
    };
    config.validate()?;
    for p in &f.plant {
        if !registry.contains(&p.class) {
            return Err(ConfigError::Invalid(format!("plant class {:?} is not registered", p.class)));
        }
        let [x, y, w, h] = p.mask;
        if w == 0 || h == 0 || x + w > config.width || y + h > config.height {
            return Err(ConfigError::Invalid(format!("plant mask for {:?} is outside the image", p.category)));
        }
    }
    Ok(LoadedSweep {
        config,
        plants: f.plant,
        sharp_early: f.sharp_early,
    })
}

pub fn load_sweep(path: &Path, registry: &ClassRegistry) -> Result<LoadedSweep, ConfigError> {
    parse_sweep(&read(path)?, path, registry)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    #[serde(default = "default_corpus_size")]
    width: u32,
    #[serde(default = "default_corpus_size")]
    height: u32,
    #[serde(default)]
    template: Vec<TemplateEntry>,
}

fn default_corpus_size() -> u32 {
    DEFAULT_CORPUS_SIZE
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateEntry {
    category: String,
    class: Option<String>,
    #[serde(default = "default_caption")]
    caption_template: String,
    #[serde(default)]
    blend: BlendMode,
    bases: Vec<ImageEntry>,
    /// Patterns listed by descriptor; seeds are the list positions.
    #[serde(default)]
    descriptors: Vec<String>,
    #[serde(default)]
    patterns: Vec<PatternEntry>,
}

fn default_caption() -> String {
    DEFAULT_CAPTION_TEMPLATE.into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    path: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
    mask: [u32; 4],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternEntry {
    descriptor: String,
    path: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
}

fn load_image(dir: &Path, p: &Path) -> Result<RgbImage, ConfigError> {
    let full = dir.join(p);
    let bytes = std::fs::read(&full).map_err(|e| ConfigError::Io {
        path: full.clone(),
        message: e.to_string(),
    })?;
    imaging::decode(&bytes).map_err(|e| parse_err(&full, e))
}

/// Plant specs from a synthesis file. Bases and patterns are image files
/// (relative to the spec) or procedural stub images when only a seed is given.
pub fn parse_synth(text: &str, path: &Path) -> Result<Vec<PlantSpec>, ConfigError> {
    let f: SynthFile = toml::from_str(text).map_err(|e| parse_err(path, e))?;
    if f.template.is_empty() {
        return Err(ConfigError::Invalid("synthesis spec has no [[template]] entries".into()));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut specs = Vec::new();
    for t in f.template {
        let mut bases = Vec::new();
        for b in &t.bases {
            let image = match &b.path {
                Some(p) => load_image(dir, p)?,
                None => stub_image(&format!("synth-base:{}", t.category), b.seed, f.width, f.height),
            };
            let [x, y, w, h] = b.mask;
            let mask = Mask::rect(image.width(), image.height(), x, y, w, h, t.class.as_deref().unwrap_or(""));
            bases.push(TemplateBase { image, mask });
        }
        let mut patterns = Vec::new();
        for (i, d) in t.descriptors.iter().enumerate() {
            patterns.push(Pattern {
                descriptor: d.clone(),
                image: stub_image(&format!("synth-pattern:{d}"), i as u64, 64, 64),
            });
        }
        for p in &t.patterns {
            let image = match &p.path {
                Some(path) => load_image(dir, path)?,
                None => stub_image(&format!("synth-pattern:{}", p.descriptor), p.seed, 64, 64),
            };
            patterns.push(Pattern {
                descriptor: p.descriptor.clone(),
                image,
            });
        }
        let spec = PlantSpec {
            category: t.category,
            segmentation_class: t.class,
            bases,
            patterns,
            blend: t.blend,
            caption_template: t.caption_template,
        };
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

pub fn load_synth(path: &Path) -> Result<Vec<PlantSpec>, ConfigError> {
    parse_synth(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = r#"
run_label = "demo"
provider = "stub"
width = 64
height = 64
descriptors = ["Floral", "Galaxy"]
collocations = ["Area Rug|home|wayfair|rug"]
seeds = [0, 1]
"#;

    #[test]
    fn grid_shorthand() {
        let s = parse_sweep(DEMO, Path::new("demo.toml"), &ClassRegistry::default()).unwrap();
        assert_eq!(s.config.prompts.len(), 2);
        assert_eq!(s.config.request_count(), 4);
        assert_eq!(s.config.prompts[1].rendered, "Galaxy Area Rug");
        assert_eq!(s.config.steps, DEFAULT_STEPS);
    }

    #[test]
    fn defaults_to_six_descriptors_and_fifty_seeds() {
        let s = parse_sweep(
            "collocations = [\"Unisex T-Shirt|clothing\"]",
            Path::new("x.toml"),
            &ClassRegistry::default(),
        )
        .unwrap();
        assert_eq!(s.config.prompts.len(), 6);
        assert_eq!(s.config.seeds.len(), 50);
        assert_eq!((s.config.width, s.config.height), (512, 512));
    }

    #[test]
    fn serialized_config_round_trips() {
        let s = parse_sweep(DEMO, Path::new("demo.toml"), &ClassRegistry::default()).unwrap();
        let text = toml::to_string_pretty(&s.config).unwrap();
        let back = parse_sweep(&text, Path::new("p.toml"), &ClassRegistry::default()).unwrap();
        assert_eq!(back.config, s.config);
    }

    #[test]
    fn bad_inputs() {
        let reg = ClassRegistry::default();
        assert!(parse_sweep("width = 64", Path::new("x"), &reg).is_err());
        assert!(parse_sweep("collocations = [\"A|b\"]\nwidth = 63", Path::new("x"), &reg).is_err());
        assert!(parse_sweep("collocations = [\"A|b\"]\nbogus = 1", Path::new("x"), &reg).is_err());
        let bad_plant = format!("{DEMO}\n[[plant]]\ncategory = \"Area Rug\"\nclass = \"rug\"\nmask = [60, 60, 10, 10]\n");
        assert!(parse_sweep(&bad_plant, Path::new("x"), &reg).is_err());
    }

    #[test]
    fn synth_spec() {
        let text = r#"
width = 64
height = 64
[[template]]
category = "Coffee Mug"
class = "mug"
bases = [{ seed = 0, mask = [8, 8, 24, 24] }, { seed = 1, mask = [8, 8, 24, 24] }]
descriptors = ["Floral", "Galaxy", "Paisley"]
"#;
        let specs = parse_synth(text, Path::new("s.toml")).unwrap();
        assert_eq!(specs[0].bases.len() * specs[0].patterns.len(), 6);
        let empty = text.replace("descriptors = [\"Floral\", \"Galaxy\", \"Paisley\"]", "descriptors = []");
        assert!(parse_synth(&empty, Path::new("s.toml")).is_err());
    }
}
