//! Prompt space construction: collocation lists, descriptor grids, rendered
//! prompts and seed schedules.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::percept::ClassRegistry;

pub const DESCRIPTOR_PLACEHOLDER: &str = "{descriptor}";
pub const COLLOCATION_PLACEHOLDER: &str = "{collocation}";
pub const DEFAULT_TEMPLATE: &str = "{descriptor} {collocation}";

/// The six visual-pattern descriptors used for every collocation by default.
pub const DEFAULT_DESCRIPTORS: [&str; 6] =
    ["Galaxy", "Floral", "Abstract Art", "I Heart ML", "blue", "red"];

/// Images per prompt when nothing else is configured.
pub const DEFAULT_SEED_COUNT: u32 = 50;

#[derive(Debug, Error, PartialEq)]
pub enum ForgeError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("no collocations")]
    NoCollocations,
    #[error("invalid collocation {text:?}: {reason}")]
    InvalidCollocation { text: String, reason: String },
    #[error("invalid descriptor {0:?}")]
    InvalidDescriptor(String),
    #[error("template {template:?} is missing placeholder {missing}")]
    MissingPlaceholder { template: String, missing: &'static str },
    #[error("descriptor list is empty")]
    NoDescriptors,
    #[error("seed count must be at least 1")]
    ZeroSeeds,
    #[error("invalid sweep config: {0}")]
    InvalidSweep(String),
    #[error("io error reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collocation {
    pub text: String,
    pub category_tag: String,
    #[serde(default)]
    pub source_site: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation_class: Option<String>,
}

impl Collocation {
    pub fn new(text: &str, category_tag: &str) -> Result<Self, ForgeError> {
        let c = Self {
            text: text.trim().to_string(),
            category_tag: category_tag.trim().to_string(),
            source_site: String::new(),
            segmentation_class: None,
        };
        c.validate_shape()?;
        Ok(c)
    }

    pub fn with_source(mut self, site: &str) -> Self {
        self.source_site = site.trim().to_string();
        self
    }

    pub fn with_class(mut self, class: &str) -> Self {
        self.segmentation_class = Some(class.trim().to_string());
        self
    }

    fn validate_shape(&self) -> Result<(), ForgeError> {
        let bad = |reason: &str| ForgeError::InvalidCollocation {
            text: self.text.clone(),
            reason: reason.to_string(),
        };
        if self.text.is_empty() {
            return Err(bad("empty text"));
        }
        if self.text.contains('\n') || self.text.contains('\r') {
            return Err(bad("contains a newline"));
        }
        if self.text != self.text.trim() {
            return Err(bad("not trimmed"));
        }
        if self.text.contains('|') || self.category_tag.contains('|') || self.source_site.contains('|')
        {
            return Err(bad("field contains the record delimiter"));
        }
        Ok(())
    }

    /// Full invariant check, including the segmentation class lookup.
    pub fn validate(&self, registry: &ClassRegistry) -> Result<(), ForgeError> {
        self.validate_shape()?;
        if let Some(class) = &self.segmentation_class {
            if !registry.contains(class) {
                return Err(ForgeError::InvalidCollocation {
                    text: self.text.clone(),
                    reason: format!("unknown segmentation class {class:?}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptor(String);

impl Descriptor {
    pub fn new(text: &str) -> Result<Self, ForgeError> {
        let t = text.trim();
        if t.is_empty() || t.contains('\n') {
            return Err(ForgeError::InvalidDescriptor(text.to_string()));
        }
        Ok(Self(t.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub fn default_descriptors() -> Vec<Descriptor> {
    DEFAULT_DESCRIPTORS
        .iter()
        .map(|d| Descriptor(d.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub descriptor: Descriptor,
    pub collocation: Collocation,
    pub template: String,
    pub rendered: String,
}

impl PromptSpec {
    pub fn new(
        descriptor: Descriptor,
        collocation: Collocation,
        template: &str,
    ) -> Result<Self, ForgeError> {
        check_template(template)?;
        let rendered = render(template, descriptor.as_str(), &collocation.text);
        Ok(Self {
            descriptor,
            collocation,
            template: template.to_string(),
            rendered,
        })
    }
}

fn check_template(template: &str) -> Result<(), ForgeError> {
    for p in [DESCRIPTOR_PLACEHOLDER, COLLOCATION_PLACEHOLDER] {
        if !template.contains(p) {
            return Err(ForgeError::MissingPlaceholder {
                template: template.to_string(),
                missing: p,
            });
        }
    }
    Ok(())
}

fn render(template: &str, descriptor: &str, collocation: &str) -> String {
    // Single pass so substituted text is never re-scanned for placeholders.
    let mut out = String::with_capacity(template.len() + descriptor.len() + collocation.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(t) = tail.strip_prefix(DESCRIPTOR_PLACEHOLDER) {
            out.push_str(descriptor);
            rest = t;
        } else if let Some(t) = tail.strip_prefix(COLLOCATION_PLACEHOLDER) {
            out.push_str(collocation);
            rest = t;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

/// Parses the `text|category_tag|source_site|segmentation_class` record
/// format. `#` lines and blank lines are skipped; the last two fields are
/// optional. Duplicates (case-insensitive on text) keep the first occurrence.
pub fn parse_collocations(
    content: &str,
    registry: &ClassRegistry,
) -> Result<Vec<Collocation>, ForgeError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(ForgeError::Malformed {
                line: line_no,
                reason: format!("expected 2 to 4 '|'-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() {
            return Err(ForgeError::Malformed {
                line: line_no,
                reason: "empty collocation text".into(),
            });
        }
        if fields[1].is_empty() {
            return Err(ForgeError::Malformed {
                line: line_no,
                reason: "empty category tag".into(),
            });
        }
        let c = Collocation {
            text: fields[0].to_string(),
            category_tag: fields[1].to_string(),
            source_site: fields.get(2).copied().unwrap_or_default().to_string(),
            segmentation_class: fields
                .get(3)
                .filter(|s| !s.is_empty())
                .map(|s| s.to_string()),
        };
        c.validate(registry).map_err(|e| ForgeError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        if seen.insert(c.text.to_lowercase()) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(ForgeError::NoCollocations);
    }
    Ok(out)
}

pub fn load_collocations(
    path: &Path,
    registry: &ClassRegistry,
) -> Result<Vec<Collocation>, ForgeError> {
    let content = std::fs::read_to_string(path).map_err(|e| ForgeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_collocations(&content, registry)
}

pub fn format_collocations(list: &[Collocation]) -> String {
    let mut out = String::new();
    for c in list {
        let _ = write!(out, "{}|{}|{}", c.text, c.category_tag, c.source_site);
        if let Some(class) = &c.segmentation_class {
            let _ = write!(out, "|{class}");
        }
        out.push('\n');
    }
    out
}

pub fn save_collocations(path: &Path, list: &[Collocation]) -> Result<(), ForgeError> {
    std::fs::write(path, format_collocations(list)).map_err(|e| ForgeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Cartesian product, descriptor-major.
pub fn expand_grid(
    descriptors: &[Descriptor],
    collocations: &[Collocation],
    template: &str,
) -> Result<Vec<PromptSpec>, ForgeError> {
    if descriptors.is_empty() {
        return Err(ForgeError::NoDescriptors);
    }
    if collocations.is_empty() {
        return Err(ForgeError::NoCollocations);
    }
    check_template(template)?;
    let mut out = Vec::with_capacity(descriptors.len() * collocations.len());
    for d in descriptors {
        for c in collocations {
            out.push(PromptSpec::new(d.clone(), c.clone(), template)?);
        }
    }
    Ok(out)
}

pub fn seed_schedule(start: u64, count: u32) -> Result<Vec<u64>, ForgeError> {
    if count == 0 {
        return Err(ForgeError::ZeroSeeds);
    }
    Ok((0..count as u64).map(|i| start + i).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub run_label: String,
    pub provider_id: String,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
    pub guidance: f64,
    pub seeds: Vec<u64>,
    pub prompts: Vec<PromptSpec>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        let bad = |m: &str| Err(ForgeError::InvalidSweep(m.to_string()));
        if self.prompts.is_empty() {
            return bad("prompts must be non-empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        let distinct: HashSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(8) || !self.height.is_multiple_of(8) {
            return bad("width and height must be positive multiples of 8");
        }
        if self.guidance.is_nan() || self.guidance < 0.0 {
            return bad("guidance must be >= 0");
        }
        if self.provider_id.trim().is_empty() {
            return bad("provider_id must be set");
        }
        Ok(())
    }

    /// Content digest over the canonical JSON form.
    pub fn digest(&self) -> String {
        crate::imaging::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Distinct collocations in first-appearance order.
    pub fn collocations(&self) -> Vec<&Collocation> {
        let mut seen = HashSet::new();
        self.prompts
            .iter()
            .filter(|p| seen.insert(p.collocation.text.to_lowercase()))
            .map(|p| &p.collocation)
            .collect()
    }

    pub fn request_count(&self) -> usize {
        self.prompts.len() * self.seeds.len()
    }
}
