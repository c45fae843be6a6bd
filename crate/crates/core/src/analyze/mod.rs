//! Classification of detected groups into the observed phenomena, plus the
//! early-step probe and local source matching.

mod dispersion;
mod finding;
mod leakage;
mod patch;
mod probe;
mod source;

use thiserror::Error;

use crate::imaging::ImagingError;
use crate::percept::PerceptError;
use crate::providers::ProviderError;

pub use dispersion::{clique_dispersion, pixel_rms, DEFAULT_PERTURBATION_CUTOFF};
pub use finding::{
    count_by_kind, sort_findings, to_jsonl, CellMatch, DispersionEvidence, Finding, FindingKind,
    InterpolationEvidence, LeakageEvidence, ProbeEvidence, ProbeSeed, SourceMatchEvidence,
};
pub use leakage::{leakage_scan, Allowlist, LeakCandidate};
pub use patch::{patch_grid, patch_match, PatchGrid, DEFAULT_PATCH_GRID, DEFAULT_PATCH_THRESHOLD};
pub use probe::{early_step_probe, edge_density, ProbeRequest, EDGE_CUTOFF};
pub use source::{source_match, SourceImage, SourceQuery, DEFAULT_SOURCE_THRESHOLD};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("group {0} has fewer than two members")]
    TooFewMembers(String),
    #[error("no image bytes for {0}")]
    MissingImage(String),
    #[error("members {a} and {b} differ in size")]
    SizeMismatch { a: String, b: String },
    #[error("patch grid {rows}x{cols} is degenerate; need at least 2x2 cells no larger than the image")]
    DegenerateGrid { rows: u32, cols: u32 },
    #[error("source corpus must be non-empty")]
    EmptyCorpus,
    #[error("provider lacks step control: steps 1 and 10 return identical images for every seed")]
    NoStepControl,
    #[error("probe needs at least one seed")]
    NoSeeds,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Percept(#[from] PerceptError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}
