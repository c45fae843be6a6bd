use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    TemplateMemorized,
    Perturbed,
    Leakage,
    Interpolation,
    SourceMatch,
    Probe,
}

/// One line of `findings.jsonl`.
///
/// `score` per kind:
/// * `template_memorized` / `perturbed`: the group's embedding `min_pairwise`
/// * `leakage`: cosine between the generation and the foreign fingerprint
/// * `interpolation`: mean best-match score over attributed cells
/// * `source_match`: masked-embedding cosine
/// * `probe`: mean edge-density ratio, step 1 over step 10 (heuristic)
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub v: u32,
    pub kind: FindingKind,
    pub subject: String,
    pub score: f64,
    pub evidence: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionEvidence {
    pub members: usize,
    pub min_pairwise: f64,
    pub threshold: f64,
    pub max_pixel_rms: f64,
    pub mean_pixel_rms: f64,
    pub perturbation_cutoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageEvidence {
    pub generation: String,
    pub generation_collocation: String,
    pub group_id: String,
    pub group_collocation: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMatch {
    pub row: u32,
    pub col: u32,
    pub source: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationEvidence {
    pub rows: u32,
    pub cols: u32,
    pub threshold: f64,
    pub sources: Vec<String>,
    pub cells: Vec<CellMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMatchEvidence {
    pub generation: String,
    pub source: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSeed {
    pub seed: u64,
    pub density_step1: f64,
    pub density_step10: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvidence {
    pub prompt: String,
    pub edge_cutoff: f64,
    pub heuristic: bool,
    pub seeds: Vec<ProbeSeed>,
}

impl Finding {
    fn with<E: Serialize>(kind: FindingKind, subject: &str, score: f64, evidence: &E) -> Self {
        Self {
            v: 1,
            kind,
            subject: subject.to_string(),
            score,
            evidence: serde_json::to_value(evidence).expect("evidence serializes"),
        }
    }

    pub fn dispersion(perturbed: bool, group_id: &str, ev: &DispersionEvidence) -> Self {
        let kind = if perturbed {
            FindingKind::Perturbed
        } else {
            FindingKind::TemplateMemorized
        };
        Self::with(kind, group_id, ev.min_pairwise, ev)
    }

    pub fn leakage(score: f64, ev: &LeakageEvidence) -> Self {
        Self::with(FindingKind::Leakage, &ev.generation, score, ev)
    }

    pub fn interpolation(image: &str, score: f64, ev: &InterpolationEvidence) -> Self {
        Self::with(FindingKind::Interpolation, image, score, ev)
    }

    pub fn source_match(score: f64, ev: &SourceMatchEvidence) -> Self {
        Self::with(FindingKind::SourceMatch, &ev.generation, score, ev)
    }

    pub fn probe(score: f64, ev: &ProbeEvidence) -> Self {
        Self::with(FindingKind::Probe, &ev.prompt, score, ev)
    }

    pub fn evidence_as<E: DeserializeOwned>(&self) -> Option<E> {
        serde_json::from_value(self.evidence.clone()).ok()
    }

    /// Evidence parses as the payload type for `kind`.
    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            FindingKind::TemplateMemorized | FindingKind::Perturbed => {
                self.evidence_as::<DispersionEvidence>().is_some()
            }
            FindingKind::Leakage => self.evidence_as::<LeakageEvidence>().is_some(),
            FindingKind::Interpolation => self.evidence_as::<InterpolationEvidence>().is_some(),
            FindingKind::SourceMatch => self.evidence_as::<SourceMatchEvidence>().is_some(),
            FindingKind::Probe => self.evidence_as::<ProbeEvidence>().is_some(),
        }
    }
}

/// Deterministic merge order: kind, subject, score descending. Remaining
/// ties fall back to the serialized evidence.
pub fn sort_findings(findings: &mut [Finding]) {
    findings.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then_with(|| a.subject.cmp(&b.subject))
            .then_with(|| b.score.total_cmp(&a.score))
            .then_with(|| a.evidence.to_string().cmp(&b.evidence.to_string()))
    });
}

pub fn to_jsonl(findings: &[Finding]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in findings {
        serde_json::to_writer(&mut out, f).expect("finding serializes");
        out.push(b'\n');
    }
    out
}

pub fn count_by_kind(findings: &[Finding]) -> BTreeMap<FindingKind, usize> {
    let mut out = BTreeMap::new();
    for f in findings {
        *out.entry(f.kind).or_default() += 1;
    }
    out
}
