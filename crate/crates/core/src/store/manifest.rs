//! Append-only run manifests: one JSON event per line, strictly increasing
//! sequence numbers starting at 1.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::analyze::Finding;
use crate::detect::TemplateGroup;
use crate::percept::RleMask;
use crate::prompt_forge::SweepConfig;
use crate::providers::{GenerationRecord, GenerationRequest};
use crate::triage::{derive_status, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Images requested from a provider.
    Sweep,
    /// Images imported from a synthesized corpus.
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    RunCreated {
        run_id: String,
        kind: RunKind,
        config_digest: String,
        config: SweepConfig,
    },
    Generation {
        prompt_index: usize,
        seed_index: usize,
        cached: bool,
        record: GenerationRecord,
    },
    GenerationFailed {
        prompt_index: usize,
        seed_index: usize,
        request: GenerationRequest,
        error: String,
        retryable: bool,
    },
    SweepFinished {
        new_calls: usize,
        cached: usize,
        failed: usize,
    },
    Mask {
        image_digest: String,
        segmenter_id: String,
        mask: RleMask,
    },
    Embedding {
        image_digest: String,
        provider_id: String,
        mask_digest: String,
        vector_digest: String,
    },
    Detection {
        threshold: f64,
        mode: String,
        report_digest: String,
        groups: Vec<TemplateGroup>,
    },
    Finding {
        finding: Finding,
    },
    Verdict {
        verdict: Verdict,
    },
    Promotion {
        group_ids: Vec<String>,
        target_provider_id: String,
        config_digest: String,
    },
    Warning {
        message: String,
    },
    Status {
        status: RunStatus,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub v: u32,
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailedGeneration {
    pub request: GenerationRequest,
    pub error: String,
    pub retryable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionState {
    pub threshold: f64,
    pub mode: String,
    pub report_digest: String,
    pub groups: Vec<TemplateGroup>,
}

/// Everything a manifest says about a run, rebuilt by replay.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub run_id: String,
    pub kind: RunKind,
    pub config_digest: String,
    pub config: SweepConfig,
    pub created_at: DateTime<Utc>,
    pub status: RunStatus,
    /// Keyed by `(prompt_index, seed_index)`.
    pub records: BTreeMap<(usize, usize), GenerationRecord>,
    pub failures: BTreeMap<(usize, usize), FailedGeneration>,
    /// Keyed by `(image_digest, class_label)`.
    pub masks: BTreeMap<(String, String), RleMask>,
    pub embeddings: BTreeMap<(String, String), String>,
    pub detection: Option<DetectionState>,
    pub findings: Vec<Finding>,
    pub verdicts: Vec<Verdict>,
    pub promotions: Vec<(Vec<String>, String, String)>,
    pub warnings: Vec<String>,
    pub last_seq: u64,
}

impl RunState {
    fn from_first(line: &ManifestLine) -> Option<Self> {
        match &line.event {
            Event::RunCreated {
                run_id,
                kind,
                config_digest,
                config,
            } => Some(Self {
                run_id: run_id.clone(),
                kind: *kind,
                config_digest: config_digest.clone(),
                config: config.clone(),
                created_at: line.at,
                status: RunStatus::Running,
                records: BTreeMap::new(),
                failures: BTreeMap::new(),
                masks: BTreeMap::new(),
                embeddings: BTreeMap::new(),
                detection: None,
                findings: Vec::new(),
                verdicts: Vec::new(),
                promotions: Vec::new(),
                warnings: Vec::new(),
                last_seq: line.seq,
            }),
            _ => None,
        }
    }

    fn apply(&mut self, line: &ManifestLine) {
        self.last_seq = line.seq;
        match &line.event {
            Event::RunCreated { .. } => {}
            Event::Generation {
                prompt_index,
                seed_index,
                record,
                ..
            } => {
                self.failures.remove(&(*prompt_index, *seed_index));
                self.records.insert((*prompt_index, *seed_index), record.clone());
            }
            Event::GenerationFailed {
                prompt_index,
                seed_index,
                request,
                error,
                retryable,
            } => {
                self.failures.insert(
                    (*prompt_index, *seed_index),
                    FailedGeneration {
                        request: request.clone(),
                        error: error.clone(),
                        retryable: *retryable,
                    },
                );
            }
            Event::SweepFinished { .. } => {}
            Event::Mask {
                image_digest, mask, ..
            } => {
                self.masks
                    .insert((image_digest.clone(), mask.class_label.clone()), mask.clone());
            }
            Event::Embedding {
                image_digest,
                mask_digest,
                vector_digest,
                ..
            } => {
                self.embeddings
                    .insert((image_digest.clone(), mask_digest.clone()), vector_digest.clone());
            }
            Event::Detection {
                threshold,
                mode,
                report_digest,
                groups,
            } => {
                // a new detection supersedes earlier findings
                self.detection = Some(DetectionState {
                    threshold: *threshold,
                    mode: mode.clone(),
                    report_digest: report_digest.clone(),
                    groups: groups.clone(),
                });
                self.findings.clear();
            }
            Event::Finding { finding } => self.findings.push(finding.clone()),
            Event::Verdict { verdict } => self.verdicts.push(verdict.clone()),
            Event::Promotion {
                group_ids,
                target_provider_id,
                config_digest,
            } => self.promotions.push((
                group_ids.clone(),
                target_provider_id.clone(),
                config_digest.clone(),
            )),
            Event::Warning { message } => self.warnings.push(message.clone()),
            Event::Status { status } => self.status = *status,
        }
    }

    /// Detected groups with their status derived from the verdict log.
    pub fn groups(&self) -> Vec<TemplateGroup> {
        let Some(det) = &self.detection else {
            return Vec::new();
        };
        det.groups
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.status = derive_status(&self.verdicts, &g.group_id);
                g
            })
            .collect()
    }

    /// Records in `(prompt_index, seed_index)` order.
    pub fn ordered_records(&self) -> Vec<&GenerationRecord> {
        self.records.values().collect()
    }
}

/// Result of scanning a manifest file.
pub(crate) struct Scan {
    pub lines: Vec<ManifestLine>,
    /// Byte length of the valid prefix; anything after is a torn tail.
    pub valid_len: u64,
}

pub(crate) fn scan(run_id: &str, content: &[u8]) -> Result<Scan, StoreError> {
    let mut lines = Vec::new();
    let mut offset = 0usize;
    let mut valid_len = 0u64;
    let mut chunks = content.split_inclusive(|&b| b == b'\n').peekable();
    while let Some(chunk) = chunks.next() {
        let is_last = chunks.peek().is_none();
        offset += chunk.len();
        let complete = chunk.ends_with(b"\n");
        let body = if complete { &chunk[..chunk.len() - 1] } else { chunk };
        if body.iter().all(u8::is_ascii_whitespace) && complete {
            valid_len = offset as u64;
            continue;
        }
        let expected = lines.last().map_or(1, |l: &ManifestLine| l.seq + 1);
        let parsed: Result<ManifestLine, _> = serde_json::from_slice(body);
        match parsed {
            Ok(line) if complete && line.seq == expected => {
                lines.push(line);
                valid_len = offset as u64;
            }
            // torn or garbled final record: dropped, run resumes before it
            _ if is_last => break,
            Ok(line) => {
                return Err(StoreError::Corrupt {
                    run_id: run_id.to_string(),
                    seq: expected,
                    message: format!("sequence {} out of order", line.seq),
                })
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    run_id: run_id.to_string(),
                    seq: expected,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(Scan { lines, valid_len })
}

pub(crate) fn replay_lines(run_id: &str, lines: &[ManifestLine]) -> Result<RunState, StoreError> {
    let first = lines.first().ok_or_else(|| StoreError::Corrupt {
        run_id: run_id.to_string(),
        seq: 1,
        message: "manifest has no run_created record".into(),
    })?;
    let mut state = RunState::from_first(first).ok_or_else(|| StoreError::Corrupt {
        run_id: run_id.to_string(),
        seq: first.seq,
        message: "first record is not run_created".into(),
    })?;
    for line in &lines[1..] {
        state.apply(line);
    }
    Ok(state)
}
