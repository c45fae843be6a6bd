use serde::{Deserialize, Serialize};

use super::TemplateGroup;

/// Thresholds reported in every per-prompt sweep row.
pub const REPORT_SWEEP_THRESHOLDS: [f64; 5] = [0.90, 0.925, 0.95, 0.975, 0.99];

/// `report.json`. Field order is the serialization order, so equal reports
/// are equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub v: u32,
    pub run_id: String,
    pub threshold: f64,
    /// `"cliques"` or `"components"`.
    pub mode: String,
    pub groups: Vec<ReportGroup>,
    pub threshold_sweep: Vec<ThresholdSweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGroup {
    pub group_id: String,
    pub collocation: String,
    pub members: Vec<String>,
    pub min_pairwise: f64,
    pub fingerprint_digest: String,
}

impl From<&TemplateGroup> for ReportGroup {
    fn from(g: &TemplateGroup) -> Self {
        Self {
            group_id: g.group_id.clone(),
            collocation: g.collocation.text.clone(),
            members: g.members.clone(),
            min_pairwise: g.min_pairwise,
            fingerprint_digest: g.fingerprint_digest(),
        }
    }
}

/// How one prompt's generations cluster as the threshold moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweepRow {
    pub prompt: String,
    pub images: usize,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub edges: usize,
    pub largest_clique: usize,
}

impl DetectionReport {
    pub fn new(run_id: &str, threshold: f64, mode: &str, groups: &[TemplateGroup]) -> Self {
        Self {
            v: 1,
            run_id: run_id.to_string(),
            threshold,
            mode: mode.to_string(),
            groups: groups.iter().map(ReportGroup::from).collect(),
            threshold_sweep: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn digest(&self) -> String {
        crate::imaging::sha256_hex(&self.to_bytes())
    }
}
