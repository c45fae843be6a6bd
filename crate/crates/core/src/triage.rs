//! Analyst verdicts on template groups and promotion of confirmed
//! collocations into new sweeps.

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{GroupStatus, TemplateGroup};
use crate::prompt_forge::{default_descriptors, expand_grid, SweepConfig, DEFAULT_TEMPLATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Confirmed,
    Rejected,
    LeakageConfirmed,
}

impl Decision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "confirmed" => Some(Self::Confirmed),
            "rejected" => Some(Self::Rejected),
            "leakage_confirmed" => Some(Self::LeakageConfirmed),
            _ => None,
        }
    }

    fn status(self) -> GroupStatus {
        match self {
            Decision::Confirmed | Decision::LeakageConfirmed => GroupStatus::Confirmed,
            Decision::Rejected => GroupStatus::Rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub group_id: String,
    pub decision: Decision,
    pub analyst: String,
    #[serde(default)]
    pub note: String,
    pub created_at: DateTime<Utc>,
}

/// Most recent verdict of each analyst for `group_id`. `verdicts` must be in
/// manifest order.
pub fn latest_per_analyst<'a>(verdicts: &'a [Verdict], group_id: &str) -> BTreeMap<&'a str, &'a Verdict> {
    let mut out = BTreeMap::new();
    for v in verdicts.iter().filter(|v| v.group_id == group_id) {
        out.insert(v.analyst.as_str(), v);
    }
    out
}

/// Consensus over the latest verdict of every analyst: confirmed or rejected
/// only when all analysts agree, suspected otherwise.
pub fn derive_status(verdicts: &[Verdict], group_id: &str) -> GroupStatus {
    let latest = latest_per_analyst(verdicts, group_id);
    let mut statuses = latest.values().map(|v| v.decision.status());
    match statuses.next() {
        None => GroupStatus::Suspected,
        Some(first) if statuses.all(|s| s == first) => first,
        Some(_) => GroupStatus::Suspected,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PromoteError {
    #[error("no groups selected")]
    Empty,
    #[error("group {0} is not confirmed")]
    Unconfirmed(String),
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("{0}")]
    Invalid(String),
}

/// Sweep over the confirmed groups' collocations crossed with the default
/// descriptors, aimed at `target_provider_id`. Image settings and seeds are
/// inherited from `source`.
pub fn promote(
    source: &SweepConfig,
    groups: &[TemplateGroup],
    group_ids: &[String],
    target_provider_id: &str,
) -> Result<SweepConfig, PromoteError> {
    if group_ids.is_empty() {
        return Err(PromoteError::Empty);
    }
    let mut collocations = Vec::new();
    let mut seen = HashSet::new();
    for gid in group_ids {
        let g = groups
            .iter()
            .find(|g| &g.group_id == gid)
            .ok_or_else(|| PromoteError::UnknownGroup(gid.clone()))?;
        if g.status != GroupStatus::Confirmed {
            return Err(PromoteError::Unconfirmed(gid.clone()));
        }
        if seen.insert(g.collocation.text.to_lowercase()) {
            collocations.push(g.collocation.clone());
        }
    }
    let prompts = expand_grid(&default_descriptors(), &collocations, DEFAULT_TEMPLATE)
        .map_err(|e| PromoteError::Invalid(e.to_string()))?;
    let cfg = SweepConfig {
        run_label: format!("{}-promoted", source.run_label),
        provider_id: target_provider_id.to_string(),
        prompts,
        ..source.clone()
    };
    cfg.validate().map_err(|e| PromoteError::Invalid(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_forge::Collocation;

    fn verdict(gid: &str, analyst: &str, d: Decision, t: i64) -> Verdict {
        Verdict {
            group_id: gid.into(),
            decision: d,
            analyst: analyst.into(),
            note: String::new(),
            created_at: DateTime::from_timestamp(t, 0).unwrap(),
        }
    }

    #[test]
    fn consensus_status() {
        let mut vs = vec![verdict("g", "ann", Decision::Confirmed, 1)];
        assert_eq!(derive_status(&vs, "g"), GroupStatus::Confirmed);
        assert_eq!(derive_status(&vs, "other"), GroupStatus::Suspected);
        vs.push(verdict("g", "bob", Decision::Rejected, 2));
        assert_eq!(derive_status(&vs, "g"), GroupStatus::Suspected);
        assert_eq!(latest_per_analyst(&vs, "g").len(), 2);
        vs.push(verdict("g", "bob", Decision::LeakageConfirmed, 3));
        assert_eq!(derive_status(&vs, "g"), GroupStatus::Confirmed);
        assert_eq!(latest_per_analyst(&vs, "g")["bob"].decision, Decision::LeakageConfirmed);
    }

    #[test]
    fn decision_parsing() {
        assert_eq!(Decision::parse("confirmed"), Some(Decision::Confirmed));
        assert_eq!(Decision::parse("maybe"), None);
    }

    fn group(id: &str, coll: &str, status: GroupStatus) -> TemplateGroup {
        TemplateGroup {
            group_id: id.into(),
            members: vec!["a".into(), "b".into()],
            collocation: Collocation::new(coll, "c").unwrap(),
            fingerprint: vec![1.0],
            min_pairwise: 0.99,
            status,
        }
    }

    fn source() -> SweepConfig {
        SweepConfig {
            run_label: "base".into(),
            provider_id: "stub".into(),
            steps: 50,
            width: 512,
            height: 512,
            guidance: 7.5,
            seeds: (0..50).collect(),
            prompts: expand_grid(
                &default_descriptors(),
                &[Collocation::new("Unisex T-Shirt", "clothing").unwrap()],
                DEFAULT_TEMPLATE,
            )
            .unwrap(),
        }
    }

    #[test]
    fn promote_one_confirmed_group() {
        let gs = [
            group("g1", "Unisex T-Shirt", GroupStatus::Confirmed),
            group("g2", "unisex t-shirt", GroupStatus::Confirmed),
            group("g3", "Area Rug", GroupStatus::Suspected),
        ];
        let cfg = promote(&source(), &gs, &["g1".into()], "flux").unwrap();
        assert_eq!(cfg.prompts.len(), 6);
        assert_eq!(cfg.provider_id, "flux");
        let dup = promote(&source(), &gs, &["g1".into(), "g2".into()], "flux").unwrap();
        assert_eq!(dup.prompts.len(), 6);
        assert_eq!(
            promote(&source(), &gs, &["g1".into(), "g3".into()], "flux").unwrap_err(),
            PromoteError::Unconfirmed("g3".into())
        );
        assert_eq!(promote(&source(), &gs, &[], "flux").unwrap_err(), PromoteError::Empty);
    }
}
