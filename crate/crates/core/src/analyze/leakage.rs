use std::collections::{BTreeMap, BTreeSet};

use super::{sort_findings, Finding, LeakageEvidence};
use crate::detect::{cosine, TemplateGroup};

/// Collocation pairs known to share a template (a common background, say).
/// Order and case do not matter.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Allowlist(BTreeSet<(String, String)>);

impl Allowlist {
    fn key(a: &str, b: &str) -> (String, String) {
        let (a, b) = (a.trim().to_lowercase(), b.trim().to_lowercase());
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    pub fn insert(&mut self, a: &str, b: &str) {
        self.0.insert(Self::key(a, b));
    }

    pub fn contains(&self, a: &str, b: &str) -> bool {
        self.0.contains(&Self::key(a, b))
    }

    /// `A=B`.
    pub fn parse_pair(s: &str) -> Option<(String, String)> {
        let (a, b) = s.split_once('=')?;
        let (a, b) = (a.trim(), b.trim());
        (!a.is_empty() && !b.is_empty()).then(|| (a.to_string(), b.to_string()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: AsRef<str>> FromIterator<(S, S)> for Allowlist {
    fn from_iter<I: IntoIterator<Item = (S, S)>>(iter: I) -> Self {
        let mut out = Self::default();
        for (a, b) in iter {
            out.insert(a.as_ref(), b.as_ref());
        }
        out
    }
}

/// A generation checked against foreign fingerprints.
#[derive(Debug, Clone)]
pub struct LeakCandidate {
    pub digest: String,
    pub collocation: String,
    pub unmasked: Vec<f64>,
    /// Embedding with the editable region of each segmentation class removed,
    /// so it is comparable with fingerprints of groups using that class.
    pub by_class: BTreeMap<String, Vec<f64>>,
}

/// One finding per (generation, foreign group) pair whose cosine exceeds
/// `threshold`, unless the two collocations are allowlisted.
pub fn leakage_scan(
    groups: &[TemplateGroup],
    candidates: &[LeakCandidate],
    allowlist: &Allowlist,
    threshold: f64,
) -> Vec<Finding> {
    let mut out = Vec::new();
    for g in groups {
        let owner = g.collocation.text.as_str();
        for c in candidates {
            if c.collocation.eq_ignore_ascii_case(owner) || allowlist.contains(owner, &c.collocation) {
                continue;
            }
            let v = g
                .collocation
                .segmentation_class
                .as_ref()
                .and_then(|k| c.by_class.get(k))
                .unwrap_or(&c.unmasked);
            let Ok(score) = cosine(v, &g.fingerprint) else {
                continue;
            };
            if score > threshold {
                out.push(Finding::leakage(
                    score,
                    &LeakageEvidence {
                        generation: c.digest.clone(),
                        generation_collocation: c.collocation.clone(),
                        group_id: g.group_id.clone(),
                        group_collocation: owner.to_string(),
                        threshold,
                    },
                ));
            }
        }
    }
    sort_findings(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::GroupStatus;
    use crate::prompt_forge::Collocation;

    fn group(coll: &str, class: &str, fp: Vec<f64>) -> TemplateGroup {
        TemplateGroup {
            group_id: format!("g-{coll}"),
            members: vec!["m1".into(), "m2".into()],
            collocation: Collocation::new(coll, "c").unwrap().with_class(class),
            fingerprint: fp,
            min_pairwise: 1.0,
            status: GroupStatus::Suspected,
        }
    }

    fn cand(d: &str, coll: &str, unmasked: Vec<f64>, class: &str, masked: Vec<f64>) -> LeakCandidate {
        LeakCandidate {
            digest: d.into(),
            collocation: coll.into(),
            unmasked,
            by_class: BTreeMap::from([(class.to_string(), masked)]),
        }
    }

    #[test]
    fn foreign_match_uses_group_class_embedding() {
        let groups = [group("Unisex T-Shirt", "t-shirt", vec![1.0, 0.0])];
        let cands = [
            cand("leak", "Tank Top", vec![0.0, 1.0], "t-shirt", vec![1.0, 0.0]),
            cand("own", "Unisex T-Shirt", vec![1.0, 0.0], "t-shirt", vec![1.0, 0.0]),
            cand("far", "Area Rug", vec![0.0, 1.0], "t-shirt", vec![0.0, 1.0]),
        ];
        let found = leakage_scan(&groups, &cands, &Allowlist::default(), 0.95);
        assert_eq!(found.len(), 1);
        let ev: LeakageEvidence = found[0].evidence_as().unwrap();
        assert_eq!(ev.generation, "leak");
        assert_eq!(ev.group_id, "g-Unisex T-Shirt");

        let allow: Allowlist = [("tank top", "UNISEX T-SHIRT")].into_iter().collect();
        assert!(leakage_scan(&groups, &cands, &allow, 0.95).is_empty());
    }

    #[test]
    fn single_collocation_never_leaks() {
        let groups = [group("Area Rug", "rug", vec![1.0, 0.0])];
        let cands = [cand("a", "area rug", vec![1.0, 0.0], "rug", vec![1.0, 0.0])];
        assert!(leakage_scan(&groups, &cands, &Allowlist::default(), 0.95).is_empty());
    }

    #[test]
    fn allowlist_pair_parsing() {
        assert_eq!(
            Allowlist::parse_pair("Unisex T-Shirt = Tank Top"),
            Some(("Unisex T-Shirt".into(), "Tank Top".into()))
        );
        assert_eq!(Allowlist::parse_pair("nope"), None);
    }
}
