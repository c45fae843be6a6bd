use std::collections::BTreeMap;

use image::RgbImage;

use super::{AnalyzeError, DispersionEvidence, Finding};
use crate::detect::TemplateGroup;
use crate::percept::Mask;

/// Pixel RMS (0-255 scale) above which a clique counts as perturbed.
pub const DEFAULT_PERTURBATION_CUTOFF: f64 = 8.0;

/// Root-mean-square channel difference over pixels outside `exclude`.
/// `None` when every pixel is excluded.
pub fn pixel_rms(a: &RgbImage, b: &RgbImage, exclude: Option<&Mask>) -> Option<f64> {
    let mut sum = 0.0f64;
    let mut n = 0u64;
    for ((x, y, pa), pb) in a.enumerate_pixels().zip(b.pixels()) {
        if exclude.is_some_and(|m| m.get(x, y)) {
            continue;
        }
        for c in 0..3 {
            let d = pa[c] as f64 - pb[c] as f64;
            sum += d * d;
        }
        n += 3;
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Perturbed when the group is embedding-tight (`min_pairwise > threshold`)
/// but some member pair differs by more than `cutoff` RMS outside the
/// editable region; template-memorized otherwise.
pub fn clique_dispersion(
    group: &TemplateGroup,
    images: &BTreeMap<String, RgbImage>,
    masks: &BTreeMap<String, Mask>,
    threshold: f64,
    cutoff: f64,
) -> Result<Finding, AnalyzeError> {
    let mut members = group.members.clone();
    members.sort();
    members.dedup();
    if members.len() < 2 {
        return Err(AnalyzeError::TooFewMembers(group.group_id.clone()));
    }
    let imgs: Vec<&RgbImage> = members
        .iter()
        .map(|m| images.get(m).ok_or_else(|| AnalyzeError::MissingImage(m.clone())))
        .collect::<Result<_, _>>()?;

    let mut max_rms = 0.0f64;
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            if imgs[i].dimensions() != imgs[j].dimensions() {
                return Err(AnalyzeError::SizeMismatch {
                    a: members[i].clone(),
                    b: members[j].clone(),
                });
            }
            let exclude = match (masks.get(&members[i]), masks.get(&members[j])) {
                (Some(a), Some(b)) => Some(a.union(b)?),
                (Some(a), None) | (None, Some(a)) => Some(a.clone()),
                (None, None) => None,
            };
            let rms = pixel_rms(imgs[i], imgs[j], exclude.as_ref()).unwrap_or(0.0);
            max_rms = max_rms.max(rms);
            total += rms;
            pairs += 1;
        }
    }
    let ev = DispersionEvidence {
        members: members.len(),
        min_pairwise: group.min_pairwise,
        threshold,
        max_pixel_rms: max_rms,
        mean_pixel_rms: total / pairs as f64,
        perturbation_cutoff: cutoff,
    };
    let perturbed = group.min_pairwise > threshold && max_rms > cutoff;
    Ok(Finding::dispersion(perturbed, &group.group_id, &ev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyze::FindingKind;
    use crate::detect::GroupStatus;
    use crate::prompt_forge::Collocation;
    use crate::providers::stub_image;
    use image::Rgb;

    fn group(members: &[&str], min_pairwise: f64) -> TemplateGroup {
        TemplateGroup {
            group_id: "g1".into(),
            members: members.iter().map(|s| s.to_string()).collect(),
            collocation: Collocation::new("Area Rug", "home").unwrap(),
            fingerprint: vec![1.0],
            min_pairwise,
            status: GroupStatus::Suspected,
        }
    }

    #[test]
    fn rms_oracle() {
        let a = RgbImage::from_pixel(4, 4, Rgb([10, 10, 10]));
        let mut b = a.clone();
        b.put_pixel(0, 0, Rgb([14, 10, 10]));
        // one channel of one pixel off by 4: sqrt(16 / 48)
        assert!((pixel_rms(&a, &b, None).unwrap() - (16.0f64 / 48.0).sqrt()).abs() < 1e-12);
        let m = Mask::rect(4, 4, 0, 0, 1, 1, "rug");
        assert_eq!(pixel_rms(&a, &b, Some(&m)), Some(0.0));
        assert_eq!(pixel_rms(&a, &b, Some(&Mask::full(4, 4, "rug"))), None);
    }

    #[test]
    fn identical_members_are_template_memorized() {
        let img = stub_image("x", 0, 32, 32);
        let images = BTreeMap::from([("a".to_string(), img.clone()), ("b".to_string(), img)]);
        let f = clique_dispersion(&group(&["a", "b"], 0.99), &images, &BTreeMap::new(), 0.95, 8.0).unwrap();
        assert_eq!(f.kind, FindingKind::TemplateMemorized);
        let ev: DispersionEvidence = f.evidence_as().unwrap();
        assert_eq!(ev.max_pixel_rms, 0.0);
    }

    #[test]
    fn differing_members_are_perturbed_only_when_tight() {
        let a = stub_image("x", 0, 32, 32);
        let b = stub_image("y", 0, 32, 32);
        let images = BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
        let tight = clique_dispersion(&group(&["b", "a"], 0.99), &images, &BTreeMap::new(), 0.95, 8.0).unwrap();
        assert_eq!(tight.kind, FindingKind::Perturbed);
        let loose = clique_dispersion(&group(&["a", "b"], 0.9), &images, &BTreeMap::new(), 0.95, 8.0).unwrap();
        assert_eq!(loose.kind, FindingKind::TemplateMemorized);
        // member order does not matter
        let again = clique_dispersion(&group(&["a", "b"], 0.99), &images, &BTreeMap::new(), 0.95, 8.0).unwrap();
        assert_eq!(again, tight);
    }

    #[test]
    fn preconditions() {
        let images = BTreeMap::from([("a".to_string(), stub_image("x", 0, 8, 8))]);
        assert!(matches!(
            clique_dispersion(&group(&["a"], 0.99), &images, &BTreeMap::new(), 0.95, 8.0),
            Err(AnalyzeError::TooFewMembers(_))
        ));
        assert!(matches!(
            clique_dispersion(&group(&["a", "z"], 0.99), &images, &BTreeMap::new(), 0.95, 8.0),
            Err(AnalyzeError::MissingImage(_))
        ));
    }
}
