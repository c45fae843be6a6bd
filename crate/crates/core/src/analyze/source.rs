use image::RgbImage;

use super::{sort_findings, AnalyzeError, Finding, SourceMatchEvidence};
use crate::detect::cosine;
use crate::percept::{masked_embed, Embedder, FillPolicy, Mask};

pub const DEFAULT_SOURCE_THRESHOLD: f64 = 0.95;

/// A local corpus image, identified by file name or digest.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub id: String,
    pub image: RgbImage,
}

/// A generation to trace, with the editable region used during detection.
#[derive(Debug, Clone)]
pub struct SourceQuery {
    pub digest: String,
    pub image: RgbImage,
    pub mask: Option<Mask>,
}

/// Masked-embedding match of every generation against every corpus image.
/// The generation's mask is applied to same-sized corpus images too, so a
/// template source matches regardless of what sits in its editable region.
pub async fn source_match(
    generations: &[SourceQuery],
    corpus: &[SourceImage],
    embedder: &dyn Embedder,
    policy: FillPolicy,
    threshold: f64,
) -> Result<Vec<Finding>, AnalyzeError> {
    if corpus.is_empty() {
        return Err(AnalyzeError::EmptyCorpus);
    }
    let mut unmasked = Vec::with_capacity(corpus.len());
    for s in corpus {
        unmasked.push(masked_embed(embedder, &s.image, &s.id, None, policy).await?.vector);
    }
    let mut out = Vec::new();
    for g in generations {
        let gv = masked_embed(embedder, &g.image, &g.digest, g.mask.as_ref(), policy).await?;
        for (s, plain) in corpus.iter().zip(&unmasked) {
            let sv = match &g.mask {
                Some(m) if s.image.dimensions() == g.image.dimensions() => {
                    masked_embed(embedder, &s.image, &s.id, Some(m), policy).await?.vector
                }
                _ => plain.clone(),
            };
            let Ok(score) = cosine(&gv.vector, &sv) else {
                continue;
            };
            if score > threshold {
                out.push(Finding::source_match(
                    score,
                    &SourceMatchEvidence {
                        generation: g.digest.clone(),
                        source: s.id.clone(),
                        threshold,
                    },
                ));
            }
        }
    }
    sort_findings(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::stub_image;
    use crate::percept::StubExtractor;
    use crate::synthcorpus::{composite, BlendMode};

    #[tokio::test]
    async fn planted_source_found_and_self_match() {
        let base = stub_image("template", 0, 128, 128);
        let mask = Mask::rect(128, 128, 20, 30, 50, 40, "rug");
        let gen = composite(&base, &mask, &stub_image("fill", 1, 8, 8), BlendMode::Replace).unwrap();
        let corpus = vec![
            SourceImage {
                id: "template.png".into(),
                image: base.clone(),
            },
            SourceImage {
                id: "other.png".into(),
                image: stub_image("other", 0, 128, 128),
            },
        ];
        let q = [SourceQuery {
            digest: "gen".into(),
            image: gen.clone(),
            mask: Some(mask),
        }];
        let found = source_match(&q, &corpus, &StubExtractor, FillPolicy::Mean, 0.95).await.unwrap();
        assert_eq!(found.len(), 1);
        assert!(found[0].score >= 0.99);
        let ev: SourceMatchEvidence = found[0].evidence_as().unwrap();
        assert_eq!(ev.source, "template.png");

        let disjoint = [SourceImage {
            id: "x".into(),
            image: stub_image("unrelated", 5, 128, 128),
        }];
        assert!(source_match(&q, &disjoint, &StubExtractor, FillPolicy::Mean, 0.95).await.unwrap().is_empty());

        let selfq = [SourceQuery {
            digest: "gen".into(),
            image: gen.clone(),
            mask: None,
        }];
        let selfc = [SourceImage {
            id: "gen".into(),
            image: gen,
        }];
        let found = source_match(&selfq, &selfc, &StubExtractor, FillPolicy::Mean, 0.95).await.unwrap();
        assert_eq!(found.len(), 1);
        assert!((found[0].score - 1.0).abs() < 1e-12);

        assert!(matches!(
            source_match(&selfq, &[], &StubExtractor, FillPolicy::Mean, 0.95).await,
            Err(AnalyzeError::EmptyCorpus)
        ));
    }
}
