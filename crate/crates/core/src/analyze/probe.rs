use image::RgbImage;

use super::{AnalyzeError, Finding, ProbeEvidence, ProbeSeed};
use crate::imaging::{self, luma_plane};
use crate::providers::{GenerationRequest, Provider};

/// Sobel gradient magnitude on luminance above which a pixel is an edge.
pub const EDGE_CUTOFF: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRequest {
    pub prompt: String,
    pub seeds: Vec<u64>,
    pub width: u32,
    pub height: u32,
    pub guidance: f64,
    pub provider_id: String,
}

/// Fraction of interior pixels whose Sobel magnitude exceeds [`EDGE_CUTOFF`].
pub fn edge_density(img: &RgbImage) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let l = luma_plane(img);
    let at = |x: usize, y: usize| l[y * w + x];
    let mut edges = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            if (gx * gx + gy * gy).sqrt() > EDGE_CUTOFF {
                edges += 1;
            }
        }
    }
    edges as f64 / ((w - 2) * (h - 2)) as f64
}

async fn render(
    provider: &dyn Provider,
    req: &ProbeRequest,
    prompt: &str,
    seed: u64,
    steps: u32,
) -> Result<(String, f64), AnalyzeError> {
    let r = GenerationRequest {
        prompt: prompt.to_string(),
        seed,
        steps,
        width: req.width,
        height: req.height,
        guidance: req.guidance,
        provider_id: req.provider_id.clone(),
    };
    let out = provider.generate(&r).await?;
    let img = imaging::decode(&out.png)?;
    Ok((imaging::digest_of(&img)?, edge_density(&img)))
}

/// Request each seed at 1 and 10 steps and score the prompt by the mean
/// ratio of step-1 to step-10 edge density. A heuristic: a high score means
/// the sample already had its final structure after one step.
///
/// When every seed comes back identical at both step counts, a control
/// prompt tells a prompt that is sharp from the start apart from a provider
/// that ignores `steps`.
pub async fn early_step_probe(req: &ProbeRequest, provider: &dyn Provider) -> Result<Finding, AnalyzeError> {
    if req.seeds.is_empty() {
        return Err(AnalyzeError::NoSeeds);
    }
    let mut seeds = req.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let floor = 1.0 / (req.width as f64 * req.height as f64).max(1.0);

    let mut rows = Vec::with_capacity(seeds.len());
    let mut all_identical = true;
    for &seed in &seeds {
        let (d1, dens1) = render(provider, req, &req.prompt, seed, 1).await?;
        let (d10, dens10) = render(provider, req, &req.prompt, seed, 10).await?;
        all_identical &= d1 == d10;
        rows.push(ProbeSeed {
            seed,
            density_step1: dens1,
            density_step10: dens10,
            ratio: dens1 / dens10.max(floor),
        });
    }
    if all_identical {
        let control = format!("{} (step control)", req.prompt);
        let (c1, _) = render(provider, req, &control, seeds[0], 1).await?;
        let (c10, _) = render(provider, req, &control, seeds[0], 10).await?;
        if c1 == c10 {
            return Err(AnalyzeError::NoStepControl);
        }
    }
    let score = rows.iter().map(|r| r.ratio).sum::<f64>() / rows.len() as f64;
    Ok(Finding::probe(
        score,
        &ProbeEvidence {
            prompt: req.prompt.clone(),
            edge_cutoff: EDGE_CUTOFF,
            heuristic: true,
            seeds: rows,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::StubProvider;
    use image::Rgb;

    fn req(prompt: &str, seeds: Vec<u64>) -> ProbeRequest {
        ProbeRequest {
            prompt: prompt.into(),
            seeds,
            width: 64,
            height: 64,
            guidance: 7.5,
            provider_id: "stub".into(),
        }
    }

    #[test]
    fn density_oracle() {
        assert_eq!(edge_density(&RgbImage::from_pixel(16, 16, Rgb([9, 9, 9]))), 0.0);
        // vertical step edge at x = 8: columns 7 and 8 respond, 2 of 14 interior columns
        let img = RgbImage::from_fn(16, 16, |x, _| if x < 8 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) });
        assert!((edge_density(&img) - 2.0 / 14.0).abs() < 1e-12);
    }

    #[tokio::test]
    async fn blurry_start_scores_low_sharp_start_scores_one() {
        let p = StubProvider::default().with_sharp_early(["Galaxy Area Rug".to_string()]);
        let low = early_step_probe(&req("Floral Area Rug", vec![0, 1]), &p).await.unwrap();
        assert!(low.score < 0.05, "{}", low.score);
        let high = early_step_probe(&req("Galaxy Area Rug", vec![0, 1]), &p).await.unwrap();
        assert!((high.score - 1.0).abs() < 1e-12, "{}", high.score);
    }

    #[tokio::test]
    async fn seed_order_invariant() {
        let p = StubProvider::default();
        let a = early_step_probe(&req("Floral Area Rug", vec![3, 1, 2]), &p).await.unwrap();
        let b = early_step_probe(&req("Floral Area Rug", vec![2, 3, 1]), &p).await.unwrap();
        assert_eq!(a, b);
    }

    #[tokio::test]
    async fn step_blind_provider_is_an_error() {
        let p = StubProvider::default().ignoring_steps();
        let err = early_step_probe(&req("Floral Area Rug", vec![0, 1]), &p).await.unwrap_err();
        assert!(err.to_string().contains("provider lacks step control"));
    }
}
