use std::collections::BTreeSet;

use image::{imageops, RgbImage};

use super::{AnalyzeError, CellMatch, Finding, InterpolationEvidence};
use crate::imaging;

/// `(rows, cols)`.
pub const DEFAULT_PATCH_GRID: (u32, u32) = (4, 4);
pub const DEFAULT_PATCH_THRESHOLD: f64 = 0.95;
/// Each patch is described by an 8x8 luminance sub-grid.
const PATCH_CELLS: u32 = 8;

/// Per-cell unit features, row-major. Flat cells carry no feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: u32,
    pub cols: u32,
    pub patch_features: Vec<Option<Vec<f64>>>,
}

fn bounds(i: u32, n: u32, len: u32) -> (u32, u32) {
    let lo = (i as u64 * len as u64 / n as u64) as u32;
    let hi = ((i + 1) as u64 * len as u64 / n as u64) as u32;
    (lo, hi)
}

pub fn patch_grid(img: &RgbImage, rows: u32, cols: u32) -> Result<PatchGrid, AnalyzeError> {
    if rows < 2 || cols < 2 || rows > img.height() || cols > img.width() {
        return Err(AnalyzeError::DegenerateGrid { rows, cols });
    }
    let mut patch_features = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        let (y0, y1) = bounds(r, rows, img.height());
        for c in 0..cols {
            let (x0, x1) = bounds(c, cols, img.width());
            let cell = imageops::crop_imm(img, x0, y0, x1 - x0, y1 - y0).to_image();
            let mut g = imaging::luma_grid(&cell, PATCH_CELLS.min(cell.width()), PATCH_CELLS.min(cell.height()));
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            g.iter_mut().for_each(|v| *v -= mean);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            patch_features.push((norm > 1e-9).then(|| g.iter().map(|v| v / norm).collect()));
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch_features,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::NEG_INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attribute each cell of `image` to its best-matching source. An
/// interpolation finding is emitted when at least two distinct sources win
/// a cell above `threshold`. Ties go to the smaller source id, so the
/// result does not depend on the order of `sources`.
pub fn patch_match(
    image_id: &str,
    image: &RgbImage,
    sources: &[(String, RgbImage)],
    grid: (u32, u32),
    threshold: f64,
) -> Result<Vec<Finding>, AnalyzeError> {
    let (rows, cols) = grid;
    let target = patch_grid(image, rows, cols)?;
    if sources.is_empty() {
        return Err(AnalyzeError::EmptyCorpus);
    }
    let mut srcs: Vec<(&str, PatchGrid)> = sources
        .iter()
        .map(|(id, img)| Ok((id.as_str(), patch_grid(img, rows, cols)?)))
        .collect::<Result<_, AnalyzeError>>()?;
    srcs.sort_by(|a, b| a.0.cmp(b.0));

    let mut cells = Vec::new();
    for (k, feat) in target.patch_features.iter().enumerate() {
        let Some(f) = feat else { continue };
        let mut best: Option<(&str, f64)> = None;
        for (id, g) in &srcs {
            let Some(sf) = &g.patch_features[k] else { continue };
            let s = dot(f, sf);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((id, s));
            }
        }
        if let Some((id, score)) = best.filter(|&(_, s)| s > threshold) {
            cells.push(CellMatch {
                row: k as u32 / cols,
                col: k as u32 % cols,
                source: id.to_string(),
                score,
            });
        }
    }
    let distinct: BTreeSet<&str> = cells.iter().map(|c| c.source.as_str()).collect();
    if distinct.len() < 2 {
        return Ok(Vec::new());
    }
    let score = cells.iter().map(|c| c.score).sum::<f64>() / cells.len() as f64;
    let ev = InterpolationEvidence {
        rows,
        cols,
        threshold,
        sources: distinct.into_iter().map(String::from).collect(),
        cells,
    };
    Ok(vec![Finding::interpolation(image_id, score, &ev)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::stub_image;

    fn stitched(a: &RgbImage, b: &RgbImage) -> RgbImage {
        RgbImage::from_fn(a.width(), a.height(), |x, y| {
            if x < a.width() / 2 {
                *a.get_pixel(x, y)
            } else {
                *b.get_pixel(x, y)
            }
        })
    }

    #[test]
    fn stitched_image_names_both_sources() {
        let a = stub_image("src-a", 0, 128, 128);
        let b = stub_image("src-b", 0, 128, 128);
        let img = stitched(&a, &b);
        let sources = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let found = patch_match("img", &img, &sources, DEFAULT_PATCH_GRID, DEFAULT_PATCH_THRESHOLD).unwrap();
        assert_eq!(found.len(), 1);
        let ev: InterpolationEvidence = found[0].evidence_as().unwrap();
        assert_eq!(ev.sources, vec!["a", "b"]);
        for c in &ev.cells {
            assert_eq!(c.source, if c.col < 2 { "a" } else { "b" });
        }
        let reversed = vec![sources[1].clone(), sources[0].clone()];
        assert_eq!(
            patch_match("img", &img, &reversed, DEFAULT_PATCH_GRID, DEFAULT_PATCH_THRESHOLD).unwrap(),
            found
        );
    }

    #[test]
    fn single_source_and_unrelated_are_quiet() {
        let a = stub_image("src-a", 0, 128, 128);
        let sources = vec![("a".to_string(), a.clone()), ("b".to_string(), stub_image("src-b", 0, 128, 128))];
        assert!(patch_match("img", &a, &sources, DEFAULT_PATCH_GRID, 0.95).unwrap().is_empty());
        let other = stub_image("unrelated", 9, 128, 128);
        assert!(patch_match("img", &other, &sources, DEFAULT_PATCH_GRID, 0.95).unwrap().is_empty());
    }

    #[test]
    fn degenerate_inputs() {
        let a = stub_image("a", 0, 64, 64);
        assert!(matches!(
            patch_match("i", &a, &[("a".into(), a.clone())], (1, 4), 0.95),
            Err(AnalyzeError::DegenerateGrid { .. })
        ));
        assert!(matches!(patch_match("i", &a, &[], (4, 4), 0.95), Err(AnalyzeError::EmptyCorpus)));
    }
}
