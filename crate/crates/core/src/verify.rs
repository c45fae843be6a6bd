//! Built-in oracle suites: clique enumeration against brute force, edge
//! strictness, threshold monotonicity, masking invariance and planted-group
//! recovery. `templeak verify` runs these and fails on any violation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detect::{form_groups, maximal_cliques, Clique, MemberInfo, SimilarityGraph, DEFAULT_NODE_BUDGET};
use crate::imaging;
use crate::percept::{mask_fill, masked_embed, FillPolicy, Mask, Segmenter, StubExtractor, StubSegmenter};
use crate::prompt_forge::Collocation;
use crate::synthcorpus::{composite, plant_benchmark, BenchmarkParams, BlendMode};

/// Deliberate defects used to show that the suites catch regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutant {
    /// Graph edges admitted at `cosine >= threshold`.
    ThresholdOffByOne,
}

impl FromStr for Mutant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "threshold-off-by-one" => Ok(Self::ThresholdOffByOne),
            other => Err(format!("unknown mutant {other:?}; known: threshold-off-by-one")),
        }
    }
}

impl fmt::Display for Mutant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("threshold-off-by-one")
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub quick: bool,
    pub mutant: Option<Mutant>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub invariant: &'static str,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Every maximal clique of size >= 2 by checking all `2^n` subsets; sorted
/// like [`maximal_cliques`]. Only for small graphs.
pub fn brute_force_cliques(nodes: &[String], adjacent: impl Fn(usize, usize) -> bool) -> Vec<Vec<String>> {
    let n = nodes.len();
    assert!(n <= 20, "brute force is exponential");
    let is_clique = |set: u32| {
        (0..n).all(|i| set & (1 << i) == 0 || (i + 1..n).all(|j| set & (1 << j) == 0 || adjacent(i, j)))
    };
    let mut out = Vec::new();
    for set in 1u32..(1 << n) {
        if set.count_ones() < 2 || !is_clique(set) {
            continue;
        }
        let extendable = (0..n).any(|v| set & (1 << v) == 0 && (0..n).all(|u| set & (1 << u) == 0 || adjacent(u, v)));
        if !extendable {
            let mut m: Vec<String> = (0..n).filter(|i| set & (1 << i) != 0).map(|i| nodes[i].clone()).collect();
            m.sort();
            out.push(m);
        }
    }
    out.sort_by(|a: &Vec<String>, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    out
}

fn admits(score: f64, threshold: f64, mutant: Option<Mutant>) -> bool {
    match mutant {
        Some(Mutant::ThresholdOffByOne) => score >= threshold,
        None => score > threshold,
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)
}

/// Graph over named unit vectors under the (possibly mutated) edge rule.
fn graph_of(vectors: &[(String, Vec<f64>)], threshold: f64, mutant: Option<Mutant>) -> SimilarityGraph {
    let mut edges = BTreeMap::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let s = dot(&vectors[i].1, &vectors[j].1);
            if admits(s, threshold, mutant) {
                edges.insert((i, j), s);
            }
        }
    }
    SimilarityGraph::from_edges(vectors.iter().map(|v| v.0.clone()).collect(), edges, threshold)
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    imaging::normalize((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn clustered(rng: &mut ChaCha8Rng, clusters: usize, per: usize, noise: f64, dim: usize) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for c in 0..clusters {
        let center = unit(rng, dim);
        for k in 0..per {
            let v = center.iter().map(|x| x + rng.random_range(-noise..noise)).collect();
            out.push((format!("c{c:02}m{k:02}"), imaging::normalize(v)));
        }
    }
    out
}

fn check(name: &'static str, invariant: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name,
        invariant,
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

fn clique_oracle(graphs: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c11);
    for g in 0..graphs {
        let n = rng.random_range(1..=12usize);
        let density = rng.random_range(0.1..=0.9);
        let nodes: Vec<String> = (0..n).map(|i| format!("n{i:02}")).collect();
        let mut edges = BTreeMap::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(density) {
                    edges.insert((i, j), 1.0);
                }
            }
        }
        let graph = SimilarityGraph::from_edges(nodes.clone(), edges, 0.5);
        let got: Vec<Vec<String>> = maximal_cliques(&graph, DEFAULT_NODE_BUDGET)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|c| c.members)
            .collect();
        let want = brute_force_cliques(&nodes, |i, j| graph.has_edge(i, j));
        if got != want {
            return Err(format!("graph {g} ({n} nodes): enumeration {got:?} != brute force {want:?}"));
        }
    }
    Ok(format!("{graphs} random graphs match brute force"))
}

fn edge_strictness(mutant: Option<Mutant>) -> Result<String, String> {
    let t: f64 = 0.95;
    // exactly at the threshold: e1 . (t, sqrt(1 - t^2)) == t
    let mut vectors = vec![
        ("a".to_string(), vec![1.0, 0.0]),
        ("b".to_string(), vec![t, (1.0 - t * t).sqrt()]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0xed6e);
    for (k, v) in clustered(&mut rng, 3, 4, 0.05, 2).into_iter().enumerate() {
        vectors.push((format!("r{k:02}"), v.1));
    }
    let graph = graph_of(&vectors, t, mutant);
    for (&(i, j), &s) in &graph.edges {
        if s.is_nan() || s <= graph.threshold {
            return Err(format!(
                "edge {}-{} has score {s} which is not above threshold {}",
                graph.nodes[i], graph.nodes[j], graph.threshold
            ));
        }
    }
    Ok(format!("{} edges, all strictly above {t}", graph.edges.len()))
}

fn monotonicity(mutant: Option<Mutant>, trials: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3070);
    for trial in 0..trials {
        let vectors = clustered(&mut rng, 3, 5, 0.35, 8);
        let (lo, hi) = (0.9, 0.95);
        let g_lo = graph_of(&vectors, lo, mutant);
        let g_hi = graph_of(&vectors, hi, mutant);
        if let Some(e) = g_hi.edges.keys().find(|e| !g_lo.edges.contains_key(e)) {
            return Err(format!("trial {trial}: edge {e:?} appears only at the higher threshold"));
        }
        let c_lo = maximal_cliques(&g_lo, DEFAULT_NODE_BUDGET).map_err(|e| e.to_string())?;
        let c_hi = maximal_cliques(&g_hi, DEFAULT_NODE_BUDGET).map_err(|e| e.to_string())?;
        for c in &c_hi {
            let covered = c_lo
                .iter()
                .any(|d| c.members.iter().all(|m| d.members.binary_search(m).is_ok()));
            if !covered {
                return Err(format!("trial {trial}: clique {:?} at {hi} is in no clique at {lo}", c.members));
            }
        }
        for c in &c_hi {
            let consistent = c.members.iter().enumerate().all(|(a, x)| {
                c.members[a + 1..].iter().all(|y| {
                    let vx = &vectors.iter().find(|v| &v.0 == x).expect("member").1;
                    let vy = &vectors.iter().find(|v| &v.0 == y).expect("member").1;
                    dot(vx, vy) > hi
                })
            });
            if !consistent {
                return Err(format!("trial {trial}: clique {:?} has a pair at or below {hi}", c.members));
            }
        }
    }
    Ok(format!("{trials} clustered trials monotone in threshold"))
}

fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Mask {
    if rng.random_bool(0.5) {
        let (mw, mh) = (rng.random_range(1..=w), rng.random_range(1..=h));
        let (x, y) = (rng.random_range(0..=w - mw), rng.random_range(0..=h - mh));
        Mask::rect(w, h, x, y, mw, mh, "rug")
    } else {
        let p = rng.random_range(0.0..1.0);
        let bits = (0..w * h).map(|_| rng.random_bool(p)).collect();
        Mask::from_bits(w, h, bits, "rug").expect("sized bits")
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

async fn masking_invariance(pairs: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a5c);
    for k in 0..pairs {
        let (w, h) = (rng.random_range(4..48u32), rng.random_range(4..48u32));
        let x = random_image(&mut rng, w, h);
        let mask = random_mask(&mut rng, w, h);
        let mut y = x.clone();
        for (px, py, p) in y.enumerate_pixels_mut() {
            if mask.get(px, py) {
                *p = Rgb([rng.random(), rng.random(), rng.random()]);
            }
        }
        let ex = masked_embed(&StubExtractor, &x, "x", Some(&mask), FillPolicy::Mean)
            .await
            .map_err(|e| e.to_string())?;
        let ey = masked_embed(&StubExtractor, &y, "y", Some(&mask), FillPolicy::Mean)
            .await
            .map_err(|e| e.to_string())?;
        let same = ex.vector.len() == ey.vector.len()
            && ex.vector.iter().zip(&ey.vector).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("pair {k} ({w}x{h}, coverage {:.3}): embeddings differ", mask.coverage()));
        }
        if ex.norm_error() >= 1e-6 {
            return Err(format!("pair {k}: vector norm off by {}", ex.norm_error()));
        }
    }
    Ok(format!("{pairs} random (image, mask) pairs bitwise invariant"))
}

fn outside_unchanged(pairs: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0f11);
    for k in 0..pairs {
        let (w, h) = (rng.random_range(4..40u32), rng.random_range(4..40u32));
        let base = random_image(&mut rng, w, h);
        let mask = random_mask(&mut rng, w, h);
        let (pw, ph) = (rng.random_range(1..9), rng.random_range(1..9));
        let pattern = random_image(&mut rng, pw, ph);
        let mut outputs = vec![
            ("mask_fill mean", mask_fill(&base, &mask, FillPolicy::Mean).map_err(|e| e.to_string())?),
            (
                "mask_fill constant",
                mask_fill(&base, &mask, FillPolicy::Constant([1, 2, 3])).map_err(|e| e.to_string())?,
            ),
        ];
        for (name, blend) in [
            ("composite replace", BlendMode::Replace),
            ("composite alpha", BlendMode::Alpha(0.4)),
            ("composite multiply", BlendMode::Multiply),
        ] {
            outputs.push((name, composite(&base, &mask, &pattern, blend).map_err(|e| e.to_string())?));
        }
        for (name, out) in outputs {
            let touched = base
                .enumerate_pixels()
                .find(|&(x, y, p)| !mask.get(x, y) && out.get_pixel(x, y) != p);
            if let Some((x, y, _)) = touched {
                return Err(format!("pair {k}: {name} changed pixel ({x}, {y}) outside the mask"));
            }
        }
    }
    Ok(format!("{pairs} random cases leave unmasked pixels byte-identical"))
}

async fn planted_recovery(params: BenchmarkParams, mutant: Option<Mutant>) -> Result<String, String> {
    let corpus = plant_benchmark(&params).map_err(|e| e.to_string())?;
    let seg = StubSegmenter::new(corpus.atlas.clone());
    let mut partitions: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    let mut members = BTreeMap::new();
    for p in &corpus.pairs {
        let img = &corpus.images[&p.image_digest];
        let mask = match &p.segmentation_class {
            Some(c) => Some(seg.segment_image(img, c).await.map_err(|e| e.to_string())?),
            None => None,
        };
        let e = masked_embed(&StubExtractor, img, &p.image_digest, mask.as_ref(), FillPolicy::Mean)
            .await
            .map_err(|e| e.to_string())?;
        let mut coll = Collocation::new(&p.category, "bench").map_err(|e| e.to_string())?;
        if let Some(c) = &p.segmentation_class {
            coll = coll.with_class(c);
        }
        members.insert(
            p.image_digest.clone(),
            MemberInfo {
                collocation: coll,
                embedding: e.vector.clone(),
            },
        );
        partitions.entry(p.category.clone()).or_default().push((p.image_digest.clone(), e.vector));
    }
    let mut cliques: Vec<Clique> = Vec::new();
    for vectors in partitions.values() {
        let graph = graph_of(vectors, 0.95, mutant);
        cliques.extend(maximal_cliques(&graph, DEFAULT_NODE_BUDGET).map_err(|e| e.to_string())?);
    }
    let groups = form_groups("verify", &cliques, &members).map_err(|e| e.to_string())?;
    let got: BTreeSet<Vec<String>> = groups.into_iter().map(|g| g.members).collect();
    let want: BTreeSet<Vec<String>> = corpus.truth_groups().into_values().collect();
    if got != want {
        let found = got.intersection(&want).count();
        return Err(format!(
            "recovered {} groups, {found} of {} truth groups exact",
            got.len(),
            want.len()
        ));
    }
    Ok(format!("{} planted groups recovered exactly from {} images", want.len(), corpus.pairs.len()))
}

/// Run every suite. `quick` trims iteration counts to stay well under ten
/// seconds.
pub async fn run_verify(opts: VerifyOptions) -> VerifyReport {
    let VerifyOptions { quick, mutant } = opts;
    let (graphs, pairs, trials) = if quick { (25, 50, 5) } else { (100, 200, 20) };
    let bench = if quick {
        let mut p = BenchmarkParams::new(3, 4, 6, 0);
        p.width = 128;
        p.height = 128;
        p
    } else {
        BenchmarkParams::new(5, 6, 20, 0)
    };
    let mut checks = vec![
        check(
            "clique-oracle",
            "maximal_cliques equals brute-force subset enumeration",
            || clique_oracle(graphs),
        ),
        check("edge-strictness", "every edge score > threshold", || edge_strictness(mutant)),
        check(
            "threshold-monotonicity",
            "raising the threshold never adds edges or cliques",
            || monotonicity(mutant, trials),
        ),
        check(
            "outside-unchanged",
            "mask_fill and composite never alter unmasked pixels",
            || outside_unchanged(pairs),
        ),
    ];
    let t = Instant::now();
    let r = masking_invariance(pairs).await;
    checks.push(CheckResult {
        name: "masking-invariance",
        invariant: "masked_embed ignores pixels inside the mask",
        passed: r.is_ok(),
        detail: r.unwrap_or_else(|e| e),
        elapsed: t.elapsed(),
    });
    let t = Instant::now();
    let r = planted_recovery(bench, mutant).await;
    checks.push(CheckResult {
        name: "planted-recovery",
        invariant: "planted benchmark groups recovered exactly",
        passed: r.is_ok(),
        detail: r.unwrap_or_else(|e| e),
        elapsed: t.elapsed(),
    });
    VerifyReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_small_cases() {
        let nodes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let path = |i: usize, j: usize| (i, j) == (0, 1) || (i, j) == (1, 2) || (i, j) == (1, 0) || (i, j) == (2, 1);
        assert_eq!(brute_force_cliques(&nodes, path), vec![vec!["a", "b"], vec!["b", "c"]]);
        assert_eq!(brute_force_cliques(&nodes, |_, _| true), vec![vec!["a", "b", "c"]]);
        assert!(brute_force_cliques(&nodes, |_, _| false).is_empty());
    }

    #[tokio::test]
    async fn quick_suite_passes() {
        let r = run_verify(VerifyOptions { quick: true, mutant: None }).await;
        for c in &r.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[tokio::test]
    async fn mutant_is_caught_by_name() {
        let r = run_verify(VerifyOptions {
            quick: true,
            mutant: Some(Mutant::ThresholdOffByOne),
        })
        .await;
        assert!(!r.passed());
        let failed: Vec<_> = r.failures().map(|c| c.name).collect();
        assert!(failed.contains(&"edge-strictness"), "{failed:?}");
        assert_eq!("threshold-off-by-one".parse::<Mutant>().unwrap(), Mutant::ThresholdOffByOne);
        assert!("nope".parse::<Mutant>().is_err());
    }
}
