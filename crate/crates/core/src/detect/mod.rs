//! Similarity graph over masked embeddings and the cliques/groups of
//! suspected template-memorized generations found in it.

mod cliques;
mod report;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging;
use crate::percept::MaskedEmbedding;
use crate::prompt_forge::Collocation;

pub use cliques::{connected_components, maximal_cliques, DEFAULT_NODE_BUDGET};
pub use report::{DetectionReport, ReportGroup, SweepPoint, ThresholdSweepRow, REPORT_SWEEP_THRESHOLDS};

/// Pairs strictly above this cosine are adjacent.
pub const DEFAULT_THRESHOLD: f64 = 0.95;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("duplicate node {0}")]
    DuplicateNode(String),
    #[error("graph has {nodes} nodes, over the budget of {budget}; partition the sweep per prompt or per collocation")]
    NodeBudget { nodes: usize, budget: usize },
    #[error("clique member {0} has no generation record")]
    MissingRecord(String),
    #[error("illegal status transition {from:?} -> {to:?}")]
    BadTransition { from: GroupStatus, to: GroupStatus },
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, DetectError> {
    if u.len() != v.len() {
        return Err(DetectError::DimMismatch(u.len(), v.len()));
    }
    Ok(dot(u, v))
}

#[inline]
fn dot(u: &[f64], v: &[f64]) -> f64 {
    // rounding can push the dot of identical unit vectors just past 1
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub nodes: Vec<String>,
    /// `(i, j)` with `i < j`, index into `nodes`, mapped to cosine.
    pub edges: BTreeMap<(usize, usize), f64>,
    pub threshold: f64,
    /// Sorted neighbour lists.
    pub adjacency: Vec<Vec<usize>>,
}

impl SimilarityGraph {
    pub fn from_edges(nodes: Vec<String>, edges: BTreeMap<(usize, usize), f64>, threshold: f64) -> Self {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for &(i, j) in edges.keys() {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        adjacency.iter_mut().for_each(|a| a.sort_unstable());
        Self {
            nodes,
            edges,
            threshold,
            adjacency,
        }
    }

    pub fn score(&self, i: usize, j: usize) -> Option<f64> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.edges.get(&key).copied()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.score(i, j).is_some()
    }

    fn clique_from_indices(&self, idx: &[usize]) -> Clique {
        let mut min = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                min = min.min(self.score(i, j).expect("clique pairs are edges"));
            }
        }
        let mut members: Vec<String> = idx.iter().map(|&i| self.nodes[i].clone()).collect();
        members.sort();
        Clique {
            members,
            min_pairwise: min,
        }
    }
}

/// Edge `(i, j)` iff `cosine > threshold`.
pub fn build_graph(embeddings: &[MaskedEmbedding], threshold: f64) -> Result<SimilarityGraph, DetectError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(DetectError::BadThreshold(threshold));
    }
    if let Some(first) = embeddings.first() {
        if let Some(bad) = embeddings.iter().find(|e| e.vector.len() != first.vector.len()) {
            return Err(DetectError::DimMismatch(first.vector.len(), bad.vector.len()));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for e in embeddings {
        if !seen.insert(e.image_digest.as_str()) {
            return Err(DetectError::DuplicateNode(e.image_digest.clone()));
        }
    }
    let edges: BTreeMap<(usize, usize), f64> = (0..embeddings.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let vi = &embeddings[i].vector;
            (i + 1..embeddings.len()).filter_map(move |j| {
                let s = dot(vi, &embeddings[j].vector);
                (s > threshold).then_some(((i, j), s))
            })
        })
        .collect();
    let nodes = embeddings.iter().map(|e| e.image_digest.clone()).collect();
    Ok(SimilarityGraph::from_edges(nodes, edges, threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clique {
    pub members: Vec<String>,
    pub min_pairwise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStatus {
    Suspected,
    Confirmed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateGroup {
    pub group_id: String,
    pub members: Vec<String>,
    pub collocation: Collocation,
    pub fingerprint: Vec<f64>,
    pub min_pairwise: f64,
    pub status: GroupStatus,
}

impl TemplateGroup {
    pub fn transition(&mut self, to: GroupStatus) -> Result<(), DetectError> {
        if self.status != GroupStatus::Suspected || to == GroupStatus::Suspected {
            return Err(DetectError::BadTransition { from: self.status, to });
        }
        self.status = to;
        Ok(())
    }

    pub fn fingerprint_digest(&self) -> String {
        imaging::vector_digest(&self.fingerprint)
    }
}

/// What [`form_groups`] needs to know about each clique member.
#[derive(Debug, Clone)]
pub struct MemberInfo {
    pub collocation: Collocation,
    pub embedding: Vec<f64>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

/// Merge cliques that share a member into template groups. Each group takes
/// the majority collocation of its members (ties: lexicographically
/// smallest text) and a fingerprint equal to the normalized member mean.
pub fn form_groups(
    run_id: &str,
    cliques: &[Clique],
    members: &BTreeMap<String, MemberInfo>,
) -> Result<Vec<TemplateGroup>, DetectError> {
    for c in cliques {
        if let Some(m) = c.members.iter().find(|m| !members.contains_key(*m)) {
            return Err(DetectError::MissingRecord(m.clone()));
        }
    }
    let mut uf = UnionFind((0..cliques.len()).collect());
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (ci, c) in cliques.iter().enumerate() {
        for m in &c.members {
            match owner.get(m.as_str()) {
                Some(&other) => uf.union(ci, other),
                None => {
                    owner.insert(m, ci);
                }
            }
        }
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for ci in 0..cliques.len() {
        let root = uf.find(ci);
        buckets.entry(root).or_default().push(ci);
    }
    let mut groups = Vec::with_capacity(buckets.len());
    for idxs in buckets.values() {
        let mut digests: Vec<String> = idxs
            .iter()
            .flat_map(|&ci| cliques[ci].members.iter().cloned())
            .collect();
        digests.sort();
        digests.dedup();
        let min_pairwise = idxs
            .iter()
            .map(|&ci| cliques[ci].min_pairwise)
            .fold(f64::INFINITY, f64::min);

        let mut votes: BTreeMap<&str, (usize, &Collocation)> = BTreeMap::new();
        for d in &digests {
            let c = &members[d].collocation;
            votes.entry(c.text.as_str()).or_insert((0, c)).0 += 1;
        }
        // BTreeMap iterates texts in ascending order, so the first maximum wins ties.
        let collocation = votes
            .values()
            .fold(None::<(usize, &Collocation)>, |best, &(n, c)| match best {
                Some((bn, _)) if bn >= n => best,
                _ => Some((n, c)),
            })
            .map(|(_, c)| c.clone())
            .expect("group has members");

        let dim = members[&digests[0]].embedding.len();
        let mut sum = vec![0.0; dim];
        for d in &digests {
            let e = &members[d].embedding;
            if e.len() != dim {
                return Err(DetectError::DimMismatch(dim, e.len()));
            }
            sum.iter_mut().zip(e).for_each(|(s, x)| *s += x);
        }
        let group_id = group_id(run_id, &digests);
        groups.push(TemplateGroup {
            group_id,
            members: digests,
            collocation,
            fingerprint: imaging::normalize(sum),
            min_pairwise,
            status: GroupStatus::Suspected,
        });
    }
    groups.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then_with(|| a.members.cmp(&b.members))
    });
    Ok(groups)
}

pub fn group_id(run_id: &str, sorted_members: &[String]) -> String {
    let mut key = String::from(run_id);
    for m in sorted_members {
        key.push('\n');
        key.push_str(m);
    }
    format!("g{}", &imaging::sha256_hex(key.as_bytes())[..16])
}
