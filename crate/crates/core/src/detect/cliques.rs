//! Exact maximal-clique enumeration (Bron-Kerbosch with Tomita pivoting)
//! over sorted adjacency lists.

use super::{Clique, DetectError, SimilarityGraph};

/// Largest graph enumerated in one call. Sweeps larger than this must be
/// partitioned (per collocation by default).
pub const DEFAULT_NODE_BUDGET: usize = 20_000;

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn count_common(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn expand(adj: &[Vec<usize>], r: &mut Vec<usize>, mut p: Vec<usize>, mut x: Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if p.is_empty() {
        if x.is_empty() {
            out.push(r.clone());
        }
        return;
    }
    // pivot: vertex of P ∪ X with the most neighbours in P (lowest index on ties)
    let pivot = p
        .iter()
        .chain(x.iter())
        .copied()
        .max_by(|&a, &b| {
            count_common(&adj[a], &p)
                .cmp(&count_common(&adj[b], &p))
                .then(b.cmp(&a))
        })
        .expect("P is non-empty");
    let candidates: Vec<usize> = p
        .iter()
        .copied()
        .filter(|v| adj[pivot].binary_search(v).is_err())
        .collect();
    for v in candidates {
        r.push(v);
        expand(adj, r, intersect(&p, &adj[v]), intersect(&x, &adj[v]), out);
        r.pop();
        if let Ok(pos) = p.binary_search(&v) {
            p.remove(pos);
        }
        let pos = x.binary_search(&v).unwrap_or_else(|e| e);
        x.insert(pos, v);
    }
}

/// Every maximal clique with at least two members, members sorted by
/// digest, list sorted by size (descending) then members (lexicographic).
pub fn maximal_cliques(graph: &SimilarityGraph, node_budget: usize) -> Result<Vec<Clique>, DetectError> {
    let n = graph.nodes.len();
    if n > node_budget {
        return Err(DetectError::NodeBudget { nodes: n, budget: node_budget });
    }
    let mut raw = Vec::new();
    let mut r = Vec::new();
    expand(&graph.adjacency, &mut r, (0..n).collect(), Vec::new(), &mut raw);
    let mut cliques: Vec<Clique> = raw
        .into_iter()
        .filter(|c| c.len() >= 2)
        .map(|c| graph.clique_from_indices(&c))
        .collect();
    sort_cliques(&mut cliques);
    Ok(cliques)
}

pub(crate) fn sort_cliques(cliques: &mut [Clique]) {
    cliques.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then_with(|| a.members.cmp(&b.members))
    });
}

/// Connected components with at least two members. Offered for comparison
/// only: components chain borderline pairs that are not pairwise similar.
/// `min_pairwise` here is the weakest edge inside the component.
pub fn connected_components(graph: &SimilarityGraph) -> Vec<Clique> {
    let n = graph.nodes.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &u in &graph.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        if comp.len() >= 2 {
            comp.sort_unstable();
            let min = graph
                .edges
                .iter()
                .filter(|((a, _), _)| comp.binary_search(a).is_ok())
                .map(|(_, &s)| s)
                .fold(f64::INFINITY, f64::min);
            let mut members: Vec<String> = comp.iter().map(|&i| graph.nodes[i].clone()).collect();
            members.sort();
            out.push(Clique {
                members,
                min_pairwise: min,
            });
        }
    }
    sort_cliques(&mut out);
    out
}
