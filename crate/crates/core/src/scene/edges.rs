//! Connectivity-preserving random edge sets.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Edge count for `n` nodes at removal ratio `rho`:
/// `max(n − 1, ⌊(1 − rho)·n(n − 1)⌋)`.
pub fn expected_edge_count(n: usize, rho: f64) -> usize {
    let full = n * (n - 1);
    let target = ((1.0 - rho) * full as f64).floor() as usize;
    target.max(n - 1)
}

/// A random spanning tree with random orientations, topped up with
/// distinct directed edges drawn uniformly from the rest of the complete
/// directed graph until `⌊(1 − rho)·n(n − 1)⌋` edges are reached.
///
/// The tree comes from an Aldous–Broder walk on the complete graph.
pub fn generate_edges(node_ids: &[u32], rho: f64, seed: u64) -> Result<Vec<(u32, u32)>> {
    let n = node_ids.len();
    if n < 2 {
        return Err(Error::invalid("edge generation needs at least 2 nodes"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho {rho} outside [0, 1]")));
    }
    let mut rng = SeededRng::new(seed);

    let mut visited = vec![false; n];
    let mut current = rng.below(n);
    visited[current] = true;
    let mut remaining = n - 1;
    let mut tree: Vec<(usize, usize)> = Vec::with_capacity(n - 1);
    while remaining > 0 {
        // Uniform neighbor in the complete graph.
        let mut next = rng.below(n - 1);
        if next >= current {
            next += 1;
        }
        if !visited[next] {
            visited[next] = true;
            remaining -= 1;
            if rng.uniform() < 0.5 {
                tree.push((current, next));
            } else {
                tree.push((next, current));
            }
        }
        current = next;
    }

    let full = n * (n - 1);
    let target = ((1.0 - rho) * full as f64).floor() as usize;
    let n_rem = target.saturating_sub(tree.len());

    let in_tree: HashSet<(usize, usize)> = tree.iter().copied().collect();
    let candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .filter(|e| !in_tree.contains(e))
        .collect();
    let extra = rng.choose_distinct(candidates.len(), n_rem);

    Ok(tree
        .into_iter()
        .chain(extra.into_iter().map(|k| candidates[k]))
        .map(|(a, b)| (node_ids[a], node_ids[b]))
        .collect())
}

/// Number of nodes reachable from `nodes[0]` when edge directions are ignored.
pub fn undirected_reach(nodes: &[u32], edges: &[(u32, u32)]) -> usize {
    if nodes.is_empty() {
        return 0;
    }
    let index: std::collections::HashMap<u32, usize> =
        nodes.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut adj = vec![Vec::new(); nodes.len()];
    for &(a, b) in edges {
        if let (Some(&i), Some(&j)) = (index.get(&a), index.get(&b)) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let mut seen = vec![false; nodes.len()];
    let mut queue = std::collections::VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count
}
