//! Ward agglomeration of scene nodes into subgraph node sets.

use super::synth::SceneNode;
use crate::error::{Error, Result};

/// Agglomerates node centroids with Ward linkage
/// `d(A, B) = sqrt(|A||B| / (|A|+|B|)) · ‖μ_A − μ_B‖` and returns the first
/// partition in the merge sequence whose clusters all have at least `k_min`
/// nodes. With fewer than `k_min` nodes the result is a single cluster.
///
/// Clusters hold node ids sorted ascending and are ordered by smallest id.
pub fn partition_subgraphs(nodes: &[SceneNode], k_min: usize) -> Result<Vec<Vec<u32>>> {
    if k_min < 1 {
        return Err(Error::invalid("k_min must be >= 1"));
    }
    if nodes.is_empty() {
        return Err(Error::invalid("cannot partition an empty node list"));
    }
    let centroids: Vec<[f64; 3]> = nodes.iter().map(|n| n.descriptor.centroid).collect();
    let ids: Vec<u32> = nodes.iter().map(|n| n.id).collect();
    let groups = ward_until(&centroids, k_min);
    let mut out: Vec<Vec<u32>> = groups
        .into_iter()
        .map(|g| {
            let mut v: Vec<u32> = g.into_iter().map(|i| ids[i]).collect();
            v.sort_unstable();
            v
        })
        .collect();
    out.sort_by_key(|c| c[0]);
    Ok(out)
}

/// Ward agglomeration on raw points, returning index clusters. Squared
/// linkages are maintained with the Lance–Williams recurrence.
pub fn ward_until(points: &[[f64; 3]], k_min: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut clusters: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    // d2[i][j] = |A||B|/(|A|+|B|) ‖μ_A − μ_B‖², singletons give ½‖a − b‖².
    let mut d2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let d: f64 = (0..3).map(|k| (points[i][k] - points[j][k]).powi(2)).sum();
            d2[i][j] = 0.5 * d;
        }
    }
    let satisfied = |cl: &[Option<Vec<usize>>]| cl.iter().flatten().all(|c| c.len() >= k_min);

    while !satisfied(&clusters) {
        let alive: Vec<usize> = (0..n).filter(|&i| clusters[i].is_some()).collect();
        if alive.len() == 1 {
            break;
        }
        let mut best = (f64::INFINITY, 0, 0);
        for (a, &i) in alive.iter().enumerate() {
            for &j in &alive[a + 1..] {
                if d2[i][j] < best.0 {
                    best = (d2[i][j], i, j);
                }
            }
        }
        let (_, i, j) = best;
        let ni = clusters[i].as_ref().unwrap().len() as f64;
        let nj = clusters[j].as_ref().unwrap().len() as f64;
        for &k in &alive {
            if k == i || k == j {
                continue;
            }
            let nk = clusters[k].as_ref().unwrap().len() as f64;
            let v = ((ni + nk) * d2[i][k] + (nj + nk) * d2[j][k] - nk * d2[i][j]) / (ni + nj + nk);
            d2[i][k] = v;
            d2[k][i] = v;
        }
        let moved = clusters[j].take().unwrap();
        clusters[i].as_mut().unwrap().extend(moved);
    }
    clusters.into_iter().flatten().collect()
}
