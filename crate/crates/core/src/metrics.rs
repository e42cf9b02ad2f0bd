//! Clustering quality of frozen embeddings and layout-recovery error.

use std::collections::BTreeMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scene::{compute_descriptor, Point, SubgraphSample, SCALE_FLOOR};
use crate::tensor::Tensor;

/// k-means++ seeding followed by Lloyd iterations until the assignment
/// stops changing. Ties go to the lowest cluster index; an emptied cluster
/// keeps its previous center.
pub fn kmeans(features: &Tensor, k: usize, seed: u64, max_iters: usize) -> Result<Vec<usize>> {
    let n = features.rows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} points")));
    }
    let d = features.cols();
    let mut rng = SeededRng::new(seed);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut centers: Vec<Vec<f64>> = vec![features.row(rng.below(n)).to_vec()];
    let mut best: Vec<f64> = (0..n).map(|i| sq(features.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &b) in best.iter().enumerate() {
                acc += b;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        let c = features.row(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq(features.row(i), &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let row = features.row(i);
            let mut arg = 0;
            let mut bd = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let v = sq(row, c);
                if v < bd {
                    bd = v;
                    arg = j;
                }
            }
            if *a != arg {
                *a = arg;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok(assign)
}

/// Contingency counts indexed by compacted label and cluster ids.
pub fn contingency(y: &[usize], c: &[usize]) -> Result<Vec<Vec<usize>>> {
    if y.len() != c.len() {
        return Err(Error::invalid("labels and assignments differ in length"));
    }
    let compact = |v: &[usize]| {
        let ids: BTreeMap<usize, usize> = v.iter().map(|&x| (x, 0)).collect();
        let ids: BTreeMap<usize, usize> = ids.keys().enumerate().map(|(i, &x)| (x, i)).collect();
        (ids.len(), v.iter().map(|x| ids[x]).collect::<Vec<_>>())
    };
    let (ny, yy) = compact(y);
    let (nc, cc) = compact(c);
    let mut table = vec![vec![0usize; nc]; ny];
    for (a, b) in yy.iter().zip(&cc) {
        table[*a][*b] += 1;
    }
    Ok(table)
}

/// Fraction of points matched under the best one-to-one label/cluster map.
pub fn cluster_acc(y: &[usize], c: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("empty labelling"));
    }
    let table = contingency(y, c)?;
    let size = table.len().max(table[0].len());
    let mut weights = Matrix::new(size, size, 0i64);
    for (i, row) in table.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            weights[(i, j)] = v as i64;
        }
    }
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / y.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2·I(Y;C) / (H(Y) + H(C))`, natural logs; 1.0 when both sides are a
/// single cluster.
pub fn nmi(y: &[usize], c: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("empty labelling"));
    }
    let table = contingency(y, c)?;
    let n = y.len() as f64;
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let (hy, hc) = (entropy(rows.iter().copied(), n), entropy(cols.iter().copied(), n));
    if hy + hc == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > 0 {
                let v = v as f64;
                mi += v / n * (v * n / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    Ok((2.0 * mi / (hy + hc)).clamp(0.0, 1.0))
}

fn choose2(x: usize) -> i128 {
    let x = x as i128;
    x * (x - 1) / 2
}

/// Adjusted Rand index from the contingency table. Numerator and
/// denominator are scaled by the pair count so they stay integral.
pub fn ari(y: &[usize], c: &[usize]) -> Result<f64> {
    if y.len() < 2 {
        return Err(Error::invalid("ARI needs at least two items"));
    }
    let table = contingency(y, c)?;
    let pairs = choose2(y.len());
    let index: i128 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let sum_a: i128 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_b: i128 = (0..table[0].len())
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let num = 2 * (index * pairs - sum_a * sum_b);
    let den = (sum_a + sum_b) * pairs - 2 * sum_a * sum_b;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// Synthetic predicate label: dominant axis of the displacement and its
/// sign (`+x, −x, +y, −y, +z, −z` → 0..6).
pub fn relation_bin(dpos: [f64; 3]) -> usize {
    let axis = (0..3)
        .max_by(|&a, &b| dpos[a].abs().total_cmp(&dpos[b].abs()).then(b.cmp(&a)))
        .unwrap_or(0);
    2 * axis + usize::from(dpos[axis] < 0.0)
}

pub const RELATION_BINS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeLayoutError {
    pub id: u32,
    pub centroid: f64,
    pub extent_log_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutError {
    pub nodes: Vec<NodeLayoutError>,
    pub mean_centroid: f64,
    pub mean_extent_log_ratio: f64,
}

/// Per-node `‖c_rec − c_gt‖` and `|log(L_rec / L_gt)|`, matched by id.
pub fn layout_error(recovered: &[(u32, Vec<Point>)], gt: &SubgraphSample) -> Result<LayoutError> {
    if recovered.len() != gt.nodes.len() {
        return Err(Error::invalid(format!(
            "{} recovered nodes for {} ground-truth nodes",
            recovered.len(),
            gt.nodes.len()
        )));
    }
    let mut nodes = Vec::with_capacity(recovered.len());
    for (id, pts) in recovered {
        let truth = gt
            .node(*id)
            .ok_or_else(|| Error::invalid(format!("recovered node {id} not in sample")))?;
        let d = compute_descriptor(pts)?;
        let c = (0..3)
            .map(|k| (d.centroid[k] - truth.descriptor.centroid[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        let ratio = d.max_length.max(SCALE_FLOOR) / truth.descriptor.max_length.max(SCALE_FLOOR);
        nodes.push(NodeLayoutError {
            id: *id,
            centroid: c,
            extent_log_ratio: ratio.ln().abs(),
        });
    }
    let n = nodes.len().max(1) as f64;
    Ok(LayoutError {
        mean_centroid: nodes.iter().map(|e| e.centroid).sum::<f64>() / n,
        mean_extent_log_ratio: nodes.iter().map(|e| e.extent_log_ratio).sum::<f64>() / n,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(cluster_acc(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        // Pair counts: 0 agree-same, 2 agree-different, 4 disagreements.
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), -0.5);
        assert_eq!(ari(&[0, 0, 1, 1], &[5, 5, 5, 5]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn identical_and_relabelled() {
        let y = [0, 1, 2, 2, 1, 0, 0];
        let c = [7, 4, 9, 9, 4, 7, 7];
        for m in [cluster_acc, nmi, ari] {
            assert!((m(&y, &y).unwrap() - 1.0).abs() < 1e-12);
            assert!((m(&y, &c).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut rng = SeededRng::new(2);
        let mut rows = Vec::new();
        for i in 0..40 {
            let off = if i < 20 { 0.0 } else { 100.0 };
            rows.push(vec![off + 0.1 * rng.normal(), off + 0.1 * rng.normal()]);
        }
        let f = Tensor::from_rows(&rows).unwrap();
        let a = kmeans(&f, 2, 1, 50).unwrap();
        assert!(a[..20].iter().all(|&v| v == a[0]));
        assert!(a[20..].iter().all(|&v| v == a[20]));
        assert_ne!(a[0], a[20]);
        assert_eq!(a, kmeans(&f, 2, 1, 50).unwrap());
        assert!(kmeans(&f, 1, 0, 10).unwrap().iter().all(|&v| v == 0));
        assert!(kmeans(&f, 41, 0, 10).is_err());
    }

    #[test]
    fn relation_bins() {
        assert_eq!(relation_bin([1.0, 0.2, 0.0]), 0);
        assert_eq!(relation_bin([-1.0, 0.2, 0.0]), 1);
        assert_eq!(relation_bin([0.0, -3.0, 1.0]), 3);
        assert_eq!(relation_bin([0.0, 0.0, 2.0]), 4);
    }

    #[test]
    fn shifted_layout() {
        let nodes: Vec<crate::scene::SceneNode> = (0..2)
            .map(|i| crate::scene::SceneNode::new(i, 0, vec![[i as f64, 0.0, 0.0], [i as f64 + 0.5, 1.0, 0.2]]).unwrap())
            .collect();
        let s = SubgraphSample {
            nodes: nodes.clone(),
            edges: vec![],
            anchor: 0,
        };
        let same: Vec<(u32, Vec<Point>)> = nodes.iter().map(|n| (n.id, n.points.clone())).collect();
        let e = layout_error(&same, &s).unwrap();
        assert_eq!(e.mean_centroid, 0.0);
        assert_eq!(e.mean_extent_log_ratio, 0.0);
        let moved: Vec<(u32, Vec<Point>)> = nodes
            .iter()
            .map(|n| (n.id, n.points.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect()))
            .collect();
        let e = layout_error(&moved, &s).unwrap();
        assert!(e.nodes.iter().all(|n| (n.centroid - 1.0).abs() < 1e-12));
        assert!(layout_error(&moved[..1], &s).is_err());
    }
}
