//! Synthetic labeled scenes and the plain-text scene file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use super::descriptor::{compute_descriptor, Point, SpatialDescriptor};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Category id given to noise clusters.
pub const NOISE_CATEGORY: u32 = 255;

/// Object categories. Each is a surface primitive with a distinctive
/// aspect ratio so that normalized shape alone separates them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Crate,
    Table,
    Cabinet,
    Ball,
    Bolster,
    Rug,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Crate,
        Category::Table,
        Category::Cabinet,
        Category::Ball,
        Category::Bolster,
        Category::Rug,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    /// Nominal half sizes (m) before per-instance jitter.
    fn half_size(self) -> [f64; 3] {
        match self {
            Category::Crate => [0.25, 0.25, 0.25],
            Category::Table => [0.6, 0.4, 0.05],
            Category::Cabinet => [0.25, 0.25, 0.8],
            Category::Ball => [0.3, 0.3, 0.3],
            Category::Bolster => [0.45, 0.12, 0.12],
            Category::Rug => [0.7, 0.5, 0.0],
        }
    }

    fn sample_surface(self, half: [f64; 3], rng: &mut SeededRng) -> Point {
        match self {
            Category::Crate | Category::Table | Category::Cabinet => box_surface(half, rng),
            Category::Ball | Category::Bolster => ellipsoid_surface(half, rng),
            Category::Rug => [
                rng.uniform_range(-half[0], half[0]),
                rng.uniform_range(-half[1], half[1]),
                0.0,
            ],
        }
    }
}

fn box_surface(h: [f64; 3], rng: &mut SeededRng) -> Point {
    // Pick a face with probability proportional to its area.
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut u = rng.uniform() * total;
    let mut axis = 2;
    for (k, a) in areas.iter().enumerate() {
        if u < *a {
            axis = k;
            break;
        }
        u -= a;
    }
    let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = if k == axis {
            side * h[k]
        } else {
            rng.uniform_range(-h[k], h[k])
        };
    }
    p
}

fn ellipsoid_surface(h: [f64; 3], rng: &mut SeededRng) -> Point {
    let v = [rng.normal(), rng.normal(), rng.normal()];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [h[0] * v[0] / n, h[1] * v[1] / n, h[2] * v[2] / n]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub num_objects: usize,
    /// Relative weight per entry of [`Category::ALL`].
    pub category_weights: [f64; 6],
    /// Room size (m) along x, y, z.
    pub workspace: [f64; 3],
    pub points_per_object: usize,
    pub noise_clusters: usize,
    pub points_per_noise_cluster: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_objects: 12,
            category_weights: [1.0; 6],
            workspace: [6.0, 6.0, 3.0],
            points_per_object: 256,
            noise_clusters: 0,
            points_per_noise_cluster: 32,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_objects == 0 {
            return Err(Error::invalid("num_objects must be >= 1"));
        }
        if self.points_per_object == 0 {
            return Err(Error::invalid("points_per_object must be >= 1"));
        }
        if self.noise_clusters > 0 && self.points_per_noise_cluster == 0 {
            return Err(Error::invalid("points_per_noise_cluster must be >= 1"));
        }
        if self.category_weights.iter().any(|w| *w < 0.0) || self.category_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("category weights must be nonnegative with a positive sum"));
        }
        if self.workspace.iter().any(|w| *w <= 0.0) {
            return Err(Error::invalid("workspace extent must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<Point>,
    pub instance_ids: Vec<u32>,
    /// Category of every instance id present in the cloud.
    pub categories: BTreeMap<u32, u32>,
}

impl LabeledPointCloud {
    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            instance_ids: Vec::new(),
            categories: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn distinct_ids(&self) -> BTreeSet<u32> {
        self.instance_ids.iter().copied().collect()
    }

    /// Points grouped by instance id, ids ascending.
    pub fn group_by_instance(&self) -> BTreeMap<u32, Vec<Point>> {
        let mut groups: BTreeMap<u32, Vec<Point>> = BTreeMap::new();
        for (p, &id) in self.points.iter().zip(&self.instance_ids) {
            groups.entry(id).or_default().push(*p);
        }
        groups
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 80);
        let _ = writeln!(s, "toll-scene 1 {}", self.points.len());
        for (p, id) in self.points.iter().zip(&self.instance_ids) {
            let _ = writeln!(s, "{:.16e} {:.16e} {:.16e} {}", p[0], p[1], p[2], id);
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a scene file. Categories are not part of the file format and
    /// come back empty.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 3 || head[0] != "toll-scene" || head[1] != "1" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("bad header `{header}`"),
            });
        }
        let n: usize = head[2].parse().map_err(|_| Error::Parse {
            line: 1,
            msg: "bad point count".into(),
        })?;
        let mut cloud = LabeledPointCloud::empty();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected `x y z id`, got {} fields", f.len()),
                });
            }
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad {what} `{s}`"),
                })
            };
            let p = [num(f[0], "x")?, num(f[1], "y")?, num(f[2], "z")?];
            let id: u32 = f[3].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad id `{}`", f[3]),
            })?;
            cloud.points.push(p);
            cloud.instance_ids.push(id);
        }
        if cloud.points.len() != n {
            return Err(Error::Parse {
                line: text.lines().count(),
                msg: format!("header declares {n} points, found {}", cloud.points.len()),
            });
        }
        Ok(cloud)
    }
}

/// Synthesizes a scene. Objects get ids `0..num_objects`, noise clusters
/// the ids after them.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<LabeledPointCloud> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut cloud = LabeledPointCloud::empty();
    let total_w: f64 = spec.category_weights.iter().sum();
    let ws = spec.workspace;

    for obj in 0..spec.num_objects {
        let id = obj as u32;
        let mut u = rng.uniform() * total_w;
        let mut cat = Category::ALL[5];
        for (c, w) in Category::ALL.iter().zip(spec.category_weights) {
            if u < w {
                cat = *c;
                break;
            }
            u -= w;
        }
        let jitter = rng.uniform_range(0.85, 1.15);
        let half = cat.half_size().map(|h| h * jitter);
        let yaw = rng.uniform_range(0.0, std::f64::consts::TAU);
        let (sy, cy) = yaw.sin_cos();
        let margin = half[0].max(half[1]);
        let center = [
            rng.uniform_range(margin, (ws[0] - margin).max(margin)),
            rng.uniform_range(margin, (ws[1] - margin).max(margin)),
            // Objects rest on the floor.
            half[2] + if cat == Category::Rug { 0.01 } else { 0.0 },
        ];
        for _ in 0..spec.points_per_object {
            let p = cat.sample_surface(half, &mut rng);
            let x = cy * p[0] - sy * p[1];
            let y = sy * p[0] + cy * p[1];
            cloud.points.push([center[0] + x, center[1] + y, center[2] + p[2]]);
            cloud.instance_ids.push(id);
        }
        cloud.categories.insert(id, cat.id());
    }

    for k in 0..spec.noise_clusters {
        let id = (spec.num_objects + k) as u32;
        let center = [
            rng.uniform_range(0.0, ws[0]),
            rng.uniform_range(0.0, ws[1]),
            rng.uniform_range(0.0, ws[2]),
        ];
        for _ in 0..spec.points_per_noise_cluster {
            cloud.points.push([
                center[0] + 0.1 * rng.normal(),
                center[1] + 0.1 * rng.normal(),
                center[2] + 0.1 * rng.normal(),
            ]);
            cloud.instance_ids.push(id);
        }
        cloud.categories.insert(id, NOISE_CATEGORY);
    }
    Ok(cloud)
}

/// One object instance with its layout descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneNode {
    pub id: u32,
    pub category: u32,
    pub points: Vec<Point>,
    pub descriptor: SpatialDescriptor,
}

impl SceneNode {
    pub fn new(id: u32, category: u32, points: Vec<Point>) -> Result<Self> {
        let descriptor = compute_descriptor(&points)?;
        Ok(Self {
            id,
            category,
            points,
            descriptor,
        })
    }
}

/// One node per instance with at least `tau_pts` points that is not in
/// `excluded_ids`, ids ascending.
pub fn abstract_nodes(
    cloud: &LabeledPointCloud,
    tau_pts: usize,
    excluded_ids: &BTreeSet<u32>,
) -> Result<Vec<SceneNode>> {
    if tau_pts == 0 {
        return Err(Error::invalid("tau_pts must be >= 1"));
    }
    cloud
        .group_by_instance()
        .into_iter()
        .filter(|(id, pts)| pts.len() >= tau_pts && !excluded_ids.contains(id))
        .map(|(id, pts)| {
            let cat = cloud.categories.get(&id).copied().unwrap_or(NOISE_CATEGORY);
            SceneNode::new(id, cat, pts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(objects: usize, pts: usize, noise: usize) -> SceneSpec {
        SceneSpec {
            num_objects: objects,
            points_per_object: pts,
            noise_clusters: noise,
            ..Default::default()
        }
    }

    #[test]
    fn point_and_id_counts() {
        let c = generate_scene(&spec(3, 600, 0), 7).unwrap();
        assert_eq!(c.len(), 1800);
        assert_eq!(c.distinct_ids().len(), 3);
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&spec(1, 100, 0), 7).unwrap();
        let b = generate_scene(&spec(1, 100, 0), 7).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a, b);
    }

    #[test]
    fn noise_clusters_get_their_own_ids() {
        let s = spec(5, 50, 2);
        let c = generate_scene(&s, 3).unwrap();
        let groups = c.group_by_instance();
        assert_eq!(groups.len(), 7);
        for (id, pts) in &groups {
            let expected = if *id < 5 { 50 } else { s.points_per_noise_cluster };
            assert_eq!(pts.len(), expected, "id {id}");
        }
        assert_eq!(c.categories[&5], NOISE_CATEGORY);
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(generate_scene(&spec(0, 10, 0), 1).is_err());
        assert!(generate_scene(&spec(2, 0, 0), 1).is_err());
    }

    #[test]
    fn abstraction_threshold() {
        let mut c = LabeledPointCloud::empty();
        let counts = [(0u32, 600usize), (1, 511), (2, 512), (3, 100), (4, 700)];
        for (id, n) in counts {
            for i in 0..n {
                c.points.push([i as f64, id as f64, 0.0]);
                c.instance_ids.push(id);
            }
            c.categories.insert(id, 0);
        }
        let nodes = abstract_nodes(&c, 512, &BTreeSet::new()).unwrap();
        let ids: Vec<u32> = nodes.iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![0, 2, 4]);
        for n in &nodes {
            assert_eq!(n.descriptor, compute_descriptor(&n.points).unwrap());
        }
        let excl: BTreeSet<u32> = [2].into();
        let nodes = abstract_nodes(&c, 512, &excl).unwrap();
        assert_eq!(nodes.len(), 2);
    }

    #[test]
    fn empty_cloud_gives_no_nodes() {
        let nodes = abstract_nodes(&LabeledPointCloud::empty(), 512, &BTreeSet::new()).unwrap();
        assert!(nodes.is_empty());
    }

    #[test]
    fn scene_file_roundtrip_and_errors() {
        let c = generate_scene(&spec(2, 20, 1), 5).unwrap();
        let back = LabeledPointCloud::parse(&c.to_text()).unwrap();
        assert_eq!(back.points, c.points);
        assert_eq!(back.instance_ids, c.instance_ids);
        let text = c.to_text();
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(matches!(LabeledPointCloud::parse(&truncated), Err(Error::Parse { .. })));
        assert!(matches!(
            LabeledPointCloud::parse("toll-scene 1 1\n1 2 x 0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
