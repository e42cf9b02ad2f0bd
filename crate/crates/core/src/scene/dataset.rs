use std::collections::BTreeSet;

use super::edges::generate_edges;
use super::geometry::relative_geometry;
use super::partition::partition_subgraphs;
use super::sample::{select_anchor, SampleEdge, SubgraphSample};
use super::synth::{abstract_nodes, generate_scene, LabeledPointCloud, SceneNode, SceneSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scene: SceneSpec,
    /// Scenes to synthesize when `samples` is 0.
    pub scenes: usize,
    /// Target sample count; scenes are synthesized until it is reached.
    pub samples: usize,
    pub tau_pts: usize,
    pub k_min: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    /// Points kept per node (uniform subsample without replacement).
    pub points_per_node: usize,
    pub excluded_ids: BTreeSet<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            scenes: 10,
            samples: 0,
            tau_pts: 64,
            k_min: 3,
            rho_min: 0.0,
            rho_max: 0.5,
            points_per_node: 64,
            excluded_ids: BTreeSet::new(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.tau_pts == 0 || self.k_min == 0 || self.points_per_node == 0 {
            return Err(Error::invalid("tau_pts, k_min and points_per_node must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.rho_min) || !(0.0..=1.0).contains(&self.rho_max) || self.rho_min > self.rho_max {
            return Err(Error::invalid("need 0 <= rho_min <= rho_max <= 1"));
        }
        if self.scenes == 0 && self.samples == 0 {
            return Err(Error::invalid("either scenes or samples must be positive"));
        }
        Ok(())
    }
}

/// Turns one labeled scene into anchored, connected subgraph samples.
pub fn samples_from_scene(cloud: &LabeledPointCloud, cfg: &DataConfig, seed: u64) -> Result<Vec<SubgraphSample>> {
    let nodes = abstract_nodes(cloud, cfg.tau_pts, &cfg.excluded_ids)?;
    if nodes.len() < cfg.k_min.max(2) {
        return Ok(Vec::new());
    }
    let mut rng = SeededRng::derive(seed, &[0]);
    let nodes: Vec<SceneNode> = nodes
        .into_iter()
        .map(|n| {
            if n.points.len() <= cfg.points_per_node {
                return Ok(n);
            }
            let keep = rng.choose_distinct(n.points.len(), cfg.points_per_node);
            let pts = keep.into_iter().map(|i| n.points[i]).collect();
            SceneNode::new(n.id, n.category, pts)
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    for (m, group) in partition_subgraphs(&nodes, cfg.k_min)?.into_iter().enumerate() {
        if group.len() < cfg.k_min.max(2) {
            continue;
        }
        let members: Vec<SceneNode> = nodes.iter().filter(|n| group.contains(&n.id)).cloned().collect();
        let rho = rng.uniform_range(cfg.rho_min, cfg.rho_max);
        let pairs = generate_edges(&group, rho, derive_seed(seed, &[1, m as u64]))?;
        let desc = |id: u32| members.iter().find(|n| n.id == id).unwrap().descriptor;
        let edges = pairs
            .into_iter()
            .map(|(a, b)| SampleEdge {
                src: a,
                dst: b,
                geometry: relative_geometry(&desc(a), &desc(b)),
            })
            .collect();
        let mut sample = SubgraphSample {
            nodes: members,
            edges,
            anchor: group[0],
        };
        sample.anchor = select_anchor(&sample, derive_seed(seed, &[2, m as u64]))?;
        sample.validate(cfg.k_min)?;
        out.push(sample);
    }
    Ok(out)
}

/// Synthesizes scenes and collects their samples.
pub fn build_dataset(cfg: &DataConfig, seed: u64) -> Result<Vec<SubgraphSample>> {
    cfg.validate()?;
    let mut samples = Vec::new();
    let mut scene = 0u64;
    loop {
        let done = if cfg.samples > 0 {
            samples.len() >= cfg.samples
        } else {
            scene as usize >= cfg.scenes
        };
        if done {
            break;
        }
        if cfg.samples > 0 && scene > 100 * cfg.samples as u64 + 100 {
            return Err(Error::invalid("scene settings never produce a valid sample"));
        }
        let cloud = generate_scene(&cfg.scene, derive_seed(seed, &[10, scene]))?;
        samples.extend(samples_from_scene(&cloud, cfg, derive_seed(seed, &[11, scene]))?);
        scene += 1;
    }
    if cfg.samples > 0 {
        samples.truncate(cfg.samples);
    }
    Ok(samples)
}
