//! Anchor-conditioned topological reasoning.
//!
//! Nodes are encoded from their own (normalized) points only, relations
//! from the stored edge geometry, and exactly the conditioned nodes see
//! their absolute descriptor. Absolute layout then has to travel through
//! the recurrent message passing, so a node `K` hops from every anchor can
//! only be influenced when `T · L_base ≥ K`.

use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{GruCell, Mlp};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scene::{undirected_reach, Point, SpatialDescriptor, SubgraphSample, DESCRIPTOR_DIM, SCALE_FLOOR};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMode {
    Single,
    Multi(usize),
    Global,
}

impl std::fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnchorMode::Single => write!(f, "single"),
            AnchorMode::Multi(k) => write!(f, "multi:{k}"),
            AnchorMode::Global => write!(f, "global"),
        }
    }
}

impl std::str::FromStr for AnchorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(AnchorMode::Single),
            "global" => Ok(AnchorMode::Global),
            _ => s
                .strip_prefix("multi:")
                .and_then(|k| k.parse().ok())
                .map(AnchorMode::Multi)
                .ok_or_else(|| Error::invalid(format!("unknown anchor mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagationConfig {
    /// Recurrent steps `T`.
    pub steps: usize,
    /// Message-passing layers per step.
    pub l_base: usize,
    /// Latent width `d`.
    pub dim: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            steps: 3,
            l_base: 2,
            dim: 64,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_base < 1 || self.dim < 1 {
            return Err(Error::invalid("l_base and dim must be >= 1"));
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        self.steps * self.l_base
    }
}

/// Whether a node `hops` away from the anchor can be influenced by it.
pub fn erf_reachable(hops: usize, cfg: &PropagationConfig) -> bool {
    cfg.steps * cfg.l_base >= hops
}

/// Graph-shaped input to the encoder: per-node points and the directed
/// edges with their relative geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub node_ids: Vec<u32>,
    pub points: Vec<Vec<Point>>,
    /// `(src_row, dst_row)`.
    pub edges: Vec<(usize, usize)>,
    pub relations: Vec<[f64; DESCRIPTOR_DIM]>,
    /// Index of each edge in the originating sample's edge list.
    pub edge_ids: Vec<usize>,
    /// Masked views may be disconnected; full samples may not.
    pub allow_disconnected: bool,
}

impl GraphInput {
    pub fn from_sample(sample: &SubgraphSample) -> Result<Self> {
        let index = sample.index();
        let mut edges = Vec::with_capacity(sample.edges.len());
        for e in &sample.edges {
            match (index.get(&e.src), index.get(&e.dst)) {
                (Some(&a), Some(&b)) => edges.push((a, b)),
                _ => return Err(Error::invalid(format!("dangling edge {}->{}", e.src, e.dst))),
            }
        }
        Ok(Self {
            node_ids: sample.node_ids(),
            points: sample.nodes.iter().map(|n| n.points.clone()).collect(),
            edges,
            relations: sample.edges.iter().map(|e| e.geometry.0).collect(),
            edge_ids: (0..sample.edges.len()).collect(),
            allow_disconnected: false,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn row_of(&self, id: u32) -> Option<usize> {
        self.node_ids.iter().position(|&n| n == id)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.points.len() != n {
            return Err(Error::invalid("one point set per node required"));
        }
        if self.relations.len() != self.edges.len() || self.edge_ids.len() != self.edges.len() {
            return Err(Error::invalid("edge arrays disagree in length"));
        }
        if let Some(&(a, b)) = self.edges.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::invalid(format!("dangling edge {a}->{b}")));
        }
        if !self.allow_disconnected && n > 0 {
            let ids: Vec<u32> = (0..n as u32).collect();
            let pairs: Vec<(u32, u32)> = self.edges.iter().map(|&(a, b)| (a as u32, b as u32)).collect();
            let reached = undirected_reach(&ids, &pairs);
            if reached != n {
                return Err(Error::Disconnected { reached, total: n });
            }
        }
        Ok(())
    }

    /// Hop distances from `row` over the undirected skeleton
    /// (`usize::MAX` when unreachable).
    pub fn hop_distances(&self, row: usize) -> Vec<usize> {
        let n = self.num_nodes();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut dist = vec![usize::MAX; n];
        dist[row] = 0;
        let mut queue = std::collections::VecDeque::from([row]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Node and edge latents after propagation.
#[derive(Debug, Clone, Copy)]
pub struct LatentState {
    pub nodes: Var,
    pub edges: Var,
    pub step: usize,
}

/// The nodes whose absolute descriptors are revealed, with those descriptors.
pub fn condition_set(
    sample: &SubgraphSample,
    mode: AnchorMode,
    seed: u64,
) -> Result<Vec<(u32, SpatialDescriptor)>> {
    let n = sample.nodes.len();
    match mode {
        AnchorMode::Single => {
            let node = sample
                .node(sample.anchor)
                .ok_or_else(|| Error::invalid("anchor is not a node"))?;
            Ok(vec![(node.id, node.descriptor)])
        }
        AnchorMode::Multi(k) => {
            if k > n {
                return Err(Error::invalid(format!("{k} anchors requested from {n} nodes")));
            }
            let mut rng = SeededRng::new(seed);
            Ok(rng
                .choose_distinct(n, k)
                .into_iter()
                .map(|i| (sample.nodes[i].id, sample.nodes[i].descriptor))
                .collect())
        }
        AnchorMode::Global => Ok(sample.nodes.iter().map(|n| (n.id, n.descriptor)).collect()),
    }
}

/// Parameters and forward pass of the object/relation encoders and the
/// recurrent propagation.
#[derive(Debug, Clone)]
pub struct ActgrNet {
    pub cfg: PropagationConfig,
    obj_point: Mlp,
    obj_head: Mlp,
    rel: Mlp,
    fuse: Mlp,
    msg: Vec<Mlp>,
    merge: Vec<Mlp>,
    gru: GruCell,
    edge_update: Mlp,
}

impl ActgrNet {
    pub fn new(cfg: PropagationConfig) -> Self {
        let d = cfg.dim;
        let r = DESCRIPTOR_DIM;
        Self {
            cfg,
            obj_point: Mlp::new("enc.obj.point", &[3, d, d], true),
            obj_head: Mlp::new("enc.obj.head", &[d, d], false),
            rel: Mlp::new("enc.rel", &[r + 2 * d, d, d], false),
            fuse: Mlp::new("enc.fuse", &[d + r, d, d], false),
            msg: (0..cfg.l_base)
                .map(|l| Mlp::new(&format!("prop.msg{l}"), &[2 * d + r, d], true))
                .collect(),
            merge: (0..cfg.l_base)
                .map(|l| Mlp::new(&format!("prop.merge{l}"), &[2 * d, d], false))
                .collect(),
            gru: GruCell::new("prop.gru", d, d),
            edge_update: Mlp::new("prop.edge", &[3 * d, d, d], false),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        self.obj_point.init(store, rng)?;
        self.obj_head.init(store, rng)?;
        self.rel.init(store, rng)?;
        self.fuse.init(store, rng)?;
        for (m, g) in self.msg.iter().zip(&self.merge) {
            m.init(store, rng)?;
            g.init(store, rng)?;
        }
        self.gru.init(store, rng)?;
        self.edge_update.init(store, rng)
    }

    /// Per node: center at the centroid, divide by the max extent, shared
    /// per-point MLP, coordinatewise max-pool, linear head.
    pub fn encode_objects(&self, g: &mut Graph, store: &ParamStore, points: &[Vec<Point>]) -> Result<Var> {
        let total: usize = points.iter().map(Vec::len).sum();
        let mut data = Vec::with_capacity(total * 3);
        let mut seg = Vec::with_capacity(total);
        for (i, pts) in points.iter().enumerate() {
            if pts.is_empty() {
                return Err(Error::invalid(format!("node row {i} has no points")));
            }
            // Sorted sums keep the centroid bit-identical under point reordering.
            let mut c = [0.0; 3];
            let mut scale = SCALE_FLOOR;
            for k in 0..3 {
                let mut axis: Vec<f64> = pts.iter().map(|p| p[k]).collect();
                axis.sort_by(f64::total_cmp);
                c[k] = axis.iter().sum::<f64>() / axis.len() as f64;
                scale = scale.max(axis[axis.len() - 1] - axis[0]);
            }
            for p in pts {
                for k in 0..3 {
                    data.push((p[k] - c[k]) / scale);
                }
                seg.push(i);
            }
        }
        let x = g.constant(Tensor::matrix(total, 3, data)?)?;
        let feats = self.obj_point.forward(g, store, x)?;
        let pooled = g.segment_max(feats, &seg, points.len())?;
        self.obj_head.forward(g, store, pooled)
    }

    /// MLP over `[r_ij ∥ h_i ∥ h_j]`.
    pub fn encode_edges(&self, g: &mut Graph, store: &ParamStore, h: Var, input: &GraphInput) -> Result<Var> {
        input.check_edges()?;
        let r = relation_tensor(&input.relations, false)?;
        let r = g.constant(r)?;
        let (src, dst) = endpoints(input);
        self.rel.forward_blocks(g, store, &[(r, None), (h, Some(&src)), (h, Some(&dst))])
    }

    /// Replaces each anchor row by `MLP([h ∥ s_gt])`; other rows are copied.
    pub fn fuse_anchor(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        anchors: &[(usize, SpatialDescriptor)],
    ) -> Result<Var> {
        if anchors.is_empty() {
            return Ok(h);
        }
        let rows: Vec<usize> = anchors.iter().map(|a| a.0).collect();
        let n = g.value(h).rows();
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::invalid("anchor row out of range"));
        }
        let desc: Vec<[f64; DESCRIPTOR_DIM]> = anchors.iter().map(|a| a.1.to_array()).collect();
        let s = g.constant(Tensor::from_rows(&desc)?)?;
        let ha = g.gather_rows(h, &rows)?;
        let x = g.concat_cols(&[ha, s])?;
        let fused = self.fuse.forward(g, store, x)?;
        g.replace_rows(h, fused, &rows)
    }

    /// `T` recurrent steps. Each runs `L_base` sum-aggregated message
    /// passing layers over both edge directions (reverse messages see the
    /// negated relation), fuses the result into the node state with the
    /// GRU, then refreshes edge features from their endpoints.
    pub fn propagate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        e: Var,
        input: &GraphInput,
    ) -> Result<LatentState> {
        input.check()?;
        if self.cfg.steps == 0 {
            return Ok(LatentState {
                nodes: h,
                edges: e,
                step: 0,
            });
        }
        let n = input.num_nodes();
        let m = input.edges.len();
        let mut senders: Vec<usize> = input.edges.iter().map(|e| e.0).collect();
        senders.extend(input.edges.iter().map(|e| e.1));
        let mut receivers: Vec<usize> = input.edges.iter().map(|e| e.1).collect();
        receivers.extend(input.edges.iter().map(|e| e.0));
        let both: Vec<usize> = (0..m).chain(0..m).collect();
        let fwd = relation_tensor(&input.relations, false)?;
        let rev = relation_tensor(&input.relations, true)?;
        let r2 = g.constant(Tensor::concat_rows(&[&fwd, &rev])?)?;

        let (src, dst) = endpoints(input);
        let mut h = h;
        let mut e = e;
        for _ in 0..self.cfg.steps {
            let mut x = h;
            for (msg, merge) in self.msg.iter().zip(&self.merge) {
                let msgs = msg.forward_blocks(g, store, &[(x, Some(&senders)), (e, Some(&both)), (r2, None)])?;
                let agg = g.scatter_add_rows(msgs, &receivers, n)?;
                let cat = g.concat_cols(&[x, agg])?;
                x = merge.forward(g, store, cat)?;
            }
            h = self.gru.forward(g, store, h, x)?;
            e = self.edge_update.forward_blocks(g, store, &[(e, None), (h, Some(&src)), (h, Some(&dst))])?;
        }
        Ok(LatentState {
            nodes: h,
            edges: e,
            step: self.cfg.steps,
        })
    }

    /// Full encoder: objects, relations, anchor fusion, propagation.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &GraphInput,
        anchors: &[(usize, SpatialDescriptor)],
    ) -> Result<LatentState> {
        input.check()?;
        let h0 = self.encode_objects(g, store, &input.points)?;
        let e0 = self.encode_edges(g, store, h0, input)?;
        let h = self.fuse_anchor(g, store, h0, anchors)?;
        self.propagate(g, store, h, e0, input)
    }
}

impl GraphInput {
    fn check_edges(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.edges.iter().any(|&(a, b)| a >= n || b >= n) {
            return Err(Error::invalid("dangling edge endpoint"));
        }
        Ok(())
    }
}

fn endpoints(input: &GraphInput) -> (Vec<usize>, Vec<usize>) {
    input.edges.iter().map(|&(a, b)| (a, b)).unzip()
}

fn relation_tensor(rel: &[[f64; DESCRIPTOR_DIM]], reversed: bool) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rel.len() * DESCRIPTOR_DIM);
    for r in rel {
        data.extend(r.iter().map(|&v| if reversed { -v } else { v }));
    }
    Tensor::matrix(rel.len(), DESCRIPTOR_DIM, data)
}

/// Resolves a condition set to `(row, descriptor)` pairs for `input`.
pub fn anchor_rows(input: &GraphInput, conds: &[(u32, SpatialDescriptor)]) -> Result<Vec<(usize, SpatialDescriptor)>> {
    let index: HashMap<u32, usize> = input.node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    conds
        .iter()
        .map(|(id, d)| {
            index
                .get(id)
                .map(|&r| (r, *d))
                .ok_or_else(|| Error::invalid(format!("anchor {id} is not in the graph")))
        })
        .collect()
}
