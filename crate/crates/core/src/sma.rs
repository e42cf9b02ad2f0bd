//! Multi-view self-distillation: masked/augmented views of a sample, an
//! EMA teacher, prototype assignment by Sinkhorn-Knopp over a feature
//! queue, and the cross-entropy between teacher assignments and student
//! prototype probabilities at object, edge and triplet level.

use std::collections::{HashMap, VecDeque};

use crate::actgr::GraphInput;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scene::{compute_descriptor, relative_geometry, SpatialDescriptor, SubgraphSample};
use crate::tensor::Tensor;

/// Points never masked below this count.
pub const MIN_VIEW_POINTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Origin,
    Augmented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    pub tag: String,
    pub role: Role,
    pub source: Source,
    pub point_mask_ratio: f64,
    pub edge_mask_ratio: f64,
}

impl ViewSpec {
    pub fn new(tag: &str, role: Role, source: Source, point_mask_ratio: f64, edge_mask_ratio: f64) -> Self {
        Self {
            tag: tag.to_string(),
            role,
            source,
            point_mask_ratio,
            edge_mask_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, r) in [("point", self.point_mask_ratio), ("edge", self.edge_mask_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("view {}: {what} mask ratio {r} outside [0, 1]", self.tag)));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for ViewSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let role = match self.role {
            Role::Student => "student",
            Role::Teacher => "teacher",
        };
        let source = match self.source {
            Source::Origin => "origin",
            Source::Augmented => "augmented",
        };
        write!(f, "{}:{role}:{source}:{}:{}", self.tag, self.point_mask_ratio, self.edge_mask_ratio)
    }
}

impl std::str::FromStr for ViewSpec {
    type Err = Error;

    /// `tag:role:source:point_ratio:edge_ratio`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::invalid(format!("malformed view `{s}`"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let role = match parts[1] {
            "student" => Role::Student,
            "teacher" => Role::Teacher,
            _ => return Err(bad()),
        };
        let source = match parts[2] {
            "origin" => Source::Origin,
            "augmented" => Source::Augmented,
            _ => return Err(bad()),
        };
        let v = ViewSpec::new(
            parts[0],
            role,
            source,
            parts[3].parse().map_err(|_| bad())?,
            parts[4].parse().map_err(|_| bad())?,
        );
        v.validate()?;
        Ok(v)
    }
}

/// Three student views and two teacher views.
pub fn default_view_table() -> Vec<ViewSpec> {
    vec![
        ViewSpec::new("S_v1", Role::Student, Source::Origin, 0.8, 0.2),
        ViewSpec::new("S_v2", Role::Student, Source::Augmented, 0.8, 0.6),
        ViewSpec::new("S_v3", Role::Student, Source::Origin, 0.8, 0.6),
        ViewSpec::new("T_v6", Role::Teacher, Source::Origin, 0.2, 0.2),
        ViewSpec::new("T_v5", Role::Teacher, Source::Augmented, 0.1, 0.1),
    ]
}

/// `(teacher tag, student tag)`.
pub fn default_pairs() -> Vec<(String, String)> {
    [("T_v6", "S_v2"), ("T_v5", "S_v3"), ("T_v5", "S_v1"), ("T_v6", "S_v3")]
        .iter()
        .map(|(t, s)| (t.to_string(), s.to_string()))
        .collect()
}

pub fn parse_view_table(s: &str) -> Result<Vec<ViewSpec>> {
    let table: Vec<ViewSpec> = s.split(',').map(str::parse).collect::<Result<_>>()?;
    if table.is_empty() {
        return Err(Error::invalid("empty view table"));
    }
    Ok(table)
}

/// `T_v6>S_v2,T_v5>S_v3`.
pub fn parse_pairs(s: &str) -> Result<Vec<(String, String)>> {
    s.split(',')
        .map(|p| {
            let (t, st) = p
                .trim()
                .split_once('>')
                .ok_or_else(|| Error::invalid(format!("malformed pair `{p}`")))?;
            Ok((t.trim().to_string(), st.trim().to_string()))
        })
        .collect()
}

pub fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(t, s)| format!("{t}>{s}")).collect::<Vec<_>>().join(",")
}

/// One view of a sample. `descriptors` are the per-node absolute
/// descriptors in this view's frame (used for anchor conditioning).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleView {
    pub tag: String,
    pub role: Role,
    pub input: GraphInput,
    pub descriptors: Vec<SpatialDescriptor>,
}

/// Builds one view per table entry with an independent stream per entry.
pub fn build_views(sample: &SubgraphSample, table: &[ViewSpec], seed: u64) -> Result<Vec<SampleView>> {
    table
        .iter()
        .enumerate()
        .map(|(i, spec)| build_view(sample, spec, SeededRng::derive(seed, &[i as u64])))
        .collect()
}

pub fn build_view(sample: &SubgraphSample, spec: &ViewSpec, mut rng: SeededRng) -> Result<SampleView> {
    spec.validate()?;
    let mut input = GraphInput::from_sample(sample)?;
    let mut descriptors: Vec<SpatialDescriptor> = sample.nodes.iter().map(|n| n.descriptor).collect();

    if spec.source == Source::Augmented {
        let scale = rng.uniform_range(0.9, 1.1);
        let n = descriptors.len() as f64;
        let mut center = [0.0; 3];
        for d in &descriptors {
            for k in 0..3 {
                center[k] += d.centroid[k] / n;
            }
        }
        for (pts, d) in input.points.iter_mut().zip(descriptors.iter_mut()) {
            let sigma = 0.005 * d.max_length * scale;
            let resampled: Vec<_> = (0..pts.len())
                .map(|_| {
                    let p = pts[rng.below(pts.len())];
                    let mut q = [0.0; 3];
                    for k in 0..3 {
                        q[k] = center[k] + scale * (p[k] - center[k]) + sigma * rng.normal();
                    }
                    q
                })
                .collect();
            *d = compute_descriptor(&resampled)?;
            *pts = resampled;
        }
        for (r, &(a, b)) in input.relations.iter_mut().zip(&input.edges) {
            *r = relative_geometry(&descriptors[a], &descriptors[b]).0;
        }
    }

    if spec.point_mask_ratio > 0.0 {
        for pts in input.points.iter_mut() {
            let n = pts.len();
            let drop = ((spec.point_mask_ratio * n as f64).floor() as usize).min(n - n.min(MIN_VIEW_POINTS));
            let keep = n - drop;
            let mut idx = rng.choose_distinct(n, keep);
            idx.sort_unstable();
            *pts = idx.into_iter().map(|i| pts[i]).collect();
        }
    }

    if spec.edge_mask_ratio > 0.0 {
        let m = input.edges.len();
        let drop = (spec.edge_mask_ratio * m as f64).floor() as usize;
        let mut keep = rng.choose_distinct(m, m - drop);
        keep.sort_unstable();
        input.edges = keep.iter().map(|&i| input.edges[i]).collect();
        input.relations = keep.iter().map(|&i| input.relations[i]).collect();
        input.edge_ids = keep.iter().map(|&i| input.edge_ids[i]).collect();
        input.allow_disconnected = true;
    }

    Ok(SampleView {
        tag: spec.tag.clone(),
        role: spec.role,
        input,
        descriptors,
    })
}

/// `ξ ← α·ξ + (1−α)·θ` for every teacher parameter. Every student
/// parameter outside `excluded_prefix` must exist in the teacher.
pub fn ema_update(student: &ParamStore, teacher: &mut ParamStore, alpha: f64, excluded_prefix: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("EMA momentum {alpha} outside [0, 1]")));
    }
    let expected = student.names().filter(|n| !n.starts_with(excluded_prefix)).count();
    if expected != teacher.len() {
        return Err(Error::invalid(format!(
            "teacher has {} parameters, student has {expected}",
            teacher.len()
        )));
    }
    for (name, p) in teacher.iter_mut() {
        let s = student
            .get(name)
            .ok_or_else(|| Error::invalid(format!("teacher parameter `{name}` missing from student")))?;
        if s.shape() != p.value.shape() {
            return Err(Error::shape("ema_update", format!("`{name}`: {:?} vs {:?}", s.shape(), p.value.shape())));
        }
        for (x, &y) in p.value.data_mut().iter_mut().zip(s.data()) {
            *x = alpha * *x + (1.0 - alpha) * y;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornOutput {
    /// Rows sum to one.
    pub q: Tensor,
    /// `Σ_k |colsum_k − 1/K|` after each iteration, for the plan scaled to
    /// unit total mass.
    pub col_dev: Vec<f64>,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sinkhorn-Knopp toward uniform marginals, ending on a row normalization.
/// Runs on scaling vectors over `exp((S − max S)/ε)`; falls back to the
/// log domain when that kernel underflows.
pub fn sinkhorn(scores: &Tensor, eps: f64, iters: usize) -> Result<SinkhornOutput> {
    let (b, k) = (scores.rows(), scores.cols());
    if b == 0 || k == 0 || !scores.is_finite() || !(eps > 0.0) {
        return Err(Error::invalid("sinkhorn needs a finite non-empty score matrix and eps > 0"));
    }
    match sinkhorn_scaling(scores, eps, iters) {
        Some(out) => Ok(out),
        None => sinkhorn_log(scores, eps, iters),
    }
}

fn sinkhorn_scaling(scores: &Tensor, eps: f64, iters: usize) -> Option<SinkhornOutput> {
    let (b, k) = (scores.rows(), scores.cols());
    let max = scores.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kern: Vec<f64> = scores.data().iter().map(|s| ((s - max) / eps).exp()).collect();
    let mut u = vec![1.0; b];
    let mut v = vec![1.0; k];
    let col_sums = |u: &[f64]| {
        let mut c = vec![0.0; k];
        for r in 0..b {
            for (cc, &kv) in c.iter_mut().zip(&kern[r * k..(r + 1) * k]) {
                *cc += kv * u[r];
            }
        }
        c
    };
    let mut col_dev = Vec::with_capacity(iters);
    for _ in 0..iters {
        for (vc, s) in v.iter_mut().zip(col_sums(&u)) {
            *vc = 1.0 / (k as f64 * s);
        }
        for r in 0..b {
            let s: f64 = kern[r * k..(r + 1) * k].iter().zip(&v).map(|(a, b)| a * b).sum();
            u[r] = 1.0 / (b as f64 * s);
        }
        if !u.iter().chain(&v).all(|x| x.is_finite() && *x > 0.0) {
            return None;
        }
        let dev = col_sums(&u)
            .iter()
            .zip(&v)
            .map(|(s, vc)| (s * vc - 1.0 / k as f64).abs())
            .sum();
        col_dev.push(dev);
    }
    let mut q = Vec::with_capacity(b * k);
    for r in 0..b {
        let e: Vec<f64> = kern[r * k..(r + 1) * k].iter().zip(&v).map(|(a, b)| a * b).collect();
        let s: f64 = e.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return None;
        }
        q.extend(e.into_iter().map(|x| x / s));
    }
    Some(SinkhornOutput {
        q: Tensor::matrix(b, k, q).ok()?,
        col_dev,
    })
}

fn sinkhorn_log(scores: &Tensor, eps: f64, iters: usize) -> Result<SinkhornOutput> {
    let (b, k) = (scores.rows(), scores.cols());
    let mut lq: Vec<f64> = scores.data().iter().map(|s| s / eps).collect();
    let (ln_b, ln_k) = ((b as f64).ln(), (k as f64).ln());
    let mut col_dev = Vec::with_capacity(iters);
    for _ in 0..iters {
        for c in 0..k {
            let lse = log_sum_exp((0..b).map(|r| lq[r * k + c]));
            for r in 0..b {
                lq[r * k + c] -= lse + ln_k;
            }
        }
        for r in 0..b {
            let row = &mut lq[r * k..(r + 1) * k];
            let lse = log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= lse + ln_b);
        }
        let dev = (0..k)
            .map(|c| ((0..b).map(|r| lq[r * k + c].exp()).sum::<f64>() - 1.0 / k as f64).abs())
            .sum();
        col_dev.push(dev);
    }
    let mut q = Vec::with_capacity(b * k);
    for r in 0..b {
        let row = &lq[r * k..(r + 1) * k];
        let lse = log_sum_exp(row.iter().copied());
        let e: Vec<f64> = row.iter().map(|v| (v - lse).exp()).collect();
        let s: f64 = e.iter().sum();
        q.extend(e.into_iter().map(|v| v / s));
    }
    Ok(SinkhornOutput {
        q: Tensor::matrix(b, k, q)?,
        col_dev,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Object,
    Edge,
    Triplet,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Object, Level::Edge, Level::Triplet];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn prototype_name(self) -> &'static str {
        match self {
            Level::Object => "proto.obj",
            Level::Edge => "proto.edge",
            Level::Triplet => "proto.trip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    Swav,
    Mse,
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swav" => Ok(DistillMode::Swav),
            "mse" => Ok(DistillMode::Mse),
            _ => Err(Error::invalid(format!("unknown distillation mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistillMode::Swav => "swav",
            DistillMode::Mse => "mse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankConfig {
    /// Object feature width; edges share it and triplets use three times it.
    pub dim: usize,
    /// Prototype counts per level.
    pub prototypes: [usize; 3],
    pub queue_len: usize,
    pub tau: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
}

impl BankConfig {
    pub fn level_dim(&self, level: Level) -> usize {
        match level {
            Level::Triplet => 3 * self.dim,
            _ => self.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.prototypes.contains(&0) {
            return Err(Error::invalid("bank dims and prototype counts must be positive"));
        }
        if !(self.tau > 0.0) || !(self.sinkhorn_eps > 0.0) {
            return Err(Error::invalid("tau and sinkhorn eps must be positive"));
        }
        Ok(())
    }
}

/// Prototypes (unit rows, trainable) and FIFO queues of teacher features.
#[derive(Debug, Clone)]
pub struct DistillBank {
    pub cfg: BankConfig,
    pub protos: ParamStore,
    queues: [VecDeque<Vec<f64>>; 3],
    /// Normalized queue rows scored against the prototypes, valid until
    /// the next queue or prototype change.
    support_scores: [Option<Tensor>; 3],
}

impl PartialEq for DistillBank {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.protos == other.protos && self.queues == other.queues
    }
}

impl DistillBank {
    pub fn new(cfg: BankConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut protos = ParamStore::new();
        for level in Level::ALL {
            let (k, d) = (cfg.prototypes[level.index()], cfg.level_dim(level));
            let t = Tensor::matrix(k, d, (0..k * d).map(|_| rng.normal()).collect())?;
            protos.insert(level.prototype_name(), t)?;
        }
        let mut bank = Self {
            cfg,
            protos,
            queues: Default::default(),
            support_scores: Default::default(),
        };
        bank.renormalize_prototypes();
        Ok(bank)
    }

    pub fn prototypes(&self, level: Level) -> &Tensor {
        self.protos.get(level.prototype_name()).expect("prototype levels are fixed")
    }

    pub fn renormalize_prototypes(&mut self) {
        self.support_scores = Default::default();
        for (_, p) in self.protos.iter_mut() {
            let cols = p.value.cols();
            for r in 0..p.value.rows() {
                let row = p.value.row_mut(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= n);
                debug_assert_eq!(row.len(), cols);
            }
        }
    }

    pub fn queue_push(&mut self, level: Level, features: &Tensor) -> Result<()> {
        let d = self.cfg.level_dim(level);
        if features.rows() > 0 && features.cols() != d {
            return Err(Error::shape("queue_push", format!("width {} for level of width {d}", features.cols())));
        }
        let cap = self.cfg.queue_len;
        self.support_scores[level.index()] = None;
        let q = &mut self.queues[level.index()];
        for r in 0..features.rows() {
            q.push_back(features.row(r).to_vec());
            if q.len() > cap {
                q.pop_front();
            }
        }
        Ok(())
    }

    /// Oldest first.
    pub fn queue_view(&self, level: Level) -> Tensor {
        let q = &self.queues[level.index()];
        let d = self.cfg.level_dim(level);
        Tensor::matrix(q.len(), d, q.iter().flatten().copied().collect()).expect("queue rows have the level width")
    }

    pub fn queue_len(&self, level: Level) -> usize {
        self.queues[level.index()].len()
    }

    pub fn queues_full(&self) -> bool {
        Level::ALL.iter().all(|&l| self.queue_len(l) >= self.cfg.queue_len)
    }

    pub fn clear_queues(&mut self) {
        self.support_scores = Default::default();
        self.queues.iter_mut().for_each(VecDeque::clear);
    }

    /// Sinkhorn assignments of the current teacher features, computed over
    /// `[z_t ; queue]` and truncated to the first `z_t.rows()` rows.
    pub fn assignments(&self, level: Level, z_t: &Tensor) -> Result<Tensor> {
        match &self.support_scores[level.index()] {
            Some(cached) => self.assignments_from_scores(level, z_t, cached),
            None => self.assignments_with_support(level, z_t, &self.queue_view(level)),
        }
    }

    /// Scores the current queues against the current prototypes once, so
    /// later [`DistillBank::assignments`] calls reuse them. Any queue or
    /// prototype change drops the cache; direct writes to `protos` must be
    /// followed by [`DistillBank::renormalize_prototypes`].
    pub fn cache_support_scores(&mut self) -> Result<()> {
        for level in Level::ALL {
            let q = self.queue_view(level);
            let scores = normalize_rows(&q).matmul_t(self.prototypes(level))?;
            self.support_scores[level.index()] = Some(scores);
        }
        Ok(())
    }

    fn assignments_from_scores(&self, level: Level, z_t: &Tensor, support_scores: &Tensor) -> Result<Tensor> {
        let d = self.cfg.level_dim(level);
        if z_t.cols() != d {
            return Err(Error::shape("assignments", format!("width {} for level of width {d}", z_t.cols())));
        }
        let own = normalize_rows(z_t).matmul_t(self.prototypes(level))?;
        let scores = if support_scores.rows() > 0 {
            Tensor::concat_rows(&[&own, support_scores])?
        } else {
            own
        };
        let q = sinkhorn(&scores, self.cfg.sinkhorn_eps, self.cfg.sinkhorn_iters)?.q;
        let b = z_t.rows();
        Tensor::matrix(b, q.cols(), q.data()[..b * q.cols()].to_vec())
    }

    pub fn assignments_with_support(&self, level: Level, z_t: &Tensor, support: &Tensor) -> Result<Tensor> {
        let d = self.cfg.level_dim(level);
        if z_t.cols() != d {
            return Err(Error::shape("assignments", format!("width {} for level of width {d}", z_t.cols())));
        }
        let all = if support.rows() > 0 {
            Tensor::concat_rows(&[z_t, support])?
        } else {
            z_t.clone()
        };
        let normed = normalize_rows(&all);
        let scores = normed.matmul_t(self.prototypes(level))?;
        let q = sinkhorn(&scores, self.cfg.sinkhorn_eps, self.cfg.sinkhorn_iters)?.q;
        let b = z_t.rows();
        Ok(Tensor::matrix(b, q.cols(), q.data()[..b * q.cols()].to_vec())?)
    }
}

pub fn normalize_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// `−(1/B) Σ_i Σ_k q_ik log p_ik` with `p = softmax(normalize(z)·Cᵀ/τ)`.
/// Gradients reach `z` and the prototypes; `q` is a constant.
pub fn swav_cross_entropy(g: &mut Graph, bank: &DistillBank, level: Level, z_student: Var, q: &Tensor) -> Result<Var> {
    let b = g.value(z_student).rows();
    if q.rows() != b || b == 0 {
        return Err(Error::shape("swav", format!("{} targets for {b} student rows", q.rows())));
    }
    let c = g.param(&bank.protos, level.prototype_name())?;
    let z = g.normalize_rows(z_student)?;
    let logits = g.matmul_t(z, c)?;
    let logits = g.scale(logits, 1.0 / bank.cfg.tau)?;
    let logp = g.log_softmax_rows(logits)?;
    let qv = g.constant(q.clone())?;
    let prod = g.mul(qv, logp)?;
    let s = g.sum_all(prod)?;
    g.scale(s, -1.0 / b as f64)
}

/// SwAV term for one level: teacher assignments over the queue-extended
/// support, student cross-entropy on the current rows only.
pub fn swav_loss(g: &mut Graph, bank: &DistillBank, level: Level, z_student: Var, z_teacher: &Tensor) -> Result<Var> {
    let q = bank.assignments(level, z_teacher)?;
    swav_cross_entropy(g, bank, level, z_student, &q)
}

/// Mean squared distance between L2-normalized student and teacher rows.
pub fn mse_distill(g: &mut Graph, z_student: Var, z_teacher: &Tensor) -> Result<Var> {
    let z = g.normalize_rows(z_student)?;
    let t = g.constant(normalize_rows(z_teacher))?;
    let d = g.sub(z, t)?;
    let sq = g.square(d)?;
    let s = g.sum_all(sq)?;
    g.scale(s, 1.0 / z_teacher.rows().max(1) as f64)
}

/// Per-view features at every level. Student rows are already passed
/// through the predictor; teacher rows are constants.
#[derive(Debug, Clone)]
pub struct ViewEncoding {
    pub tag: String,
    pub role: Role,
    pub object: Var,
    pub edge: Var,
    pub triplet: Var,
    /// Originating edge index for each edge/triplet row.
    pub edge_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub loss: Var,
    /// Value of each configured pair's contribution.
    pub per_pair: Vec<f64>,
}

/// Sums the level losses over the configured teacher→student pairs. Edge
/// and triplet terms only use edges present in both views.
pub fn distill_loss(
    g: &mut Graph,
    bank: &DistillBank,
    views: &[ViewEncoding],
    pairs: &[(String, String)],
    mode: DistillMode,
) -> Result<DistillOutput> {
    let by_tag: HashMap<&str, &ViewEncoding> = views.iter().map(|v| (v.tag.as_str(), v)).collect();
    let mut total: Option<Var> = None;
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (t_tag, s_tag) in pairs {
        let t = by_tag
            .get(t_tag.as_str())
            .ok_or_else(|| Error::invalid(format!("no view tagged `{t_tag}`")))?;
        let s = by_tag
            .get(s_tag.as_str())
            .ok_or_else(|| Error::invalid(format!("no view tagged `{s_tag}`")))?;
        if t.role != Role::Teacher || s.role != Role::Student {
            return Err(Error::invalid(format!("pair {t_tag}>{s_tag} must go teacher to student")));
        }
        let pair_loss = pair_loss(g, bank, t, s, mode)?;
        per_pair.push(g.scalar(pair_loss));
        total = Some(match total {
            Some(acc) => g.add(acc, pair_loss)?,
            None => pair_loss,
        });
    }
    let loss = match total {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0))?,
    };
    Ok(DistillOutput { loss, per_pair })
}

fn level_term(g: &mut Graph, bank: &DistillBank, level: Level, z_s: Var, z_t: &Tensor, mode: DistillMode) -> Result<Var> {
    match mode {
        DistillMode::Swav => swav_loss(g, bank, level, z_s, z_t),
        DistillMode::Mse => mse_distill(g, z_s, z_t),
    }
}

fn pair_loss(g: &mut Graph, bank: &DistillBank, t: &ViewEncoding, s: &ViewEncoding, mode: DistillMode) -> Result<Var> {
    let t_obj = g.value(t.object).clone();
    let mut loss = level_term(g, bank, Level::Object, s.object, &t_obj, mode)?;

    let t_rows: HashMap<usize, usize> = t.edge_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    let (mut s_idx, mut t_idx) = (Vec::new(), Vec::new());
    for (r, id) in s.edge_ids.iter().enumerate() {
        if let Some(&tr) = t_rows.get(id) {
            s_idx.push(r);
            t_idx.push(tr);
        }
    }
    if s_idx.is_empty() {
        log::warn!("views {} and {} share no edges; edge and triplet terms skipped", t.tag, s.tag);
        return Ok(loss);
    }
    for (level, sv, tv) in [(Level::Edge, s.edge, t.edge), (Level::Triplet, s.triplet, t.triplet)] {
        let zt = g.value(tv).gather_rows(&t_idx);
        let zs = g.gather_rows(sv, &s_idx)?;
        let term = level_term(g, bank, level, zs, &zt, mode)?;
        loss = g.add(loss, term)?;
    }
    Ok(loss)
}

/// `gen + λ·distill`.
pub fn total_loss(g: &mut Graph, gen: Var, distill: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(gen);
    }
    let d = g.scale(distill, lambda)?;
    g.add(gen, d)
}
