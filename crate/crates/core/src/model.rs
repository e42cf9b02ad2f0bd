//! The full pretraining model: ACTGR encoder, conditional denoiser,
//! student predictor heads, EMA teacher and the distillation bank.

use crate::actgr::{anchor_rows, condition_set, ActgrNet, AnchorMode, GraphInput, LatentState};
use crate::autodiff::{accumulate, GradMap, Graph, Var};
use crate::config::RunConfig;
use crate::diffusion::{build_schedule, gen_loss, gen_targets, reverse_sample, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::optim::{adamw_step, clip_global_norm};
use crate::params::ParamStore;
use crate::rng::{derive_seed, SeededRng};
use crate::scene::{Point, SpatialDescriptor, SubgraphSample};
use crate::sma::{build_view, build_views, distill_loss, ema_update, total_loss, DistillBank, Level, Role, SampleView, Source, ViewEncoding, ViewSpec};
use crate::tensor::Tensor;

/// Prefix of student-only parameters (never copied into the teacher).
pub const PREDICTOR_PREFIX: &str = "pred.";
pub const GEN_VIEW_TAG: &str = "gen";

/// Architecture shared by student and teacher.
#[derive(Debug, Clone)]
pub struct TollModel {
    pub cfg: RunConfig,
    pub net: ActgrNet,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    predictors: [Mlp; 3],
}

/// Per-level features of one view, as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFeatures {
    pub object: Tensor,
    pub edge: Tensor,
    pub triplet: Tensor,
    pub edge_ids: Vec<usize>,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub bank: DistillBank,
}

/// Scalar losses of one sample or averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub gen: f64,
    pub distill: f64,
    pub total: f64,
}

/// Per-sample losses plus the gradient of the total.
#[derive(Debug)]
pub struct SampleStep {
    pub losses: LossValues,
    pub grads: GradMap,
    /// Teacher features of every teacher view, in table order.
    pub teacher_features: Vec<LevelFeatures>,
}

impl TollModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.actgr.dim;
        Ok(Self {
            cfg: cfg.clone(),
            net: ActgrNet::new(cfg.actgr.clone()),
            denoiser: Denoiser::new(d, cfg.diff.hidden),
            schedule: build_schedule(cfg.diff.steps, cfg.diff.schedule)?,
            predictors: [
                Mlp::new("pred.obj", &[d, d, d], false),
                Mlp::new("pred.edge", &[d, d, d], false),
                Mlp::new("pred.trip", &[3 * d, d, 3 * d], false),
            ],
        })
    }

    /// Fresh student, teacher (student copy without predictors) and bank.
    pub fn init_state(&self, seed: u64) -> Result<TrainState> {
        let mut student = ParamStore::new();
        let mut rng = SeededRng::derive(seed, &[1]);
        self.net.init(&mut student, &mut rng)?;
        self.denoiser.init(&mut student, &mut rng)?;
        for p in &self.predictors {
            p.init(&mut student, &mut rng)?;
        }
        let teacher = teacher_snapshot(&student);
        let bank = DistillBank::new(self.cfg.sma.bank.clone(), &mut SeededRng::derive(seed, &[2]))?;
        Ok(TrainState { student, teacher, bank })
    }

    /// Anchor rows for `view`, using the view-frame descriptors.
    pub fn view_anchors(&self, sample: &SubgraphSample, view: &SampleView, mode: AnchorMode, seed: u64) -> Result<Vec<(usize, SpatialDescriptor)>> {
        let conds = condition_set(sample, mode, seed)?;
        let rows = anchor_rows(&view.input, &conds)?;
        Ok(rows.into_iter().map(|(r, _)| (r, view.descriptors[r])).collect())
    }

    /// Encodes a graph. Views with masked edges may be disconnected; the
    /// encoder runs on them regardless.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, input: &GraphInput, anchors: &[(usize, SpatialDescriptor)]) -> Result<LatentState> {
        self.net.encode(g, store, input, anchors)
    }

    fn level_vars(&self, g: &mut Graph, latent: &LatentState, input: &GraphInput) -> Result<[Var; 3]> {
        let src: Vec<usize> = input.edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = input.edges.iter().map(|e| e.1).collect();
        let hs = g.gather_rows(latent.nodes, &src)?;
        let hd = g.gather_rows(latent.nodes, &dst)?;
        let trip = g.concat_cols(&[hs, hd, latent.edges])?;
        Ok([latent.nodes, latent.edges, trip])
    }

    /// Teacher-side features of a view (no gradient).
    pub fn teacher_features(&self, teacher: &ParamStore, sample: &SubgraphSample, view: &SampleView, seed: u64) -> Result<LevelFeatures> {
        let mut g = Graph::no_grad();
        let anchors = self.view_anchors(sample, view, self.cfg.anchor_mode, seed)?;
        let latent = self.encode(&mut g, teacher, &view.input, &anchors)?;
        let [o, e, t] = self.level_vars(&mut g, &latent, &view.input)?;
        Ok(LevelFeatures {
            object: g.value(o).clone(),
            edge: g.value(e).clone(),
            triplet: g.value(t).clone(),
            edge_ids: view.input.edge_ids.clone(),
        })
    }

    fn gen_view_spec(&self) -> ViewSpec {
        ViewSpec::new(GEN_VIEW_TAG, Role::Student, Source::Origin, self.cfg.sma.gen_point_mask, 0.0)
    }

    /// Builds the per-sample objective on `g` and returns
    /// `(gen, distill, total)` plus the teacher features used.
    pub fn sample_objective(
        &self,
        g: &mut Graph,
        state: &TrainState,
        sample: &SubgraphSample,
        seed: u64,
    ) -> Result<([Var; 3], Vec<LevelFeatures>)> {
        let cfg = &self.cfg;
        let mode = cfg.anchor_mode;
        let anchor_seed = derive_seed(seed, &[0]);

        let gen_view = build_view(sample, &self.gen_view_spec(), SeededRng::derive(seed, &[1]))?;
        let anchors = self.view_anchors(sample, &gen_view, mode, anchor_seed)?;
        let latent = self.encode(g, &state.student, &gen_view.input, &anchors)?;
        let clean: Vec<Vec<Point>> = sample.nodes.iter().map(|n| n.points.clone()).collect();
        let nafl = cfg.diff.nafl_enabled.then_some(&cfg.nafl);
        let targets = gen_targets(&clean, cfg.diff.points, nafl, derive_seed(seed, &[2]))?;
        let gen = gen_loss(g, &state.student, &self.denoiser, latent.nodes, &targets, &self.schedule, derive_seed(seed, &[3]))?;

        let views = build_views(sample, &cfg.sma.views, derive_seed(seed, &[4]))?;
        let mut encodings = Vec::with_capacity(views.len());
        let mut teacher_feats = Vec::new();
        for view in &views {
            let enc = match view.role {
                Role::Teacher => {
                    let f = self.teacher_features(&state.teacher, sample, view, anchor_seed)?;
                    let enc = ViewEncoding {
                        tag: view.tag.clone(),
                        role: Role::Teacher,
                        object: g.constant(f.object.clone())?,
                        edge: g.constant(f.edge.clone())?,
                        triplet: g.constant(f.triplet.clone())?,
                        edge_ids: f.edge_ids.clone(),
                    };
                    teacher_feats.push(f);
                    enc
                }
                Role::Student => {
                    let anchors = self.view_anchors(sample, view, mode, anchor_seed)?;
                    let latent = self.encode(g, &state.student, &view.input, &anchors)?;
                    let [o, e, t] = self.level_vars(g, &latent, &view.input)?;
                    ViewEncoding {
                        tag: view.tag.clone(),
                        role: Role::Student,
                        object: self.predictors[0].forward(g, &state.student, o)?,
                        edge: self.predictors[1].forward(g, &state.student, e)?,
                        triplet: self.predictors[2].forward(g, &state.student, t)?,
                        edge_ids: view.input.edge_ids.clone(),
                    }
                }
            };
            encodings.push(enc);
        }
        let distill = distill_loss(g, &state.bank, &encodings, &cfg.sma.pairs, cfg.sma.mode)?.loss;
        let total = total_loss(g, gen, distill, cfg.sma.lambda)?;
        Ok(([gen, distill, total], teacher_feats))
    }

    /// Losses and gradients of one sample.
    pub fn sample_step(&self, state: &TrainState, sample: &SubgraphSample, seed: u64) -> Result<SampleStep> {
        let mut g = Graph::new();
        let ([gen, distill, total], teacher_features) = self.sample_objective(&mut g, state, sample, seed)?;
        let losses = LossValues {
            gen: g.scalar(gen),
            distill: g.scalar(distill),
            total: g.scalar(total),
        };
        let grads = g.backward(total)?.into_params();
        Ok(SampleStep {
            losses,
            grads,
            teacher_features,
        })
    }

    /// One optimizer step on a batch: mean per-sample gradient, AdamW on
    /// student and prototypes, prototype renormalization, EMA, enqueue of
    /// the teacher features. Returns the mean losses.
    pub fn train_batch(&self, state: &mut TrainState, batch: &[(usize, &SubgraphSample, u64)], lr: f64) -> Result<LossValues> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        state.bank.cache_support_scores()?;
        let inv = 1.0 / batch.len() as f64;
        let mut grads = GradMap::new();
        let mut mean = LossValues::default();
        let mut queued = Vec::new();
        for &(id, sample, seed) in batch {
            let step = self.sample_step(state, sample, seed).map_err(|e| match e {
                Error::NonFinite { op } => Error::NumericalAbort {
                    sample: id,
                    msg: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            let l = step.losses;
            if !(l.gen.is_finite() && l.distill.is_finite() && l.total.is_finite()) {
                return Err(Error::NumericalAbort {
                    sample: id,
                    msg: "non-finite loss".into(),
                });
            }
            mean.gen += l.gen * inv;
            mean.distill += l.distill * inv;
            mean.total += l.total * inv;
            accumulate(&mut grads, &step.grads);
            queued.extend(step.teacher_features);
        }
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        if let Some(c) = self.cfg.optim.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let (proto_grads, student_grads): (GradMap, GradMap) = grads.into_iter().partition(|(k, _)| k.starts_with("proto."));
        adamw_step(&mut state.student, &student_grads, &self.cfg.optim, lr)?;
        adamw_step(&mut state.bank.protos, &proto_grads, &self.cfg.optim, lr)?;
        state.bank.renormalize_prototypes();
        ema_update(&state.student, &mut state.teacher, self.cfg.sma.ema_alpha, PREDICTOR_PREFIX)?;
        for f in &queued {
            push_features(&mut state.bank, f)?;
        }
        Ok(mean)
    }

    /// Fills the queues with teacher features of the teacher views before
    /// the first step. Stops once every queue is at capacity or after one
    /// pass over `data`; returns the number of samples consumed.
    pub fn warmup_queues(&self, state: &mut TrainState, data: &[SubgraphSample], seed: u64) -> Result<usize> {
        let teacher_specs: Vec<ViewSpec> = self.cfg.sma.views.iter().filter(|v| v.role == Role::Teacher).cloned().collect();
        let mut used = 0;
        for (i, sample) in data.iter().enumerate() {
            if state.bank.queues_full() {
                break;
            }
            let s = derive_seed(seed, &[i as u64]);
            for view in build_views(sample, &teacher_specs, derive_seed(s, &[4]))? {
                let f = self.teacher_features(&state.teacher, sample, &view, derive_seed(s, &[0]))?;
                push_features(&mut state.bank, &f)?;
            }
            used += 1;
        }
        if !state.bank.queues_full() {
            log::warn!(
                "queue warm-up exhausted {} samples with queues at {}/{}/{} of {}",
                data.len(),
                state.bank.queue_len(Level::Object),
                state.bank.queue_len(Level::Edge),
                state.bank.queue_len(Level::Triplet),
                state.bank.cfg.queue_len
            );
        }
        Ok(used)
    }

    /// Clean-sample features from `store` (object rows, edge rows).
    pub fn embed(&self, store: &ParamStore, sample: &SubgraphSample, seed: u64) -> Result<LevelFeatures> {
        let input = GraphInput::from_sample(sample)?;
        let descriptors: Vec<SpatialDescriptor> = sample.nodes.iter().map(|n| n.descriptor).collect();
        let view = SampleView {
            tag: "clean".into(),
            role: Role::Teacher,
            input,
            descriptors,
        };
        self.teacher_features(store, sample, &view, seed)
    }

    /// Anchors the full sample, propagates with the student encoder and
    /// reverse-samples `points` points per node.
    pub fn recover(&self, student: &ParamStore, sample: &SubgraphSample, points: usize, seed: u64) -> Result<Vec<(u32, Vec<Point>)>> {
        let input = GraphInput::from_sample(sample)?;
        let conds = condition_set(sample, self.cfg.anchor_mode, derive_seed(seed, &[0]))?;
        let anchors = anchor_rows(&input, &conds)?;
        let mut g = Graph::no_grad();
        let latent = self.encode(&mut g, student, &input, &anchors)?;
        let cond = g.value(latent.nodes).clone();
        let clouds = reverse_sample(
            &self.denoiser,
            student,
            &cond,
            &vec![points; sample.nodes.len()],
            &self.schedule,
            derive_seed(seed, &[1]),
        )?;
        Ok(input.node_ids.iter().copied().zip(clouds).collect())
    }
}

/// Copy of `student` without the predictor heads.
pub fn teacher_snapshot(student: &ParamStore) -> ParamStore {
    let mut t = student.snapshot_where(|n| !n.starts_with(PREDICTOR_PREFIX));
    for (_, p) in t.iter_mut() {
        p.m = Tensor::zeros(p.value.shape());
        p.v = Tensor::zeros(p.value.shape());
        p.step = 0;
    }
    t
}

fn push_features(bank: &mut DistillBank, f: &LevelFeatures) -> Result<()> {
    bank.queue_push(Level::Object, &f.object)?;
    bank.queue_push(Level::Edge, &f.edge)?;
    bank.queue_push(Level::Triplet, &f.triplet)
}
