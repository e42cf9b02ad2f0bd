//! Flat `key = value` run configuration with dotted keys.
//!
//! Every key has a default (the `desk` preset). Unknown keys, malformed
//! values and inconsistent combinations are errors naming the key.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::actgr::{AnchorMode, PropagationConfig};
use crate::diffusion::{NaflConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::scene::DataConfig;
use crate::sma::{default_pairs, default_view_table, format_pairs, parse_pairs, parse_view_table, BankConfig, DistillMode, ViewSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub out_dir: PathBuf,
    /// Stop (and checkpoint) after this many epochs; 0 runs to the end.
    pub stop_after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSettings {
    pub steps: usize,
    pub schedule: ScheduleKind,
    /// Clean target points per node.
    pub points: usize,
    pub hidden: usize,
    pub nafl_enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmaSettings {
    pub views: Vec<ViewSpec>,
    pub pairs: Vec<(String, String)>,
    /// Point-mask ratio of the anchored view used for generation.
    pub gen_point_mask: f64,
    pub bank: BankConfig,
    pub lambda: f64,
    pub ema_alpha: f64,
    pub mode: DistillMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub kmeans_iters: usize,
    /// Samples used for layout-recovery error at evaluation epochs.
    pub layout_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run: RunSettings,
    pub data: DataConfig,
    pub actgr: PropagationConfig,
    pub anchor_mode: AnchorMode,
    pub diff: DiffusionSettings,
    pub nafl: NaflConfig,
    pub sma: SmaSettings,
    pub optim: OptimizerConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// All keys in canonical order.
pub const KEYS: &[&str] = &[
    "run.seed",
    "run.epochs",
    "run.batch_size",
    "run.eval_every",
    "run.out_dir",
    "run.stop_after",
    "data.scenes",
    "data.samples",
    "data.objects",
    "data.points_per_object",
    "data.noise_clusters",
    "data.noise_points",
    "data.category_weights",
    "data.workspace",
    "data.tau_pts",
    "data.k_min",
    "data.rho_min",
    "data.rho_max",
    "data.points_per_node",
    "data.excluded_ids",
    "actgr.T",
    "actgr.l_base",
    "actgr.d",
    "actgr.anchor_mode",
    "diff.steps",
    "diff.schedule",
    "diff.points",
    "diff.hidden",
    "nafl.enabled",
    "nafl.k",
    "nafl.alpha",
    "nafl.beta",
    "nafl.w_min",
    "nafl.w_max",
    "nafl.eps",
    "nafl.per_node",
    "sma.views",
    "sma.pairs",
    "sma.gen_point_mask",
    "sma.queue_len",
    "sma.protos.obj",
    "sma.protos.edge",
    "sma.protos.trip",
    "sma.tau",
    "sma.sinkhorn_eps",
    "sma.sinkhorn_iters",
    "sma.lambda",
    "sma.ema_alpha",
    "sma.mode",
    "optim.lr",
    "optim.weight_decay",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.warmup_epochs",
    "optim.clip",
    "eval.kmeans_iters",
    "eval.layout_samples",
];

impl RunConfig {
    pub fn desk() -> Self {
        let mut data = DataConfig::default();
        data.samples = 40;
        data.scenes = 0;
        Self {
            run: RunSettings {
                seed: 0,
                epochs: 30,
                batch_size: 8,
                eval_every: 10,
                out_dir: PathBuf::from("runs/desk"),
                stop_after: 0,
            },
            data,
            actgr: PropagationConfig {
                steps: 3,
                l_base: 2,
                dim: 64,
            },
            anchor_mode: AnchorMode::Single,
            diff: DiffusionSettings {
                steps: 100,
                schedule: ScheduleKind::LinearBeta,
                points: 32,
                hidden: 128,
                nafl_enabled: true,
            },
            nafl: NaflConfig::default(),
            sma: SmaSettings {
                views: default_view_table(),
                pairs: default_pairs(),
                gen_point_mask: 0.8,
                bank: BankConfig {
                    dim: 64,
                    prototypes: [64, 32, 48],
                    queue_len: 256,
                    tau: 0.1,
                    sinkhorn_eps: 0.05,
                    sinkhorn_iters: 10,
                },
                lambda: 0.1,
                ema_alpha: 0.996,
                mode: DistillMode::Swav,
            },
            optim: OptimizerConfig {
                total_epochs: 30,
                ..OptimizerConfig::default()
            },
            eval: EvalSettings {
                kmeans_iters: 100,
                layout_samples: 4,
            },
        }
    }

    /// Full-size settings: width 512, 1000/200/500 prototypes, queue 3840,
    /// batch 32, 150 epochs, 512-point threshold, 1024-point objects.
    pub fn reference() -> Self {
        let mut c = Self::desk();
        c.run.epochs = 150;
        c.run.batch_size = 32;
        c.run.out_dir = PathBuf::from("runs/reference");
        c.optim.total_epochs = 150;
        c.actgr.dim = 512;
        c.sma.bank.dim = 512;
        c.sma.bank.prototypes = [1000, 200, 500];
        c.sma.bank.queue_len = 3840;
        c.data.scene.points_per_object = 1024;
        c.data.tau_pts = 512;
        c.data.points_per_node = 1024;
        c.data.samples = 0;
        c.data.scenes = 200;
        c.diff.hidden = 1024;
        c.diff.points = 256;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "reference" => Ok(Self::reference()),
            _ => Err(Error::Config {
                key: "preset".into(),
                msg: format!("unknown preset `{name}`"),
            }),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.seed" => self.run.seed = parse(key, v)?,
            "run.epochs" => {
                self.run.epochs = parse(key, v)?;
                self.optim.total_epochs = self.run.epochs;
            }
            "run.batch_size" => self.run.batch_size = parse(key, v)?,
            "run.eval_every" => self.run.eval_every = parse(key, v)?,
            "run.out_dir" => self.run.out_dir = PathBuf::from(v),
            "run.stop_after" => self.run.stop_after = parse(key, v)?,
            "data.scenes" => self.data.scenes = parse(key, v)?,
            "data.samples" => self.data.samples = parse(key, v)?,
            "data.objects" => self.data.scene.num_objects = parse(key, v)?,
            "data.points_per_object" => self.data.scene.points_per_object = parse(key, v)?,
            "data.noise_clusters" => self.data.scene.noise_clusters = parse(key, v)?,
            "data.noise_points" => self.data.scene.points_per_noise_cluster = parse(key, v)?,
            "data.category_weights" => {
                let w: Vec<f64> = parse_list(key, v)?;
                self.data.scene.category_weights = w.try_into().map_err(|_| Error::Config {
                    key: key.into(),
                    msg: "expected six weights".into(),
                })?;
            }
            "data.workspace" => {
                let w: Vec<f64> = parse_list(key, v)?;
                self.data.scene.workspace = w.try_into().map_err(|_| Error::Config {
                    key: key.into(),
                    msg: "expected three extents".into(),
                })?;
            }
            "data.tau_pts" => self.data.tau_pts = parse(key, v)?,
            "data.k_min" => self.data.k_min = parse(key, v)?,
            "data.rho_min" => self.data.rho_min = parse(key, v)?,
            "data.rho_max" => self.data.rho_max = parse(key, v)?,
            "data.points_per_node" => self.data.points_per_node = parse(key, v)?,
            "data.excluded_ids" => self.data.excluded_ids = parse_list::<u32>(key, v)?.into_iter().collect::<BTreeSet<_>>(),
            "actgr.T" => self.actgr.steps = parse(key, v)?,
            "actgr.l_base" => self.actgr.l_base = parse(key, v)?,
            "actgr.d" => {
                self.actgr.dim = parse(key, v)?;
                self.sma.bank.dim = self.actgr.dim;
            }
            "actgr.anchor_mode" => self.anchor_mode = parse(key, v)?,
            "diff.steps" => self.diff.steps = parse(key, v)?,
            "diff.schedule" => self.diff.schedule = parse(key, v)?,
            "diff.points" => self.diff.points = parse(key, v)?,
            "diff.hidden" => self.diff.hidden = parse(key, v)?,
            "nafl.enabled" => self.diff.nafl_enabled = parse(key, v)?,
            "nafl.k" => self.nafl.k = parse(key, v)?,
            "nafl.alpha" => self.nafl.alpha = parse(key, v)?,
            "nafl.beta" => self.nafl.beta = parse(key, v)?,
            "nafl.w_min" => self.nafl.w_min = parse(key, v)?,
            "nafl.w_max" => self.nafl.w_max = parse(key, v)?,
            "nafl.eps" => self.nafl.eps = parse(key, v)?,
            "nafl.per_node" => self.nafl.per_node = parse(key, v)?,
            "sma.views" => {
                self.sma.views = parse_view_table(v).map_err(|e| Error::Config {
                    key: key.into(),
                    msg: e.to_string(),
                })?
            }
            "sma.pairs" => {
                self.sma.pairs = if v.is_empty() {
                    Vec::new()
                } else {
                    parse_pairs(v).map_err(|e| Error::Config {
                        key: key.into(),
                        msg: e.to_string(),
                    })?
                }
            }
            "sma.gen_point_mask" => self.sma.gen_point_mask = parse(key, v)?,
            "sma.queue_len" => self.sma.bank.queue_len = parse(key, v)?,
            "sma.protos.obj" => self.sma.bank.prototypes[0] = parse(key, v)?,
            "sma.protos.edge" => self.sma.bank.prototypes[1] = parse(key, v)?,
            "sma.protos.trip" => self.sma.bank.prototypes[2] = parse(key, v)?,
            "sma.tau" => self.sma.bank.tau = parse(key, v)?,
            "sma.sinkhorn_eps" => self.sma.bank.sinkhorn_eps = parse(key, v)?,
            "sma.sinkhorn_iters" => self.sma.bank.sinkhorn_iters = parse(key, v)?,
            "sma.lambda" => self.sma.lambda = parse(key, v)?,
            "sma.ema_alpha" => self.sma.ema_alpha = parse(key, v)?,
            "sma.mode" => self.sma.mode = parse(key, v)?,
            "optim.lr" => self.optim.base_lr = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.beta1" => self.optim.betas.0 = parse(key, v)?,
            "optim.beta2" => self.optim.betas.1 = parse(key, v)?,
            "optim.eps" => self.optim.epsilon = parse(key, v)?,
            "optim.warmup_epochs" => self.optim.warmup_epochs = parse(key, v)?,
            "optim.clip" => {
                let c: f64 = parse(key, v)?;
                self.optim.clip_norm = (c > 0.0).then_some(c);
            }
            "eval.kmeans_iters" => self.eval.kmeans_iters = parse(key, v)?,
            "eval.layout_samples" => self.eval.layout_samples = parse(key, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "run.seed" => self.run.seed.to_string(),
            "run.epochs" => self.run.epochs.to_string(),
            "run.batch_size" => self.run.batch_size.to_string(),
            "run.eval_every" => self.run.eval_every.to_string(),
            "run.out_dir" => self.run.out_dir.display().to_string(),
            "run.stop_after" => self.run.stop_after.to_string(),
            "data.scenes" => self.data.scenes.to_string(),
            "data.samples" => self.data.samples.to_string(),
            "data.objects" => self.data.scene.num_objects.to_string(),
            "data.points_per_object" => self.data.scene.points_per_object.to_string(),
            "data.noise_clusters" => self.data.scene.noise_clusters.to_string(),
            "data.noise_points" => self.data.scene.points_per_noise_cluster.to_string(),
            "data.category_weights" => join(self.data.scene.category_weights),
            "data.workspace" => join(self.data.scene.workspace),
            "data.tau_pts" => self.data.tau_pts.to_string(),
            "data.k_min" => self.data.k_min.to_string(),
            "data.rho_min" => self.data.rho_min.to_string(),
            "data.rho_max" => self.data.rho_max.to_string(),
            "data.points_per_node" => self.data.points_per_node.to_string(),
            "data.excluded_ids" => join(&self.data.excluded_ids),
            "actgr.T" => self.actgr.steps.to_string(),
            "actgr.l_base" => self.actgr.l_base.to_string(),
            "actgr.d" => self.actgr.dim.to_string(),
            "actgr.anchor_mode" => self.anchor_mode.to_string(),
            "diff.steps" => self.diff.steps.to_string(),
            "diff.schedule" => self.diff.schedule.to_string(),
            "diff.points" => self.diff.points.to_string(),
            "diff.hidden" => self.diff.hidden.to_string(),
            "nafl.enabled" => self.diff.nafl_enabled.to_string(),
            "nafl.k" => self.nafl.k.to_string(),
            "nafl.alpha" => self.nafl.alpha.to_string(),
            "nafl.beta" => self.nafl.beta.to_string(),
            "nafl.w_min" => self.nafl.w_min.to_string(),
            "nafl.w_max" => self.nafl.w_max.to_string(),
            "nafl.eps" => self.nafl.eps.to_string(),
            "nafl.per_node" => self.nafl.per_node.to_string(),
            "sma.views" => join(&self.sma.views),
            "sma.pairs" => format_pairs(&self.sma.pairs),
            "sma.gen_point_mask" => self.sma.gen_point_mask.to_string(),
            "sma.queue_len" => self.sma.bank.queue_len.to_string(),
            "sma.protos.obj" => self.sma.bank.prototypes[0].to_string(),
            "sma.protos.edge" => self.sma.bank.prototypes[1].to_string(),
            "sma.protos.trip" => self.sma.bank.prototypes[2].to_string(),
            "sma.tau" => self.sma.bank.tau.to_string(),
            "sma.sinkhorn_eps" => self.sma.bank.sinkhorn_eps.to_string(),
            "sma.sinkhorn_iters" => self.sma.bank.sinkhorn_iters.to_string(),
            "sma.lambda" => self.sma.lambda.to_string(),
            "sma.ema_alpha" => self.sma.ema_alpha.to_string(),
            "sma.mode" => self.sma.mode.to_string(),
            "optim.lr" => self.optim.base_lr.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.beta1" => self.optim.betas.0.to_string(),
            "optim.beta2" => self.optim.betas.1.to_string(),
            "optim.eps" => self.optim.epsilon.to_string(),
            "optim.warmup_epochs" => self.optim.warmup_epochs.to_string(),
            "optim.clip" => self.optim.clip_norm.unwrap_or(0.0).to_string(),
            "eval.kmeans_iters" => self.eval.kmeans_iters.to_string(),
            "eval.layout_samples" => self.eval.layout_samples.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment. A `preset = name`
    /// line resets every key to that preset first.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if k == "preset" {
                *self = Self::preset(v.trim())?;
            } else {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its current value, in canonical order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("canonical keys are known")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, msg: String| Error::Config { key: key.into(), msg };
        let wrap = |key: &'static str| move |e: Error| cfg_err(key, e.to_string());
        self.data.validate().map_err(wrap("data"))?;
        self.actgr.validate().map_err(wrap("actgr"))?;
        self.nafl.validate().map_err(wrap("nafl"))?;
        self.sma.bank.validate().map_err(wrap("sma"))?;
        self.optim.validate().map_err(wrap("optim"))?;
        if self.run.epochs == 0 {
            return Err(cfg_err("run.epochs", "must be >= 1".into()));
        }
        if self.run.batch_size == 0 {
            return Err(cfg_err("run.batch_size", "must be >= 1".into()));
        }
        if self.run.eval_every == 0 {
            return Err(cfg_err("run.eval_every", "must be >= 1".into()));
        }
        if self.optim.total_epochs != self.run.epochs {
            return Err(cfg_err("run.epochs", "optimizer schedule length disagrees".into()));
        }
        if self.sma.bank.dim != self.actgr.dim {
            return Err(cfg_err("actgr.d", "distillation width must equal latent width".into()));
        }
        if self.diff.steps == 0 {
            return Err(cfg_err("diff.steps", "must be >= 1".into()));
        }
        if self.diff.points == 0 || self.diff.hidden == 0 {
            return Err(cfg_err("diff.points", "points and hidden width must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sma.gen_point_mask) {
            return Err(cfg_err("sma.gen_point_mask", "must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.sma.ema_alpha) {
            return Err(cfg_err("sma.ema_alpha", "must be in [0, 1]".into()));
        }
        if !(self.sma.lambda >= 0.0) {
            return Err(cfg_err("sma.lambda", "must be >= 0".into()));
        }
        if let AnchorMode::Multi(k) = self.anchor_mode {
            if k == 0 || k > self.data.k_min {
                return Err(cfg_err("actgr.anchor_mode", format!("multi:{k} needs 1 <= k <= data.k_min")));
            }
        }
        let tags: Vec<&str> = self.sma.views.iter().map(|v| v.tag.as_str()).collect();
        for (t, s) in &self.sma.pairs {
            if !tags.contains(&t.as_str()) || !tags.contains(&s.as_str()) {
                return Err(cfg_err("sma.pairs", format!("pair {t}>{s} names an unknown view")));
            }
        }
        if self.diff.nafl_enabled && !self.nafl.per_node && self.diff.points * self.data.k_min <= self.nafl.k {
            return Err(cfg_err("diff.points", "too few target points for the NAFL neighbourhood".into()));
        }
        if self.diff.nafl_enabled && self.nafl.per_node && self.diff.points <= self.nafl.k {
            return Err(cfg_err("diff.points", "per-node NAFL needs more than nafl.k points per node".into()));
        }
        Ok(())
    }
}
