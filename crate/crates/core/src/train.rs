//! Pretraining loop, evaluation, metrics CSVs and resumable checkpoints.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Archive;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{ari, cluster_acc, kmeans, layout_error, nmi, relation_bin};
use crate::model::{LossValues, TollModel, TrainState};
use crate::optim::cosine_lr;
use crate::params::ParamStore;
use crate::rng::{derive_seed, SeededRng};
use crate::scene::SubgraphSample;
use crate::sma::{normalize_rows, DistillBank, Level};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str =
    "epoch,loss_gen,loss_distill,lr,nmi_obj,ari_obj,acc_obj,nmi_edge,ari_edge,acc_edge,layout_centroid_err";
pub const LOSSES_HEADER: &str = "epoch,loss_gen,loss_distill,loss_total,lr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.txt";

const SEED_WARMUP: u64 = 5;
const SEED_ORDER: u64 = 3;
const SEED_STEP: u64 = 4;
const SEED_EVAL: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss_gen: f64,
    pub loss_distill: f64,
    pub lr: f64,
    pub nmi_obj: f64,
    pub ari_obj: f64,
    pub acc_obj: f64,
    pub nmi_edge: f64,
    pub ari_edge: f64,
    pub acc_edge: f64,
    pub layout_centroid_err: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_gen,
            self.loss_distill,
            self.lr,
            self.nmi_obj,
            self.ari_obj,
            self.acc_obj,
            self.nmi_edge,
            self.ari_edge,
            self.acc_edge,
            self.layout_centroid_err
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f = parse_fields(line, 11)?;
        Ok(Self {
            epoch: f[0] as usize,
            loss_gen: f[1],
            loss_distill: f[2],
            lr: f[3],
            nmi_obj: f[4],
            ari_obj: f[5],
            acc_obj: f[6],
            nmi_edge: f[7],
            ari_edge: f[8],
            acc_edge: f[9],
            layout_centroid_err: f[10],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub losses: LossValues,
    pub lr: f64,
}

impl LossRow {
    pub fn csv(&self) -> String {
        let l = self.losses;
        format!("{},{},{},{},{}", self.epoch, l.gen, l.distill, l.total, self.lr)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f = parse_fields(line, 5)?;
        Ok(Self {
            epoch: f[0] as usize,
            losses: LossValues {
                gen: f[1],
                distill: f[2],
                total: f[3],
            },
            lr: f[4],
        })
    }
}

fn parse_fields(line: &str, n: usize) -> Result<Vec<f64>> {
    let f: Vec<f64> = line
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            line: 0,
            msg: format!("bad CSV row `{line}`"),
        })?;
    if f.len() != n {
        return Err(Error::Parse {
            line: 0,
            msg: format!("expected {n} fields in `{line}`"),
        });
    }
    Ok(f)
}

fn csv_text<T>(header: &str, rows: &[T], f: impl Fn(&T) -> String) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        let _ = writeln!(s, "{}", f(r));
    }
    s
}

fn parse_csv<T>(text: &str, header: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{header}`"),
        });
    }
    lines.filter(|l| !l.trim().is_empty()).map(f).collect()
}

/// Clustering scores of one feature level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelScores {
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
    pub labels: Vec<usize>,
    pub clusters: Vec<usize>,
    /// L2-normalized features.
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub object: LevelScores,
    pub edge: LevelScores,
    pub layout_centroid_err: f64,
    /// Distinct prototypes hit by the arg-max of object features.
    pub object_prototypes_used: usize,
}

fn score_level(features: Tensor, labels: Vec<usize>, seed: u64, iters: usize) -> Result<LevelScores> {
    let features = normalize_rows(&features);
    let k = labels.iter().collect::<BTreeSet<_>>().len().max(1);
    let clusters = kmeans(&features, k, seed, iters)?;
    Ok(LevelScores {
        nmi: nmi(&labels, &clusters)?,
        ari: ari(&labels, &clusters)?,
        acc: cluster_acc(&labels, &clusters)?,
        labels,
        clusters,
        features,
    })
}

fn dense_labels(raw: &[u32]) -> Vec<usize> {
    let ids: Vec<u32> = raw.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    raw.iter().map(|r| ids.binary_search(r).unwrap()).collect()
}

/// Embeds every clean sample with `encoder` and clusters object and edge
/// features against categories and relation bins; recovers the first
/// `eval.layout_samples` samples with `student` for the layout error.
pub fn evaluate(
    model: &TollModel,
    encoder: &ParamStore,
    student: &ParamStore,
    bank: &DistillBank,
    data: &[SubgraphSample],
    seed: u64,
) -> Result<Evaluation> {
    let mut obj_rows = Vec::new();
    let mut obj_labels = Vec::new();
    let mut edge_rows = Vec::new();
    let mut edge_labels = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let f = model.embed(encoder, s, derive_seed(seed, &[0, i as u64]))?;
        for (r, n) in s.nodes.iter().enumerate() {
            obj_rows.push(f.object.row(r).to_vec());
            obj_labels.push(n.category);
        }
        for (r, e) in s.edges.iter().enumerate() {
            edge_rows.push(f.edge.row(r).to_vec());
            let g = e.geometry.0;
            edge_labels.push(relation_bin([g[0], g[1], g[2]]) as u32);
        }
    }
    let iters = model.cfg.eval.kmeans_iters;
    let object = score_level(Tensor::from_rows(&obj_rows)?, dense_labels(&obj_labels), derive_seed(seed, &[1]), iters)?;
    let edge = score_level(Tensor::from_rows(&edge_rows)?, dense_labels(&edge_labels), derive_seed(seed, &[2]), iters)?;

    let scores = object.features.matmul_t(bank.prototypes(Level::Object))?;
    let used: BTreeSet<usize> = (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0)
        })
        .collect();

    let n_layout = model.cfg.eval.layout_samples.min(data.len());
    let mut err = 0.0;
    for (i, s) in data.iter().take(n_layout).enumerate() {
        let rec = model.recover(student, s, model.cfg.diff.points, derive_seed(seed, &[3, i as u64]))?;
        err += layout_error(&rec, s)?.mean_centroid / n_layout as f64;
    }
    Ok(Evaluation {
        object,
        edge,
        layout_centroid_err: if n_layout == 0 { f64::NAN } else { err },
        object_prototypes_used: used.len(),
    })
}

/// Training run state; `epoch` counts completed epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TollModel,
    pub state: TrainState,
    pub data: Vec<SubgraphSample>,
    pub epoch: usize,
    pub metrics: Vec<MetricsRow>,
    pub losses: Vec<LossRow>,
}

impl Trainer {
    /// Initializes parameters, records the random-init metrics row (epoch
    /// 0, losses NaN) and warms the queues.
    pub fn new(cfg: &RunConfig, data: Vec<SubgraphSample>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config {
                key: "data.samples".into(),
                msg: "dataset is empty".into(),
            });
        }
        let model = TollModel::new(cfg)?;
        let seed = cfg.run.seed;
        let state = model.init_state(seed)?;
        let mut t = Self {
            model,
            state,
            data,
            epoch: 0,
            metrics: Vec::new(),
            losses: Vec::new(),
        };
        let row = t.eval_row(0, LossValues { gen: f64::NAN, distill: f64::NAN, total: f64::NAN }, f64::NAN)?;
        t.metrics.push(row);
        let mut state = t.state.clone();
        t.model.warmup_queues(&mut state, &t.data, derive_seed(seed, &[SEED_WARMUP]))?;
        t.state = state;
        Ok(t)
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.model.cfg
    }

    pub fn evaluate(&self, seed: u64) -> Result<Evaluation> {
        evaluate(&self.model, &self.state.teacher, &self.state.student, &self.state.bank, &self.data, seed)
    }

    fn eval_row(&self, epoch: usize, l: LossValues, lr: f64) -> Result<MetricsRow> {
        let ev = self.evaluate(derive_seed(self.cfg().run.seed, &[SEED_EVAL, epoch as u64]))?;
        Ok(MetricsRow {
            epoch,
            loss_gen: l.gen,
            loss_distill: l.distill,
            lr,
            nmi_obj: ev.object.nmi,
            ari_obj: ev.object.ari,
            acc_obj: ev.object.acc,
            nmi_edge: ev.edge.nmi,
            ari_edge: ev.edge.ari,
            acc_edge: ev.edge.acc,
            layout_centroid_err: ev.layout_centroid_err,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg().run.epochs
    }

    /// Runs one epoch over a seed-fixed permutation of the data.
    pub fn run_epoch(&mut self) -> Result<LossRow> {
        if self.finished() {
            return Err(Error::invalid("run already finished"));
        }
        let e = self.epoch;
        let cfg = self.model.cfg.clone();
        let seed = cfg.run.seed;
        let lr = cosine_lr(e, &cfg.optim)?;
        let order = SeededRng::derive(seed, &[SEED_ORDER, e as u64]).permutation(self.data.len());
        let n_batches = order.len().div_ceil(cfg.run.batch_size);
        let mut mean = LossValues::default();
        for (b, chunk) in order.chunks(cfg.run.batch_size).enumerate() {
            let batch: Vec<(usize, &SubgraphSample, u64)> = chunk
                .iter()
                .map(|&i| (i, &self.data[i], derive_seed(seed, &[SEED_STEP, e as u64, b as u64, i as u64])))
                .collect();
            let l = self.model.train_batch(&mut self.state, &batch, lr)?;
            mean.gen += l.gen / n_batches as f64;
            mean.distill += l.distill / n_batches as f64;
            mean.total += l.total / n_batches as f64;
        }
        self.epoch += 1;
        let row = LossRow {
            epoch: self.epoch,
            losses: mean,
            lr,
        };
        self.losses.push(row);
        if self.epoch % cfg.run.eval_every == 0 || self.finished() {
            let m = self.eval_row(self.epoch, mean, lr)?;
            log::info!("epoch {} gen {:.4} distill {:.4} nmi_obj {:.3} nmi_edge {:.3}", m.epoch, m.loss_gen, m.loss_distill, m.nmi_obj, m.nmi_edge);
            self.metrics.push(m);
        }
        Ok(row)
    }

    /// Runs until the configured epoch count, or until `stop_after`
    /// epochs have been completed in total.
    pub fn run(&mut self, stop_after: Option<usize>) -> Result<()> {
        let end = stop_after.map_or(self.cfg().run.epochs, |s| s.min(self.cfg().run.epochs));
        while self.epoch < end {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        csv_text(METRICS_HEADER, &self.metrics, MetricsRow::csv)
    }

    pub fn losses_csv(&self) -> String {
        csv_text(LOSSES_HEADER, &self.losses, LossRow::csv)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.meta.insert("kind".into(), "checkpoint".into());
        a.meta.insert("epoch".into(), self.epoch.to_string());
        a.stores.insert("student".into(), self.state.student.clone());
        a.stores.insert("teacher".into(), self.state.teacher.clone());
        a.stores.insert("protos".into(), self.state.bank.protos.clone());
        for level in Level::ALL {
            a.tensors.insert(format!("queue.{}", level_name(level)), self.state.bank.queue_view(level));
        }
        a
    }

    /// Writes the archive, config and CSVs so far into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_archive().write(dir)?;
        write_file(&dir.join(CONFIG_FILE), &self.cfg().to_text())?;
        write_file(&dir.join(METRICS_FILE), &self.metrics_csv())?;
        write_file(&dir.join(LOSSES_FILE), &self.losses_csv())
    }

    /// Restores a run saved by [`Trainer::save`] onto the same dataset.
    pub fn load(dir: &Path, data: Vec<SubgraphSample>) -> Result<Self> {
        let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let a = Archive::read(dir)?;
        let model = TollModel::new(&cfg)?;
        let mut bank = DistillBank::new(cfg.sma.bank.clone(), &mut SeededRng::new(0))?;
        bank.protos = a.store("protos")?.clone();
        for level in Level::ALL {
            bank.queue_push(level, a.tensor(&format!("queue.{}", level_name(level)))?)?;
        }
        let epoch = a.meta_str("epoch")?.parse().map_err(|_| Error::Parse {
            line: 0,
            msg: "bad epoch".into(),
        })?;
        Ok(Self {
            model,
            state: TrainState {
                student: a.store("student")?.clone(),
                teacher: a.store("teacher")?.clone(),
                bank,
            },
            data,
            epoch,
            metrics: parse_csv(&read_file(&dir.join(METRICS_FILE))?, METRICS_HEADER, MetricsRow::parse)?,
            losses: parse_csv(&read_file(&dir.join(LOSSES_FILE))?, LOSSES_HEADER, LossRow::parse)?,
        })
    }
}

pub fn level_name(level: Level) -> &'static str {
    match level {
        Level::Object => "obj",
        Level::Edge => "edge",
        Level::Triplet => "trip",
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `sample_00000.txt`, ... in `dir`.
pub fn write_dataset(dir: &Path, samples: &[SubgraphSample]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = dir.join(format!("sample_{i:05}.txt"));
            s.write(&p)?;
            Ok(p)
        })
        .collect()
}

/// Reads every `sample_*.txt` in `dir` in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SubgraphSample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("sample_") && n.ends_with(".txt"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| SubgraphSample::read(p)).collect()
}

/// Output files of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub metrics_path: PathBuf,
    pub losses_path: PathBuf,
    pub checkpoint: PathBuf,
    pub finished: bool,
}

/// Trains (or resumes) and writes `metrics.csv`, `losses.csv` and the
/// checkpoint under `cfg.run.out_dir`. A nonzero `run.stop_after` stops
/// early with a resumable checkpoint.
pub fn run_pretrain(cfg: &RunConfig, data: Vec<SubgraphSample>, resume: bool) -> Result<PretrainOutput> {
    let out = cfg.run.out_dir.clone();
    let ckpt = out.join(CHECKPOINT_DIR);
    let mut trainer = if resume {
        let mut t = Trainer::load(&ckpt, data)?;
        t.model.cfg.run.stop_after = cfg.run.stop_after;
        t
    } else {
        Trainer::new(cfg, data)?
    };
    let stop = (cfg.run.stop_after > 0).then_some(cfg.run.stop_after);
    trainer.run(stop)?;
    trainer.save(&ckpt)?;
    let metrics_path = out.join(METRICS_FILE);
    let losses_path = out.join(LOSSES_FILE);
    write_file(&metrics_path, &trainer.metrics_csv())?;
    write_file(&losses_path, &trainer.losses_csv())?;
    write_file(&out.join(CONFIG_FILE), &trainer.cfg().to_text())?;
    Ok(PretrainOutput {
        metrics_path,
        losses_path,
        checkpoint: ckpt,
        finished: trainer.finished(),
    })
}
