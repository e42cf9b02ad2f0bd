//! `toll` command-line front end.
//!
//! Every config key is also a flag: `--actgr.d 32`, `--sma.lambda 0`, ...
//! `--config <file>` is applied first, then the flags in order.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use log::{info, warn};

use toll_core::checkpoint::Archive;
use toll_core::config::{RunConfig, KEYS};
use toll_core::metrics::layout_error;
use toll_core::scene::{build_dataset, LabeledPointCloud, SubgraphSample};
use toll_core::starvation::{starvation_scaling, Regime, SweepConfig};
use toll_core::tensor::Tensor;
use toll_core::train::{self, MetricsRow, Trainer, METRICS_HEADER};
use toll_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECK: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

const STARVATION_HEADER: &str = "lambda_prior,regime,cum_update,final_residual";
const STARVATION_GAINS: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];
const SLOPE_RANGE: (f64, f64) = (-1.15, -0.85);

/// Short spellings for frequently overridden keys.
const ALIASES: &[(&str, &str)] = &[("lambda", "sma.lambda"), ("seed", "run.seed"), ("stop-after", "run.stop_after")];

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::NumericalAbort { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

fn config_args(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").help("Config file applied before the flags"))
        .arg(Arg::new("preset").long("preset").default_value("desk").help("Base preset: desk or reference"));
    for key in KEYS {
        let mut arg = Arg::new(*key).long(*key).value_name("VALUE").hide(true).action(ArgAction::Append);
        if let Some((alias, _)) = ALIASES.iter().find(|(_, k)| k == key) {
            arg = arg.alias(*alias);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn data_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("data").long("data").value_name("DIR").help("Dataset directory written by gen-data"))
        .arg(
            Arg::new("gen")
                .long("gen")
                .action(ArgAction::SetTrue)
                .help("Generate the synthetic dataset instead of reading --data"),
        )
}

fn cli() -> Command {
    Command::new("toll")
        .about("Anchor-conditioned scene-graph pretraining at desk scale")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            config_args(Command::new("gen-data").about("Generate the synthetic dataset"))
                .arg(Arg::new("out").long("out").value_name("DIR").help("Defaults to <run.out_dir>/data")),
        )
        .subcommand(
            data_args(config_args(Command::new("pretrain").about("Train and write metrics plus a checkpoint")))
                .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("Continue from <run.out_dir>/checkpoint")),
        )
        .subcommand(
            data_args(Command::new("eval").about("Evaluate a checkpoint without updating it"))
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("DIR").required(true))
                .arg(Arg::new("out").long("out").value_name("DIR").required(true))
                .arg(Arg::new("seed").long("seed").value_parser(clap::value_parser!(u64)).default_value("0")),
        )
        .subcommand(
            Command::new("recover")
                .about("Reverse-sample a scene from a checkpoint")
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("DIR").required(true))
                .arg(Arg::new("sample").long("sample").value_name("FILE").required(true))
                .arg(Arg::new("out").long("out").value_name("FILE").required(true))
                .arg(Arg::new("points").long("points").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("seed").long("seed").value_parser(clap::value_parser!(u64)).default_value("0")),
        )
        .subcommand(
            Command::new("starvation-demo")
                .about("Sweep the prior gain on the linear two-pathway model")
                .arg(Arg::new("out").long("out").value_name("FILE").help("CSV path; stdout if absent"))
                .arg(Arg::new("trials").long("trials").value_parser(clap::value_parser!(usize)).default_value("5"))
                .arg(Arg::new("seed").long("seed").value_parser(clap::value_parser!(u64)).default_value("0")),
        )
}

/// Preset, then `--config`, then key flags in command-line order.
fn build_config(m: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::preset(m.get_one::<String>("preset").map(String::as_str).unwrap_or("desk"))?;
    if let Some(path) = m.get_one::<String>("config") {
        let text = train::read_file(Path::new(path))?;
        cfg.apply_text(&text)?;
    }
    let mut flags: Vec<(usize, &str, &str)> = Vec::new();
    for key in KEYS {
        if let (Some(vals), Some(idx)) = (m.get_many::<String>(key), m.indices_of(key)) {
            for (v, i) in vals.zip(idx) {
                flags.push((i, key, v));
            }
        }
    }
    flags.sort_by_key(|f| f.0);
    for (_, key, value) in flags {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(m: &ArgMatches, cfg: &RunConfig) -> CliResult<Vec<SubgraphSample>> {
    match m.get_one::<String>("data") {
        Some(dir) if !m.get_flag("gen") => Ok(train::read_dataset(Path::new(dir))?),
        _ if m.get_flag("gen") => Ok(build_dataset(&cfg.data, cfg.run.seed)?),
        _ => Err(Failure::Core(Error::Config {
            key: "data".into(),
            msg: "pass --data <dir> or --gen".into(),
        })),
    }
}

fn gen_data(m: &ArgMatches) -> CliResult<()> {
    let cfg = build_config(m)?;
    let out = m.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| cfg.run.out_dir.join("data"));
    let data = build_dataset(&cfg.data, cfg.run.seed)?;
    train::write_dataset(&out, &data)?;
    println!("{} samples written to {}", data.len(), out.display());
    Ok(())
}

fn pretrain(m: &ArgMatches) -> CliResult<()> {
    let cfg = build_config(m)?;
    let data = load_data(m, &cfg)?;
    info!("training on {} samples", data.len());
    let out = train::run_pretrain(&cfg, data, m.get_flag("resume"))?;
    println!("metrics: {}", out.metrics_path.display());
    println!("checkpoint: {}", out.checkpoint.display());
    if !out.finished {
        println!("stopped early; resume with --resume");
    }
    Ok(())
}

fn eval(m: &ArgMatches) -> CliResult<()> {
    let ckpt = PathBuf::from(m.get_one::<String>("checkpoint").unwrap());
    let cfg = RunConfig::load(&ckpt.join(train::CONFIG_FILE))?;
    let data = load_data(m, &cfg)?;
    let trainer = Trainer::load(&ckpt, data)?;
    let seed = *m.get_one::<u64>("seed").unwrap();
    let ev = trainer.evaluate(seed)?;
    let row = MetricsRow {
        epoch: trainer.epoch,
        loss_gen: f64::NAN,
        loss_distill: f64::NAN,
        lr: f64::NAN,
        nmi_obj: ev.object.nmi,
        ari_obj: ev.object.ari,
        acc_obj: ev.object.acc,
        nmi_edge: ev.edge.nmi,
        ari_edge: ev.edge.ari,
        acc_edge: ev.edge.acc,
        layout_centroid_err: ev.layout_centroid_err,
    };
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    train::write_file(&out.join(train::METRICS_FILE), &format!("{METRICS_HEADER}\n{}\n", row.csv()))?;

    let mut dump = Archive::new();
    dump.meta.insert("kind".into(), "embeddings".into());
    dump.meta.insert("epoch".into(), trainer.epoch.to_string());
    for (name, level) in [("obj", &ev.object), ("edge", &ev.edge)] {
        let n = level.labels.len();
        let labels = level.labels.iter().map(|&l| l as f64).collect();
        let clusters = level.clusters.iter().map(|&c| c as f64).collect();
        dump.tensors.insert(format!("{name}.features"), level.features.clone());
        dump.tensors.insert(format!("{name}.labels"), Tensor::new(vec![n], labels)?);
        dump.tensors.insert(format!("{name}.clusters"), Tensor::new(vec![n], clusters)?);
    }
    dump.write(&out.join("embeddings"))?;
    println!("{METRICS_HEADER}\n{}", row.csv());
    Ok(())
}

fn recover(m: &ArgMatches) -> CliResult<()> {
    let ckpt = PathBuf::from(m.get_one::<String>("checkpoint").unwrap());
    let sample = SubgraphSample::read(Path::new(m.get_one::<String>("sample").unwrap()))?;
    let trainer = Trainer::load(&ckpt, Vec::new())?;
    let points = m.get_one::<usize>("points").copied().unwrap_or(trainer.cfg().diff.points);
    let seed = *m.get_one::<u64>("seed").unwrap();
    let rec = trainer.model.recover(&trainer.state.student, &sample, points, seed)?;

    let mut cloud = LabeledPointCloud::empty();
    for (id, pts) in &rec {
        if let Some(node) = sample.node(*id) {
            cloud.categories.insert(*id, node.category);
        }
        cloud.instance_ids.extend(std::iter::repeat(*id).take(pts.len()));
        cloud.points.extend_from_slice(pts);
    }
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    cloud.write(&out)?;

    let err = layout_error(&rec, &sample)?;
    println!("node,centroid_err,extent_log_ratio");
    for n in &err.nodes {
        println!("{},{},{}", n.id, n.centroid, n.extent_log_ratio);
    }
    println!("mean_centroid_err,{}", err.mean_centroid);
    println!("scene_extent,{}", sample.scene_extent());
    Ok(())
}

fn starvation_demo(m: &ArgMatches) -> CliResult<()> {
    let sweep = SweepConfig {
        trials: *m.get_one::<usize>("trials").unwrap(),
        seed: *m.get_one::<u64>("seed").unwrap(),
        ..SweepConfig::default()
    };
    let multi = starvation_scaling(&STARVATION_GAINS, Regime::Multi, &sweep)?;
    let single = starvation_scaling(&STARVATION_GAINS, Regime::Single, &sweep)?;
    let mut csv = format!("{STARVATION_HEADER}\n");
    for p in multi.points.iter().chain(&single.points) {
        csv.push_str(&format!("{},{},{},{}\n", p.lambda_prior, p.regime, p.cum_update, p.final_residual));
    }
    match m.get_one::<String>("out") {
        Some(path) => train::write_file(Path::new(path), &csv)?,
        None => print!("{csv}"),
    }
    eprintln!("multi-regime slope {:.4}", multi.slope);
    if !(SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&multi.slope) {
        return Err(Failure::Check(format!(
            "slope {:.4} outside [{}, {}]",
            multi.slope, SLOPE_RANGE.0, SLOPE_RANGE.1
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("gen-data", m)) => gen_data(m),
        Some(("pretrain", m)) => pretrain(m),
        Some(("eval", m)) => eval(m),
        Some(("recover", m)) => recover(m),
        Some(("starvation-demo", m)) => starvation_demo(m),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            warn!("check failed");
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}
