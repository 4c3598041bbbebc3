//! `mlvpt` — the end-to-end pipeline driver.
//!
//! Subcommands: `gen-data` (synthetic splits), `group` (class grouping from
//! a labels CSV), `train`, `eval`, `predict`, and `report` (model/split
//! comparison tables). Exit codes: 0 success, 2 usage or input error,
//! 3 numerical failure.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array1;
use serde::Serialize;

use mlvpt_core::config::RunConfig;
use mlvpt_core::datagen::{
    decorrelated_split, generate, load_dataset, removed_object_probe, write_split, Dataset,
    SynthConfig,
};
use mlvpt_core::encoder::EncoderConfig;
use mlvpt_core::error::{Error, Result};
use mlvpt_core::labelgraph::{self, GroupingConfig, Partition};
use mlvpt_core::model::{MlVptModel, Model, Partitions, VanillaVptModel};
use mlvpt_core::trainer::{self, evaluate_model, TrainMode};
use mlvpt_core::checkpoint;

#[derive(Parser)]
#[command(name = "mlvpt", version, about = "Grouped visual prompt tuning pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic correlated splits (plus optional shifted splits)
    GenData(GenDataArgs),
    /// Cluster classes into CO and DC groups from a labels CSV
    Group(GroupArgs),
    /// Train a model on generated data
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Emit per-image predictions from a checkpoint
    Predict(PredictArgs),
    /// Join histories and per-split metrics into comparison tables
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Group(args) => cmd_group(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Report(args) => report::cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for manifests, CSVs, and image blobs
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    n_classes: usize,
    #[arg(long, default_value_t = 3)]
    n_planted_groups: usize,
    #[arg(long, default_value_t = 0.4)]
    p_group: f64,
    #[arg(long, default_value_t = 0.9)]
    p_in: f64,
    #[arg(long, default_value_t = 0.05)]
    p_bg: f64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, env = "MLVPT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_val: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    /// Also emit a decorrelated test split (independent labels, matched marginals)
    #[arg(long)]
    decorrelated_test: bool,
    /// Also emit a removed-object probe split for the pair `present,removed`
    #[arg(long, value_name = "I,J")]
    probe: Option<String>,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_classes: args.n_classes,
        n_planted_groups: args.n_planted_groups,
        p_group: args.p_group,
        p_in: args.p_in,
        p_bg: args.p_bg,
        image_size: args.image_size,
        patch_size: args.patch_size,
        noise_sigma: args.noise_sigma,
        rng_seed: args.seed,
        n_train: args.n_train,
        n_val: args.n_val,
        n_test: args.n_test,
    };
    let generated = generate(&cfg)?;
    for split in [&generated.train, &generated.val, &generated.test] {
        write_split(&args.out, split, &cfg, Some(&generated.planted_groups))?;
    }
    println!(
        "wrote train/val/test ({} / {} / {} examples) to {}",
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        args.out.display()
    );

    if args.decorrelated_test {
        let marginals = generated.train.labels.marginals();
        let split = decorrelated_split(&cfg, &marginals, cfg.n_test)?;
        write_split(&args.out, &split, &cfg, None)?;
        println!("wrote decorrelated ({} examples)", cfg.n_test);
    }
    if let Some(pair) = &args.probe {
        let (present, removed) = parse_pair(pair)?;
        let split = removed_object_probe(&cfg, present, removed, cfg.n_test)?;
        let name = split.name.clone();
        write_split(&args.out, &split, &cfg, None)?;
        println!("wrote {name} ({} examples)", cfg.n_test);
    }
    Ok(())
}

fn parse_pair(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "probe pair must be 'i,j', got '{text}'"
        )));
    }
    let i = parts[0].trim().parse().map_err(|_| {
        Error::InvalidConfig(format!("bad probe class index '{}'", parts[0]))
    })?;
    let j = parts[1].trim().parse().map_err(|_| {
        Error::InvalidConfig(format!("bad probe class index '{}'", parts[1]))
    })?;
    Ok((i, j))
}

#[derive(Args)]
struct GroupArgs {
    /// Labels CSV (header row, id column first, binary cells)
    #[arg(long)]
    labels: PathBuf,
    /// Output grouping JSON
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_groups: usize,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    #[arg(long, default_value_t = 1e-8)]
    degree_epsilon: f64,
    #[arg(long, default_value_t = 10)]
    kmeans_restarts: usize,
    #[arg(long, env = "MLVPT_SEED", default_value_t = 0)]
    seed: u64,
    /// Also dump the co-occurrence matrix S as a binary matrix file
    #[arg(long)]
    dump_s: Option<PathBuf>,
}

#[derive(Serialize, serde::Deserialize)]
pub struct GroupingFile {
    #[serde(rename = "K")]
    pub k: usize,
    pub n_groups: usize,
    pub tau: f64,
    pub seed: u64,
    pub co_groups: Vec<Vec<usize>>,
    pub dc_groups: Vec<Vec<usize>>,
    #[serde(rename = "S_path", skip_serializing_if = "Option::is_none")]
    pub s_path: Option<String>,
    #[serde(default)]
    pub zero_positive_classes: Vec<usize>,
}

fn cmd_group(args: GroupArgs) -> Result<()> {
    let labels = mlvpt_core::datagen::read_labels_csv(&args.labels)?;
    let cfg = GroupingConfig {
        n_groups: args.n_groups,
        tau: args.tau,
        degree_epsilon: args.degree_epsilon,
        kmeans_restarts: args.kmeans_restarts,
        rng_seed: args.seed,
    };
    let outcome = labelgraph::group_classes(&labels, &cfg)?;
    if !outcome.cooccurrence.zero_positive_classes.is_empty() {
        eprintln!(
            "warning: classes with zero positive examples: {:?}",
            outcome.cooccurrence.zero_positive_classes
        );
    }
    let s_path = match &args.dump_s {
        Some(path) => {
            labelgraph::dump::write_matrix(path, &outcome.cooccurrence.s)?;
            Some(path.display().to_string())
        }
        None => None,
    };
    let file = GroupingFile {
        k: labels.n_classes(),
        n_groups: args.n_groups,
        tau: args.tau,
        seed: args.seed,
        co_groups: outcome.co.groups.clone(),
        dc_groups: outcome.dc.groups.clone(),
        s_path,
        zero_positive_classes: outcome.cooccurrence.zero_positive_classes.clone(),
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&file)?)?;
    println!(
        "grouped {} classes into {}+{} groups -> {}",
        file.k,
        file.co_groups.len(),
        file.dc_groups.len(),
        args.out.display()
    );
    Ok(())
}

pub fn read_grouping(path: &Path) -> Result<GroupingFile> {
    let raw = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::DataFormat {
                path: path.display().to_string(),
                reason: "grouping file not found".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    Ok(serde_json::from_str(&raw)?)
}

fn partitions_from_grouping(file: &GroupingFile) -> Result<Partitions> {
    let to_partition = |groups: &Vec<Vec<usize>>, mode| -> Result<Partition> {
        let mut group_of = vec![0usize; file.k];
        for (t, members) in groups.iter().enumerate() {
            for &c in members {
                if c >= file.k {
                    return Err(Error::InvalidConfig(format!(
                        "grouping file lists class {c} beyond K={}",
                        file.k
                    )));
                }
                group_of[c] = t;
            }
        }
        Partition::from_labels(mode, &group_of, groups.len())
    };
    Ok(Partitions {
        co: to_partition(&file.co_groups, mlvpt_core::labelgraph::AffinityMode::Co)?,
        dc: to_partition(&file.dc_groups, mlvpt_core::labelgraph::AffinityMode::Dc)?,
    })
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration JSON (defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train/val manifests from gen-data
    #[arg(long)]
    data: PathBuf,
    /// grouping.json from the group subcommand
    #[arg(long)]
    grouping: PathBuf,
    /// Model variant; overrides the config file
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Seed override; also honors MLVPT_SEED
    #[arg(long, env = "MLVPT_SEED")]
    seed: Option<u64>,
    /// Output directory for history and checkpoints
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "ml_vpt", alias = "ml-vpt")]
    MlVpt,
    #[value(name = "vanilla_vpt", alias = "vanilla-vpt")]
    VanillaVpt,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::MlVpt => TrainMode::MlVpt,
            ModeArg::VanillaVpt => TrainMode::VanillaVpt,
        }
    }
}

fn check_geometry(enc: &EncoderConfig, ds: &Dataset) -> Result<()> {
    if ds.manifest.height != enc.image_size
        || ds.manifest.width != enc.image_size
        || ds.manifest.channels != enc.channels
    {
        return Err(Error::InvalidConfig(format!(
            "dataset geometry {}x{}x{} does not match encoder {}x{}x{}",
            ds.manifest.channels,
            ds.manifest.height,
            ds.manifest.width,
            enc.channels,
            enc.image_size,
            enc.image_size
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(mode) = args.mode {
        cfg.train.mode = mode.into();
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;

    let train_ds = load_dataset(&args.data.join("train.manifest.json"))?;
    let val_ds = load_dataset(&args.data.join("val.manifest.json"))?;
    check_geometry(&cfg.encoder, &train_ds)?;
    let n_classes = train_ds.labels.n_classes();

    let grouping = read_grouping(&args.grouping)?;
    if grouping.k != n_classes {
        return Err(Error::InvalidConfig(format!(
            "grouping covers {} classes, dataset has {n_classes}",
            grouping.k
        )));
    }

    let mut model = match cfg.train.mode {
        TrainMode::MlVpt => {
            if grouping.n_groups != cfg.encoder.n_groups {
                return Err(Error::InvalidConfig(format!(
                    "grouping has {} groups, encoder expects {}",
                    grouping.n_groups, cfg.encoder.n_groups
                )));
            }
            let partitions = partitions_from_grouping(&grouping)?;
            Model::MlVpt(MlVptModel::new(
                &cfg.encoder,
                partitions,
                cfg.asl,
                cfg.expert_hidden,
                cfg.train.seed,
            )?)
        }
        TrainMode::VanillaVpt => Model::Vanilla(VanillaVptModel::new(
            &cfg.encoder,
            n_classes,
            cfg.asl,
            cfg.train.seed,
        )?),
    };

    trainer::pretrain_backbone(&mut model, &cfg.encoder, &train_ds, &cfg.asl, &cfg.train)?;
    let outcome = trainer::train(&mut model, &train_ds, &val_ds, &cfg.train)?;

    std::fs::create_dir_all(&args.out)?;
    write_history(&args.out.join("history.csv"), &outcome.history)?;
    checkpoint::save_model(&args.out.join("best.ckpt"), &outcome.best, None)?;
    checkpoint::save_model(&args.out.join("last.ckpt"), &model, Some(&outcome.ema))?;
    cfg.save(&args.out.join("config.json"))?;
    std::fs::write(
        args.out.join("params.json"),
        serde_json::to_string_pretty(&model.param_report())?,
    )?;

    println!(
        "trained {} epochs; best val mAP {:.4} at epoch {}; learnable params {}",
        outcome.history.len(),
        outcome.best_val_map,
        outcome.best_epoch,
        model.count_learnable()
    );
    Ok(())
}

fn write_history(path: &Path, history: &[trainer::EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_loss", "val_mAP", "val_CF1", "val_OF1"])?;
    for rec in history {
        w.write_record([
            rec.epoch.to_string(),
            format!("{:.10e}", rec.lr),
            format!("{:.10e}", rec.train_loss),
            format!("{:.10e}", rec.val_map),
            format!("{:.10e}", rec.val_cf1),
            format!("{:.10e}", rec.val_of1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Split manifest (e.g. test.manifest.json)
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Output directory for metrics.json and per_class_ap.csv
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (model, _) = checkpoint::load_model(&args.ckpt)?;
    let ds = load_dataset(&args.data)?;
    let result = evaluate_model(&model, &ds, args.threshold)?;

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&result)?,
    )?;

    let mut w = csv::Writer::from_path(args.out.join("per_class_ap.csv"))?;
    w.write_record(["class", "ap"])?;
    for (c, ap) in result.per_class_ap.iter().enumerate() {
        w.write_record([
            c.to_string(),
            ap.map(|v| format!("{v:.10e}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    println!(
        "split {}: mAP {:.4}  CF1 {:.4}  OF1 {:.4}",
        ds.manifest.split, result.map, result.per_class_f1, result.overall_f1
    );
    Ok(())
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Split manifest to read the image from
    #[arg(long)]
    data: PathBuf,
    /// Example index within the split
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct PredictOutput {
    image_id: usize,
    y_hat_co: Vec<f64>,
    y_hat_dc: Vec<f64>,
    y_hat: Vec<f64>,
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (model, _) = checkpoint::load_model(&args.ckpt)?;
    let ds = load_dataset(&args.data)?;
    if args.index >= ds.len() {
        return Err(Error::InvalidConfig(format!(
            "index {} out of range for {} examples",
            args.index,
            ds.len()
        )));
    }
    let pred = model.predict(ds.image(args.index))?;
    let to_vec = |a: &Array1<f64>| a.iter().copied().collect::<Vec<f64>>();
    let out = PredictOutput {
        image_id: args.index,
        y_hat_co: to_vec(&pred.co),
        y_hat_dc: to_vec(&pred.dc),
        y_hat: to_vec(&pred.combined),
    };
    let json = serde_json::to_string_pretty(&out)?;
    match &args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

