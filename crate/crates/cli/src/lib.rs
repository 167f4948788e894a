//! The `longiseg` command line.

pub mod config;
pub mod error;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use longiseg_core::io::{read_binary_mask, read_labels, read_volume, write_labels, write_volume};
use longiseg_core::metrics::{class_metrics, confusion};
use longiseg_core::preprocess::{preprocess_pair, RawStudy};
use longiseg_core::synth::{generate_dataset, Manifest, Split};
use longiseg_core::{Grid, InputScheme, LabelVolume, Lesion};
use longiseg_model::{checkpoint, Network};
use longiseg_service::{Engine, ServiceConfig};
use longiseg_train::{evaluate_rounds, load_split, train, NetworkSegmenter};

pub use config::Config;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "longiseg", version, about = "Interactive lesion segmentation on longitudinal CT pairs")]
pub struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random source; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop, normalize, register and resize one scan pair.
    Preprocess(PreprocessArgs),
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// proposed, static_edit or long_edit_ref_seg
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[usize; 3]>,
    },
    /// Scripted multi-round refinement on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        /// Scribbles per slice.
        #[arg(long, default_value_t = longiseg_core::editsim::DEFAULT_EDIT_CAP)]
        cap: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for report.json, metrics.jsonl and dice_by_round.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[usize; 3]>,
    },
    /// Serve refinement sessions over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        edit_cap: Option<usize>,
    },
    /// Per-class DSC, PPV, TPR and VD of a prediction.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub ref_seg: PathBuf,
    #[arg(long)]
    pub target_seg: Option<PathBuf>,
    /// Lung mask of the reference; the whole volume when absent.
    #[arg(long)]
    pub ref_lung: Option<PathBuf>,
    #[arg(long)]
    pub target_lung: Option<PathBuf>,
    /// identity, affine or external:<program>
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<[usize; 3]>,
    #[arg(long)]
    pub out: PathBuf,
}

/// `64` or `150,150,150`.
pub fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let shape = match parts.as_slice() {
        [n] => [*n; 3],
        [a, b, c] => [*a, *b, *c],
        _ => return Err("expected one extent or three comma-separated extents".into()),
    };
    if shape.contains(&0) {
        return Err("extents must be positive".into());
    }
    Ok(shape)
}

fn parse_scheme(name: &str) -> Result<InputScheme, CliError> {
    serde_json::from_value(json!(name)).map_err(|_| {
        CliError::Config(format!(
            "unknown input scheme `{name}` (proposed, static_edit, long_edit_ref_seg)"
        ))
    })
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| CliError::Config(format!("unknown split `{name}` (train, val, test)")))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn load_manifest(dir: &Path) -> Result<Manifest, CliError> {
    require(&dir.join(longiseg_core::synth::MANIFEST_FILE))?;
    Ok(Manifest::load(dir)?)
}

/// Input scheme a checkpoint was trained with, from its recorded settings.
fn checkpoint_scheme(meta: &checkpoint::CheckpointMeta) -> InputScheme {
    meta.extra
        .get("scheme")
        .and_then(|s| serde_json::from_value(s.clone()).ok())
        .unwrap_or_default()
}

fn load_checkpoint(path: &Path) -> Result<(Network<f32>, checkpoint::CheckpointMeta), CliError> {
    require(path)?;
    Ok(checkpoint::load::<f32>(path)?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref())?.with_seed(cli.seed);
    cfg.validate()?;
    match cli.command {
        Command::Synth { out } => {
            std::fs::create_dir_all(&out)?;
            let manifest = generate_dataset(&cfg.synth, &out)?;
            println!(
                "{}",
                json!({"out": out, "patients": manifest.patients.len(), "seed": cfg.synth.seed})
            );
        }
        Command::Preprocess(args) => preprocess(&cfg, args)?,
        Command::Train {
            data,
            out,
            log,
            epochs,
            scheme,
            shape,
        } => {
            let mut tc = cfg.train.clone();
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(s) = scheme {
                tc.scheme = parse_scheme(&s)?;
            }
            tc.validate()?;
            let manifest = load_manifest(&data)?;
            let shape = shape.unwrap_or(cfg.data.shape);
            let backend = cfg.backend()?;
            let train_set = load_split::<f32>(&data, &manifest, Split::Train, backend.as_ref(), shape)?;
            let val_set = load_split::<f32>(&data, &manifest, Split::Val, backend.as_ref(), shape)?;
            let net = Network::new(cfg.backbone()?)?;
            let outcome = train(net, &train_set, &val_set, &tc)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            checkpoint::save(&out, &outcome.network, &outcome.checkpoint_meta(&tc))?;
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            write(&log, outcome.log_csv())?;
            println!(
                "{}",
                json!({"checkpoint": out, "log": log, "best_epoch": outcome.best_epoch, "best_val_dice": outcome.best_val_dice})
            );
        }
        Command::Eval {
            checkpoint,
            data,
            rounds,
            cap,
            split,
            out,
            shape,
        } => {
            if cap == 0 {
                return Err(CliError::Config("cap: must be at least 1".into()));
            }
            let (net, meta) = load_checkpoint(&checkpoint)?;
            let manifest = load_manifest(&data)?;
            let split = parse_split(&split)?;
            let shape = shape.unwrap_or(cfg.data.shape);
            let patients = load_split::<f32>(&data, &manifest, split, cfg.backend()?.as_ref(), shape)?;
            let seg = NetworkSegmenter::new(net, checkpoint_scheme(&meta));
            let ev = evaluate_rounds(&seg, &patients, rounds, cap)?;
            std::fs::create_dir_all(&out)?;
            write(&out.join("report.json"), serde_json::to_vec_pretty(&ev)?)?;
            write(&out.join("metrics.jsonl"), ev.to_jsonl()?)?;
            write(&out.join("dice_by_round.csv"), ev.dice_csv())?;
            print!("{}", ev.dice_csv());
        }
        Command::Serve {
            checkpoint,
            port,
            data_dir,
            edit_cap,
        } => {
            let (net, meta) = load_checkpoint(&checkpoint)?;
            let model_ref = longiseg_service::session::sha256_hex(&std::fs::read(&checkpoint)?);
            let mut sc = ServiceConfig::new(data_dir.unwrap_or(cfg.service.data_dir.clone()));
            sc.edit_cap = edit_cap.unwrap_or(cfg.service.edit_cap);
            sc.output_shape = cfg.data.shape;
            let seg = NetworkSegmenter::new(net, checkpoint_scheme(&meta));
            let engine = Engine::new(sc, Arc::new(seg), model_ref)?;
            let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port.unwrap_or(cfg.service.port)));
            tokio::runtime::Runtime::new()?.block_on(longiseg_service::serve(engine, addr))?;
        }
        Command::Metrics { pred, gt } => {
            require(&pred)?;
            require(&gt)?;
            let report = metrics_report(&read_labels(&pred)?, &read_labels(&gt)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

/// Counts and metrics per lesion class; `vd` is null when undefined.
pub fn metrics_report(pred: &LabelVolume, gt: &LabelVolume) -> Result<serde_json::Value, CliError> {
    let mut out = serde_json::Map::new();
    for lesion in Lesion::ALL {
        let c = confusion(pred, gt, lesion)?;
        let m = class_metrics(pred, gt, lesion)?;
        out.insert(
            lesion.name().into(),
            json!({"tp": c.tp, "fp": c.fp, "fn": c.fn_, "dsc": m.dsc, "ppv": m.ppv, "tpr": m.tpr, "vd": m.vd}),
        );
    }
    Ok(out.into())
}

fn preprocess(cfg: &Config, args: PreprocessArgs) -> Result<(), CliError> {
    for p in [&args.reference, &args.target, &args.ref_seg]
        .into_iter()
        .chain(args.target_seg.iter())
        .chain(args.ref_lung.iter())
        .chain(args.target_lung.iter())
    {
        require(p)?;
    }
    let backend = match &args.backend {
        Some(b) => config::parse_backend(b)?,
        None => cfg.backend()?,
    };
    let shape = args.shape.unwrap_or(cfg.data.shape);
    let study = |image: &Path, lung: Option<&PathBuf>, t: u32| -> Result<RawStudy<f32>, CliError> {
        let vol = read_volume::<f32>(image)?;
        let mask = match lung {
            Some(p) => read_binary_mask(p)?,
            None => Grid::filled(vol.shape(), true),
        };
        let mut s = RawStudy::new(vol.grid, mask, t, vol.id)?;
        s.spacing = vol.spacing;
        Ok(s)
    };
    let reference = study(&args.reference, args.ref_lung.as_ref(), 1)?;
    let target = study(&args.target, args.target_lung.as_ref(), 2)?;
    let ref_seg = read_labels(&args.ref_seg)?;
    let target_seg = args.target_seg.as_deref().map(read_labels).transpose()?;
    let pair = preprocess_pair(&reference, &target, &ref_seg, target_seg.as_ref(), backend.as_ref(), shape)?;
    std::fs::create_dir_all(&args.out)?;
    write_volume(&args.out.join("reference.nii.gz"), &pair.reference)?;
    write_volume(&args.out.join("target.nii.gz"), &pair.target)?;
    write_labels(&args.out.join("reference_seg.nii.gz"), &pair.reference_seg)?;
    if let Some(ts) = &pair.target_seg {
        write_labels(&args.out.join("target_seg.nii.gz"), ts)?;
    }
    write(
        &args.out.join("preprocess.json"),
        serde_json::to_vec_pretty(&json!({
            "backend": backend.name(),
            "shape": shape,
            "kept_slices": pair.kept_slices,
        }))?,
    )?;
    println!("{}", json!({"out": args.out, "shape": shape, "kept_slices": pair.kept_slices.len()}));
    Ok(())
}
