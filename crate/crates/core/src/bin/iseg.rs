//! `iseg` command line. Exit codes: 0 success, 1 runtime failure, 2 usage.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use iseg::dataset::{load_pairs, save_pair};
use iseg::eval::{
    evaluate, summary_table, write_report, Backend, EmptyBackend, EvalConfig, ModelBackend, OracleBackend,
};
use iseg::mask::Mask2D;
use iseg::model::{ModelConfig, Weights};
use iseg::propagation::{
    evaluate_volume, evenly_spaced_seeds, gen_drifting_volume, load_masks, propagate_volume, save_masks,
    slice_file_name, FeatureSource, PropagationConfig, Volume3D, VolumeLayout,
};
use iseg::service::{default_data_dir, serve, AppState, ServiceConfig};
use iseg::train::{synthetic_set, train_loop, LogRow, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "iseg", version, about = "Click-driven interactive segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Model,
    Oracle,
    Empty,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    RawPatch,
    EncoderStage2,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic image/mask pairs.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a dataset directory or the config's synthetic set.
    Train {
        /// Image/mask pairs.
        #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Train on the synthetic set described by the config.
        #[arg(long)]
        synthetic: bool,
        /// Validation pairs for the per-epoch 1-click IoU.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// CSV log; defaults to the weights path with `.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Number-of-Clicks evaluation.
    EvalNoc {
        /// Image/mask pairs; use --synthetic instead for generated samples.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate this many synthetic samples instead of --data.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 1_000_000)]
        synthetic_seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BackendKind::Model)]
        backend: BackendKind,
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.85,0.9")]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        max_clicks: usize,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Skip latency measurement so reports are byte-reproducible.
        #[arg(long)]
        no_timing: bool,
    },
    /// Propagate seed masks through a volume.
    Propagate {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<usize>>,
        /// Mask stack (same layout as the volume) holding the seed masks.
        #[arg(long)]
        seed_masks: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum)]
        feature_source: Option<Source>,
        /// JSON propagation config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth mask stack; prints DSC/SEN/PPV/IoU.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Also run evenly spaced seed sets of these sizes (needs --gt).
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
    },
    /// Run the HTTP session service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Defaults to $ISEG_DATA_DIR, then ./data.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Write a synthetic drifting-ellipse volume and its ground truth.
    GenVolume {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        depth: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Raw u8 blobs with JSON sidecars instead of PNG directories.
        #[arg(long)]
        raw: bool,
    },
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { out, count, size, seed } => gen_synth(&out, count, size, seed),
        Command::Train {
            data,
            synthetic: _,
            val,
            config,
            out,
            epochs,
            log,
            checkpoint_dir,
            resume,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p).with_context(|| format!("config {}", p.display()))?,
                None => TrainConfig::default(),
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let data = match data {
                Some(d) => load_pairs(&d)?,
                None => cfg.synthetic_train_set()?,
            };
            let val = match val {
                Some(d) => load_pairs(&d)?,
                None => cfg.synthetic_val_set()?,
            };
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let log = log.unwrap_or_else(|| out.with_extension("log.csv"));
            let progress = |r: &LogRow| {
                if let Some(v) = r.val_iou_1click {
                    eprintln!(
                        "epoch {} step {} loss {:.4} val_iou_1click {:.4}",
                        r.epoch, r.step, r.loss, v
                    );
                }
            };
            let opts = TrainOptions {
                checkpoint_dir,
                log_path: Some(log),
                resume,
                on_row: Some(&progress),
            };
            let outcome = train_loop(&cfg, &data, &val, &opts)?;
            outcome
                .weights
                .save_with_meta(&out, serde_json::json!({ "train_config": cfg }))?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::EvalNoc {
            data,
            synthetic,
            synthetic_seed,
            size,
            weights,
            backend,
            thresholds,
            max_clicks,
            report,
            no_timing,
        } => {
            let config = EvalConfig {
                thresholds,
                max_clicks,
                binarize: 0.5,
                timing: !no_timing,
            };
            config.validate().map_err(|e| usage(e.to_string()))?;
            if matches!(backend, BackendKind::Model) && weights.is_none() {
                return Err(usage("--backend model needs --weights"));
            }
            let samples = match (data, synthetic) {
                (Some(d), None) => load_pairs(&d)?,
                (None, Some(n)) => synthetic_set(synthetic_seed, n, size, size)?,
                _ => return Err(usage("give exactly one of --data or --synthetic")),
            };
            let backend: Box<dyn Backend> = match backend {
                BackendKind::Model => {
                    let w = weights.expect("checked above");
                    Box::new(ModelBackend {
                        weights: load_weights(&w)?,
                    })
                }
                BackendKind::Oracle => Box::new(OracleBackend::new(&samples)),
                BackendKind::Empty => Box::new(EmptyBackend),
            };
            let rep = evaluate(backend.as_ref(), &samples, &config)?;
            print!("{}", summary_table(&rep));
            if let Some(path) = report {
                write_report(&rep, &path)?;
            }
            Ok(())
        }
        Command::Propagate {
            volume,
            seeds,
            seed_masks,
            weights,
            feature_source,
            config,
            out,
            gt,
            sweep,
        } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_str::<PropagationConfig>(
                    &fs::read_to_string(&p).with_context(|| format!("config {}", p.display()))?,
                )?,
                None => PropagationConfig::default(),
            };
            if let Some(s) = feature_source {
                cfg.feature_source = match s {
                    Source::RawPatch => FeatureSource::RawPatch,
                    Source::EncoderStage2 => FeatureSource::EncoderStage2,
                };
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let weights = weights.map(|p| load_weights(&p)).transpose()?;
            let vol = Volume3D::load(&volume).with_context(|| format!("volume {}", volume.display()))?;
            let seeds = seeds.unwrap_or_else(|| evenly_spaced_seeds(vol.depth, 3));
            let seed_pairs = load_seed_masks(&seed_masks, &seeds)?;
            let result = propagate_volume(&vol, &seed_pairs, &cfg, weights.as_ref())?;
            fs::create_dir_all(&out)?;
            let layout = VolumeLayout::of(&volume);
            let mask_path = match layout {
                VolumeLayout::PngDir => out.join("masks"),
                VolumeLayout::Raw => out.join("masks.raw"),
            };
            save_masks(&mask_path, &result.masks, layout)?;
            fs::write(
                out.join("provenance.json"),
                serde_json::to_string_pretty(&result.provenance_map())?,
            )?;
            if let Some(gt) = gt {
                let truth = load_masks(&gt)?;
                println!("seeds\tDSC\tSEN\tPPV\tIoU");
                let row = |label: String, masks: &[Mask2D]| -> Result<()> {
                    let m = evaluate_volume(masks, &truth)?;
                    println!("{label}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", m.dsc, m.sen, m.ppv, m.iou);
                    Ok(())
                };
                row(join(&seeds), &result.masks)?;
                for n in sweep.unwrap_or_default() {
                    let s = evenly_spaced_seeds(vol.depth, n);
                    let pairs = load_seed_masks(&seed_masks, &s)?;
                    let r = propagate_volume(&vol, &pairs, &cfg, weights.as_ref())?;
                    row(join(&s), &r.masks)?;
                }
            } else if sweep.is_some() {
                return Err(usage("--sweep needs --gt"));
            }
            Ok(())
        }
        Command::Serve {
            port,
            host,
            weights,
            data_dir,
            cors_origin,
        } => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
                )
                .init();
            let (w, weights_ref) = match weights {
                Some(p) => (load_weights(&p)?, p.display().to_string()),
                None => {
                    tracing::warn!("no --weights given, serving an untrained model");
                    (Weights::init(ModelConfig::default(), 0)?, "init:0".to_string())
                }
            };
            let data_dir = data_dir.unwrap_or_else(default_data_dir);
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| usage(format!("bad address {host}:{port}: {e}")))?;
            let state = Arc::new(AppState::new(&data_dir, w, weights_ref));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(addr, state, ServiceConfig { cors_origin }))
                .with_context(|| format!("serving on {addr}"))?;
            Ok(())
        }
        Command::GenVolume {
            out,
            seed,
            depth,
            size,
            raw,
        } => {
            if depth == 0 || size < 16 {
                return Err(usage("--depth must be positive and --size at least 16"));
            }
            let (vol, gt) = gen_drifting_volume(seed, depth, size, size)?;
            fs::create_dir_all(&out)?;
            if raw {
                vol.save(&out.join("volume.raw"), VolumeLayout::Raw)?;
                save_masks(&out.join("gt.raw"), &gt, VolumeLayout::Raw)?;
            } else {
                vol.save(&out.join("volume"), VolumeLayout::PngDir)?;
                save_masks(&out.join("gt"), &gt, VolumeLayout::PngDir)?;
            }
            Ok(())
        }
    }
}

/// Error chain joined by ": ", dropping causes the outer message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn gen_synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    if size < iseg::train::synth::MIN_SYNTH_SIDE {
        return Err(usage(format!(
            "--size must be at least {}",
            iseg::train::synth::MIN_SYNTH_SIDE
        )));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for item in synthetic_set(seed, count, size, size)? {
        save_pair(out, &item)?;
    }
    Ok(())
}

fn load_weights(path: &Path) -> Result<Weights> {
    Weights::load(path).with_context(|| format!("weights {}", path.display()))
}

/// Seed masks by slice index: `<dir>/NNNN.png` for PNG stacks, position in
/// the blob for raw stacks.
fn load_seed_masks(path: &Path, seeds: &[usize]) -> Result<Vec<(usize, Mask2D)>> {
    match VolumeLayout::of(path) {
        VolumeLayout::PngDir => seeds
            .iter()
            .map(|&k| {
                let p = path.join(slice_file_name(k));
                if !p.is_file() {
                    bail!("missing seed mask {}", p.display());
                }
                Ok((k, Mask2D::load(&p)?))
            })
            .collect(),
        VolumeLayout::Raw => {
            let all = load_masks(path)?;
            seeds
                .iter()
                .map(|&k| match all.get(k) {
                    Some(m) => Ok((k, m.clone())),
                    None => bail!("missing seed mask for slice {k}"),
                })
                .collect()
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
}
