use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use raliflow_core::bevgrid::{dynamic_radar_map, gaussian_heatmap};
use raliflow_core::dataset::{
    fmt_f64, read_dataset, synthesize, write_csv, write_dataset, write_labels, write_lidar_csv,
    write_radar_csv, Dataset,
};
use raliflow_core::exec;
use raliflow_core::pipeline::{
    ablate, evaluate, predict, prepare_samples, preprocess_frame, zero_flow_report, PipelineConfig,
    Sample, Trainer,
};

#[derive(Parser, Debug)]
#[command(
    name = "raliflow",
    version,
    about = "Radar and LiDAR scene flow pipeline"
)]
struct Cli {
    /// JSON config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of frame pairs (default: split.pairs).
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Ground removal, projection and radar denoising for every frame.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow labels for the preprocessed source frame of every pair.
    Labelgen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the non-held-out pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory for the checkpoint and the epoch log.
        #[arg(long)]
        out: PathBuf,
        /// Epochs to run in this invocation (default: training.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out end-point errors as JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Without a checkpoint the freshly initialised model is evaluated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate the zero-flow baseline instead of a model.
        #[arg(long)]
        zero_flow: bool,
    },
    /// Per-point flow CSVs for the held-out pairs.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// The dynamics heatmap of one frame as a height x width CSV.
    InspectHeatmap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate each fusion variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Caps the worker pool at `RALIFLOW_THREADS`, or at `default` when unset.
fn init_threads(default: Option<usize>) -> Result<()> {
    let n = match std::env::var("RALIFLOW_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .context("RALIFLOW_THREADS must be a positive integer")?,
        ),
        Err(_) => default,
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn samples(ds: &Dataset, pairs: &[usize], cfg: &PipelineConfig) -> Result<Vec<Sample>> {
    Ok(prepare_samples(ds, pairs, cfg)?)
}

fn load_trainer(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg.model.clone(), cfg.training.clone());
    if let Some(p) = checkpoint {
        let f = fs::File::open(p).with_context(|| format!("opening checkpoint {}", p.display()))?;
        t.load(BufReader::new(f))?;
    }
    Ok(t)
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn bool_cell(b: bool) -> String {
    u8::from(b).to_string()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!(raliflow_core::Error::Config(
            "no command given (see --help)".into()
        ));
    };
    // training is sequential unless the user asks for threads
    init_threads(matches!(command, Command::Train { .. } | Command::Ablate { .. }).then_some(1))?;

    match command {
        Command::Synth { out, pairs } => {
            let (ds, truth) = synthesize(&cfg.scene, pairs.unwrap_or(cfg.split.pairs))?;
            write_dataset(&out, &ds, Some(&truth))?;
        }
        Command::Preprocess { data, out } => {
            let ds = load_dataset(&data)?;
            for sub in ["radar", "lidar", "masks"] {
                create_dir(&out.join(sub))?;
            }
            let done = exec::try_map_ordered(&ds.frames, |f| -> raliflow_core::Result<()> {
                let p = preprocess_frame(f, &ds.radar_extrinsic, &cfg.ground, &cfg.denoise)?;
                write_radar_csv(&out.join("radar").join(format!("{}.csv", f.id)), &p.radar)?;
                write_lidar_csv(&out.join("lidar").join(format!("{}.csv", f.id)), &p.lidar)?;
                // per raw radar point; denoise columns are blank for ground points
                let mut ng = 0;
                let rows = p.radar_ground_keep.iter().map(|&g| {
                    if g {
                        let r = vec![
                            "1".into(),
                            bool_cell(p.denoise.hard_keep[ng]),
                            bool_cell(p.denoise.soft_keep[ng]),
                            bool_cell(p.denoise.keep[ng]),
                        ];
                        ng += 1;
                        r
                    } else {
                        vec!["0".into(), String::new(), String::new(), "0".into()]
                    }
                });
                write_csv(
                    &out.join("masks").join(format!("{}_radar.csv", f.id)),
                    &["ground_keep", "hard_keep", "soft_keep", "keep"],
                    rows.collect::<Vec<_>>(),
                )?;
                write_csv(
                    &out.join("masks").join(format!("{}_lidar.csv", f.id)),
                    &["ground_keep"],
                    p.lidar_ground_keep.iter().map(|&g| vec![bool_cell(g)]),
                )
            });
            done?;
        }
        Command::Labelgen { data, out } => {
            let ds = load_dataset(&data)?;
            create_dir(&out)?;
            let all: Vec<usize> = (0..ds.pairs.len()).collect();
            let samples = samples(&ds, &all, &cfg)?;
            for (pair, s) in all.iter().zip(&samples) {
                let id = &ds.frames[ds.pairs[*pair].0].id;
                write_labels(&out.join(format!("{id}_radar.csv")), &s.labels.radar_flow)?;
                write_labels(&out.join(format!("{id}_lidar.csv")), &s.labels.lidar_flow)?;
            }
        }
        Command::Train {
            data,
            out,
            epochs,
            resume,
        } => {
            let ds = load_dataset(&data)?;
            let train = samples(&ds, &cfg.train_pairs(ds.pairs.len()), &cfg)?;
            if train.is_empty() {
                bail!(raliflow_core::Error::Config(
                    "no training pairs after the hold-out split".into()
                ));
            }
            let mut trainer = load_trainer(&cfg, resume.as_deref())?;
            create_dir(&out)?;
            let log_path = out.join("train_log.jsonl");
            let log_file = fs::OpenOptions::new()
                .create(true)
                .append(resume.is_some())
                .write(true)
                .truncate(resume.is_none())
                .open(&log_path)
                .with_context(|| format!("opening {}", log_path.display()))?;
            let mut log = BufWriter::new(log_file);
            let stdout = std::io::stdout();
            for _ in 0..epochs.unwrap_or(cfg.training.epochs) {
                let entry = trainer.train_epoch(&train)?;
                let line = serde_json::to_string(&entry)?;
                writeln!(log, "{line}")?;
                log.flush()?;
                writeln!(stdout.lock(), "{line}")?;
                let ckpt = out.join("checkpoint.rlfw");
                let f = fs::File::create(&ckpt)
                    .with_context(|| format!("writing {}", ckpt.display()))?;
                let mut w = BufWriter::new(f);
                trainer.save(&mut w)?;
                w.flush()?;
            }
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            zero_flow,
        } => {
            let ds = load_dataset(&data)?;
            let holdout = samples(&ds, &cfg.holdout_pairs(ds.pairs.len()), &cfg)?;
            let report = if zero_flow {
                zero_flow_report(&holdout)?
            } else {
                let t = load_trainer(&cfg, checkpoint.as_deref())?;
                evaluate(&t.model, &holdout)?
            };
            write_json(&out, &report)?;
        }
        Command::Infer {
            data,
            checkpoint,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let pairs = cfg.holdout_pairs(ds.pairs.len());
            let holdout = samples(&ds, &pairs, &cfg)?;
            let t = load_trainer(&cfg, checkpoint.as_deref())?;
            create_dir(&out)?;
            for (pair, s) in pairs.iter().zip(&holdout) {
                let id = &ds.frames[ds.pairs[*pair].0].id;
                let (radar, lidar) = predict(&t.model, s)?;
                let header = ["x", "y", "z", "fx", "fy", "fz"];
                let rows = |pos: Vec<raliflow_core::geom::Vec3>,
                            flow: Vec<raliflow_core::geom::Vec3>| {
                    pos.into_iter()
                        .zip(flow)
                        .map(|(p, f)| {
                            [p.x, p.y, p.z, f.x, f.y, f.z]
                                .iter()
                                .map(|v| fmt_f64(*v))
                                .collect()
                        })
                        .collect::<Vec<Vec<String>>>()
                };
                write_csv(
                    &out.join(format!("{id}_radar.csv")),
                    &header,
                    rows(s.labels.radar.positions(), radar),
                )?;
                write_csv(
                    &out.join(format!("{id}_lidar.csv")),
                    &header,
                    rows(s.labels.lidar.positions(), lidar),
                )?;
            }
        }
        Command::InspectHeatmap { data, frame, out } => {
            let ds = load_dataset(&data)?;
            let f = ds.frames.iter().find(|f| f.id == frame).ok_or_else(|| {
                raliflow_core::Error::Config(format!("no frame {frame:?} in the dataset"))
            })?;
            let p = preprocess_frame(f, &ds.radar_extrinsic, &cfg.ground, &cfg.denoise)?;
            let heat = gaussian_heatmap(
                &dynamic_radar_map(&p.radar, &cfg.grid),
                &cfg.grid,
                cfg.model.sigma_sq_inv,
            );
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            let w = cfg.grid.width;
            let header: Vec<String> = (0..w).map(|x| format!("x{x}")).collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            write_csv(
                &out,
                &header,
                heat.values
                    .chunks(w)
                    .map(|row| row.iter().map(|v| fmt_f64(*v)).collect()),
            )?;
        }
        Command::Ablate { data, out } => {
            let ds = load_dataset(&data)?;
            let n = ds.pairs.len();
            let train = samples(&ds, &cfg.train_pairs(n), &cfg)?;
            let holdout = samples(&ds, &cfg.holdout_pairs(n), &cfg)?;
            write_json(&out, &ablate(&cfg, &train, &holdout)?)?;
        }
    }
    Ok(())
}

/// Machine-readable category of a failure.
fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<raliflow_core::Error>() {
        return e.kind();
    }
    if let Some(io) = e.downcast_ref::<std::io::Error>() {
        return if io.kind() == std::io::ErrorKind::NotFound {
            "missing_file"
        } else {
            "io"
        };
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return "config_invalid";
    }
    "internal"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({
                "error": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
