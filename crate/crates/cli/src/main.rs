use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cooptrack::config::RunConfig;
use cooptrack::experiment::{self, Variant};
use cooptrack::io::{self, Checkpoint, RunMeta, SummaryRow};
use cooptrack::metrics::{comm_cost, evaluate_with, EvalConfig};
use cooptrack::sim::Sequence;

fn config_help() -> String {
    let toml = RunConfig::default()
        .to_toml_string()
        .unwrap_or_else(|e| format!("<unavailable: {e}>"));
    format!(
        "Every run reads a TOML config. Omitted keys take the defaults below; unknown keys are rejected.\n\n\
         Default configuration:\n\n{toml}"
    )
}

#[derive(Parser)]
#[command(
    name = "cooptrack",
    version,
    about = "Cooperative 3D multi-object tracking with learned covariances"
)]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and write its detection and ground-truth logs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tracker over a detection log.
    Track {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Trained networks; without one, every detection uses the default covariance.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the covariance networks on simulated sequences.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// A sequence directory, or a directory of sequence directories.
        #[arg(long)]
        scenarios: PathBuf,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a track log against ground truth.
    Eval {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the `[eval]` table is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Detection directory used to fill the cost column.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, default_value = "tracker")]
        method: String,
    },
    /// Report the communication cost of a detection log.
    CommCost {
        #[arg(long)]
        detections: PathBuf,
    },
    /// Train and evaluate the four covariance variants on every ablation seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

/// Marks failures that should exit with the usage status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| UsageError(e.to_string()).into())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(io::GT_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("{}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(io::GT_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!(
            "{}: no sequence directories (looked for {})",
            root.display(),
            io::GT_FILE
        );
    }
    Ok(dirs)
}

fn simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let seq = experiment::simulate(&cfg, cfg.seed)?;
    io::write_sequence(out, &seq)?;
    io::write_meta(
        &out.join(io::META_FILE),
        &RunMeta::new("simulate", &cfg, vec![])?,
    )?;
    println!(
        "wrote {} frames, {} detections to {}",
        seq.frames.len(),
        seq.frames.iter().map(|f| f.num_detections()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn track(config: &Path, detections: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (frames, appearance) = io::read_detection_dir(detections)?;
    let tracks = match checkpoint {
        None => experiment::track_constant(&cfg, &frames)?,
        Some(path) => {
            let ckpt = io::read_checkpoint(path)?;
            ckpt.check_compatible(&cfg.covnet)
                .with_context(|| format!("{}", path.display()))?;
            experiment::track_learned(&cfg, &cfg.covnet, &ckpt.state.nets, &frames, &appearance)?
        }
    };
    std::fs::create_dir_all(out).with_context(|| format!("{}", out.display()))?;
    io::write_tracks(&out.join(io::TRACKS_FILE), &tracks)?;
    let mut inputs = vec![detections.to_path_buf()];
    inputs.extend(checkpoint.map(Path::to_path_buf));
    io::write_meta(
        &out.join(io::META_FILE),
        &RunMeta::new("track", &cfg, inputs)?,
    )?;
    println!("wrote {} track frames to {}", tracks.len(), out.display());
    Ok(())
}

fn train(config: &Path, scenarios: &Path, resume: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let dirs = sequence_dirs(scenarios)?;
    let data: Vec<Sequence> = dirs
        .iter()
        .map(|d| io::read_sequence(d))
        .collect::<Result<_, _>>()?;
    let state = match resume {
        None => None,
        Some(path) => {
            let ckpt = io::read_checkpoint(path)?;
            ckpt.check_compatible(&cfg.covnet)
                .with_context(|| format!("{}", path.display()))?;
            if ckpt.seed != cfg.seed {
                bail!(
                    "{}: checkpoint seed {} differs from config seed {}",
                    path.display(),
                    ckpt.seed,
                    cfg.seed
                );
            }
            Some(ckpt.state)
        }
    };
    let state = experiment::train_networks(&cfg, &cfg.covnet, &data, state, cfg.seed)?;
    let losses = state.epoch_losses.clone();
    io::write_checkpoint(out, &Checkpoint::new(cfg.clone(), cfg.seed, state))?;
    io::write_loss_curve(&with_suffix(out, "_loss.csv"), &losses)?;
    let mut inputs = dirs;
    inputs.extend(resume.map(Path::to_path_buf));
    io::write_meta(
        &with_suffix(out, ".meta.json"),
        &RunMeta::new("train", &cfg, inputs)?,
    )?;
    match losses.last() {
        Some(l) => println!("trained {} epochs, final mean loss {l:.6}", losses.len()),
        None => println!("no epochs to train"),
    }
    Ok(())
}

fn eval(
    tracks: &Path,
    gt: &Path,
    out: &Path,
    config: Option<&Path>,
    detections: Option<&Path>,
    method: &str,
) -> Result<()> {
    let eval_cfg = match config {
        Some(p) => load_config(p)?.eval,
        None => EvalConfig::default(),
    };
    let tracks = io::read_tracks(&tracks.join(io::TRACKS_FILE))?;
    let gt = io::read_gt(&gt.join(io::GT_FILE))?;
    let report = evaluate_with(&tracks, &gt, &eval_cfg)?;
    let cost = match detections {
        Some(d) => Some(comm_cost(&io::read_detection_dir(d)?.0).mb_per_frame),
        None => None,
    };
    io::write_eval(out, method, &report, cost)?;
    println!(
        "AMOTA {:.2}  AMOTP {:.2}  sAMOTA {:.2}  MOTA {:.2}  IDS {}",
        report.amota, report.amotp, report.samota, report.mota, report.id_switches
    );
    Ok(())
}

fn comm(detections: &Path) -> Result<()> {
    let (frames, _) = io::read_detection_dir(detections)?;
    let cost = comm_cost(&frames);
    println!("{}", serde_json::to_string_pretty(&cost)?);
    Ok(())
}

fn ablate(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let rows: Vec<SummaryRow> = experiment::ablate(&cfg, &Variant::ALL)?;
    io::write_csv(out, &rows)?;
    io::write_meta(
        &with_suffix(out, ".meta.json"),
        &RunMeta::new("ablate", &cfg, vec![])?,
    )?;
    print!("{}", io::encode_csv(&rows)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Track {
            config,
            detections,
            checkpoint,
            out,
        } => track(&config, &detections, checkpoint.as_deref(), &out),
        Command::Train {
            config,
            scenarios,
            resume,
            out,
        } => train(&config, &scenarios, resume.as_deref(), &out),
        Command::Eval {
            tracks,
            gt,
            out,
            config,
            detections,
            method,
        } => eval(
            &tracks,
            &gt,
            &out,
            config.as_deref(),
            detections.as_deref(),
            &method,
        ),
        Command::CommCost { detections } => comm(&detections),
        Command::Ablate { config, out } => ablate(&config, &out),
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}")
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            eprintln!("cooptrack: error: {msg}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
