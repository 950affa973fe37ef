//! On-disk formats.
//!
//! Logs are JSON lines: a header `{"schema":"cooptrack.<kind>","version":1}`
//! followed by one record per line. Appearance tensors live in a binary blob
//! next to the detection log. Checkpoints and run metadata are single JSON
//! documents; evaluation tables are CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::covnet::CovNetConfig;
use crate::error::{Error, Result};
use crate::features::{AppearanceShape, AppearanceStore};
use crate::metrics::{EvalReport, GtFrame, RecallRow, TrackFrame};
use crate::pipeline::{group_frames, Frame, FramePacket};
use crate::sim::Sequence;
use crate::training::TrainState;

pub const LOG_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_SCHEMA: &str = "cooptrack.checkpoint";
pub const APPEARANCE_MAGIC: &[u8; 8] = b"CTAPPF01";

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const GT_FILE: &str = "gt.jsonl";
pub const APPEARANCE_FILE: &str = "appearance.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogKind {
    Detections,
    Tracks,
    Gt,
}

impl LogKind {
    pub fn schema(self) -> &'static str {
        match self {
            LogKind::Detections => "cooptrack.detections",
            LogKind::Tracks => "cooptrack.tracks",
            LogKind::Gt => "cooptrack.gt",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
}

fn to_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Input(format!("cannot serialize record: {e}")))
}

pub fn encode_log<T: Serialize>(kind: LogKind, records: &[T]) -> Result<String> {
    let mut out = to_line(&Header {
        schema: kind.schema().to_string(),
        version: LOG_VERSION,
    })?;
    out.push('\n');
    for r in records {
        out.push_str(&to_line(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a log; `path` is only used in error messages.
pub fn decode_log<T: DeserializeOwned>(path: &Path, kind: LogKind, text: &str) -> Result<Vec<T>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, l)) => {
            serde_json::from_str(l).map_err(|e| parse_err(1, format!("bad header: {e}")))?
        }
        None => return Err(parse_err(1, "missing header".into())),
    };
    let expected = format!("{}/v{}", kind.schema(), LOG_VERSION);
    let found = format!("{}/v{}", header.schema, header.version);
    if found != expected {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let mut out = Vec::new();
    for (i, l) in lines {
        if l.trim().is_empty() {
            return Err(parse_err(i + 1, "blank line".into()));
        }
        out.push(serde_json::from_str(l).map_err(|e| parse_err(i + 1, e.to_string()))?);
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_log<T: Serialize>(path: &Path, kind: LogKind, records: &[T]) -> Result<()> {
    write_bytes(path, encode_log(kind, records)?.as_bytes())
}

pub fn read_log<T: DeserializeOwned>(path: &Path, kind: LogKind) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_log(path, kind, &text)
}

pub fn write_detections(path: &Path, packets: &[FramePacket]) -> Result<()> {
    write_log(path, LogKind::Detections, packets)
}

pub fn read_detections(path: &Path) -> Result<Vec<FramePacket>> {
    read_log(path, LogKind::Detections)
}

pub fn write_tracks(path: &Path, frames: &[TrackFrame]) -> Result<()> {
    write_log(path, LogKind::Tracks, frames)
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackFrame>> {
    read_log(path, LogKind::Tracks)
}

pub fn write_gt(path: &Path, frames: &[GtFrame]) -> Result<()> {
    write_log(path, LogKind::Gt, frames)
}

pub fn read_gt(path: &Path) -> Result<Vec<GtFrame>> {
    read_log(path, LogKind::Gt)
}

/// Blob layout: magic, `u32` channels/height/width, `u64` value count, then
/// the values as `f64`, all little-endian.
pub fn encode_appearance(store: &AppearanceStore) -> Vec<u8> {
    let s = store.shape();
    let raw = store.raw();
    let mut out = Vec::with_capacity(28 + 8 * raw.len());
    out.extend_from_slice(APPEARANCE_MAGIC);
    for d in [s.channels, s.height, s.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(raw.len() as u64).to_le_bytes());
    for v in raw {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_appearance(path: &Path, bytes: &[u8]) -> Result<AppearanceStore> {
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 28 || &bytes[..8] != APPEARANCE_MAGIC {
        return Err(bad("not an appearance blob"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let shape = AppearanceShape {
        channels: u32_at(8),
        height: u32_at(12),
        width: u32_at(16),
    };
    let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let body = &bytes[28..];
    if (body.len() / 8) as u64 != count || !body.len().is_multiple_of(8) {
        return Err(bad("value count does not match blob length"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    AppearanceStore::from_raw(shape, data)
}

pub fn write_appearance(path: &Path, store: &AppearanceStore) -> Result<()> {
    write_bytes(path, &encode_appearance(store))
}

pub fn read_appearance(path: &Path) -> Result<AppearanceStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_appearance(path, &bytes)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the detection log and appearance blob of `frames` into `dir`.
pub fn write_detection_dir(
    dir: &Path,
    frames: &[Frame],
    appearance: &AppearanceStore,
) -> Result<()> {
    create_dir(dir)?;
    let packets: Vec<FramePacket> = frames
        .iter()
        .flat_map(|f| f.packets.iter().cloned())
        .collect();
    write_detections(&dir.join(DETECTIONS_FILE), &packets)?;
    write_appearance(&dir.join(APPEARANCE_FILE), appearance)
}

/// Reads a detection directory. A missing blob is allowed when no detection
/// references an appearance tensor.
pub fn read_detection_dir(dir: &Path) -> Result<(Vec<Frame>, AppearanceStore)> {
    let packets = read_detections(&dir.join(DETECTIONS_FILE))?;
    let blob = dir.join(APPEARANCE_FILE);
    let appearance = if blob.exists() {
        read_appearance(&blob)?
    } else {
        AppearanceStore::new(AppearanceShape::default())
    };
    for p in &packets {
        for d in &p.detections {
            if let Some(i) = d.appearance {
                if i as usize >= appearance.len() {
                    return Err(Error::Input(format!(
                        "{}: timestep {} CAV {} references appearance tensor {i}, blob holds {}",
                        dir.display(),
                        p.timestep,
                        p.cav_id,
                        appearance.len()
                    )));
                }
            }
        }
    }
    Ok((group_frames(packets), appearance))
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    write_detection_dir(dir, &seq.frames, &seq.appearance)?;
    write_gt(&dir.join(GT_FILE), &seq.gt)
}

/// Reads a directory written by [`write_sequence`]. Frames are aligned to
/// the ground-truth timesteps; timesteps without packets become empty frames.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let gt = read_gt(&dir.join(GT_FILE))?;
    let (frames, appearance) = read_detection_dir(dir)?;
    let mut by_time = frames.into_iter().peekable();
    let mut aligned = Vec::with_capacity(gt.len());
    for g in &gt {
        match by_time.peek() {
            Some(f) if f.timestep == g.timestep => aligned.push(by_time.next().unwrap()),
            Some(f) if f.timestep < g.timestep => {
                return Err(Error::Input(format!(
                    "{}: detections at timestep {} have no ground-truth frame",
                    dir.display(),
                    f.timestep
                )))
            }
            _ => aligned.push(Frame {
                timestep: g.timestep,
                packets: Vec::new(),
            }),
        }
    }
    if let Some(f) = by_time.next() {
        return Err(Error::Input(format!(
            "{}: detections at timestep {} have no ground-truth frame",
            dir.display(),
            f.timestep
        )));
    }
    Ok(Sequence {
        gt,
        frames: aligned,
        appearance,
    })
}

/// Trained networks with the configuration and seed that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: RunConfig, seed: u64, state: TrainState) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            config,
            state,
        }
    }

    /// Zero-parameter networks; tracks exactly like the constant-covariance
    /// tracker.
    pub fn zeros(config: RunConfig) -> Result<Self> {
        let mut state = TrainState::init(&config.covnet, config.seed)?;
        for net in state.nets.iter_mut() {
            *net = crate::covnet::CovNetParams::zeros(&config.covnet);
        }
        let seed = config.seed;
        Ok(Checkpoint::new(config, seed, state))
    }

    /// Checks network count and tensor shapes, including optimizer moments.
    pub fn check_compatible(&self, cfg: &CovNetConfig) -> Result<()> {
        let s = &self.state;
        let want = cfg.parameter_sets();
        for (what, n) in [
            ("networks", s.nets.len()),
            ("first moments", s.adam.m.len()),
            ("second moments", s.adam.v.len()),
        ] {
            if n != want {
                return Err(Error::Shape(format!(
                    "checkpoint has {n} {what}, run needs {want}"
                )));
            }
        }
        for p in s.nets.iter().chain(&s.adam.m).chain(&s.adam.v) {
            p.check_shapes(cfg)?;
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<String> {
    let mut s = serde_json::to_string(ckpt)
        .map_err(|e| Error::Input(format!("cannot serialize checkpoint: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn decode_checkpoint(path: &Path, text: &str) -> Result<Checkpoint> {
    #[derive(Deserialize)]
    struct Peek {
        schema: String,
        version: u32,
    }
    let parse_err = |e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    };
    let peek: Peek = serde_json::from_str(text).map_err(parse_err)?;
    let expected = format!("{CHECKPOINT_SCHEMA}/v{CHECKPOINT_VERSION}");
    let found = format!("{}/v{}", peek.schema, peek.version);
    if found != expected {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let ckpt: Checkpoint = serde_json::from_str(text).map_err(parse_err)?;
    ckpt.config.validate()?;
    ckpt.check_compatible(&ckpt.config.covnet)?;
    Ok(ckpt)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, encode_checkpoint(ckpt)?.as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &text)
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub command: String,
    pub crate_version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
    pub inputs: Vec<PathBuf>,
}

impl RunMeta {
    pub fn new(command: &str, config: &RunConfig, inputs: Vec<PathBuf>) -> Result<Self> {
        Ok(RunMeta {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_sha256: config.digest()?,
            config: config.clone(),
            inputs,
        })
    }
}

pub fn write_meta(path: &Path, meta: &RunMeta) -> Result<()> {
    let mut s = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Input(format!("cannot serialize metadata: {e}")))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_meta(path: &Path) -> Result<RunMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// One row of the ablation / evaluation summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub amota: f64,
    pub amotp: f64,
    pub samota: f64,
    pub mota: f64,
    pub mt: f64,
    pub ml: f64,
    pub ids: usize,
    /// Shared payload per frame; empty when the detections are unknown.
    pub cost_mb: Option<f64>,
}

impl SummaryRow {
    pub fn new(method: &str, report: &EvalReport, cost_mb: Option<f64>) -> Self {
        SummaryRow {
            method: method.to_string(),
            amota: report.amota,
            amotp: report.amotp,
            samota: report.samota,
            mota: report.mota,
            mt: report.mt,
            ml: report.ml,
            ids: report.id_switches,
            cost_mb,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => return Error::io(path, io),
            _ => unreachable!(),
        }
    }
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

pub fn encode_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| csv_err(Path::new("<memory>"), e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Input(format!("cannot flush CSV: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_bytes(path, encode_csv(rows)?.as_bytes())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Per-recall-level table written next to a summary CSV: `x.csv` → `x_recall.csv`.
pub fn recall_table_path(summary: &Path) -> PathBuf {
    let stem = summary
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    summary.with_file_name(format!("{stem}_recall.csv"))
}

pub fn write_eval(
    path: &Path,
    method: &str,
    report: &EvalReport,
    cost_mb: Option<f64>,
) -> Result<()> {
    write_csv(path, &[SummaryRow::new(method, report, cost_mb)])?;
    write_csv::<RecallRow>(&recall_table_path(path), &report.per_recall)
}

pub fn write_loss_curve(path: &Path, epoch_losses: &[f64]) -> Result<()> {
    let rows: Vec<EpochLoss> = epoch_losses
        .iter()
        .enumerate()
        .map(|(i, l)| EpochLoss {
            epoch: i + 1,
            mean_loss: *l,
        })
        .collect();
    write_csv(path, &rows)
}
