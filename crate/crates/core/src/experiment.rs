//! End-to-end workflows: simulate, track, train, and the ablation grid.

use serde::{Deserialize, Serialize};

use crate::autodiff::Eval;
use crate::config::RunConfig;
use crate::covnet::{CovNetConfig, CovNetParams, FeatureSet};
use crate::error::{Error, Result};
use crate::features::AppearanceStore;
use crate::io::SummaryRow;
use crate::metrics::{comm_cost, evaluate_with, payload_ratio, EvalReport, TrackFrame};
use crate::pipeline::{run_sequence, ConstantResiduals, Frame, NetworkResiduals};
use crate::sim::{generate, scenario_from_config, Sequence};
use crate::training::{train, NetContext, TrainState};

pub fn simulate(cfg: &RunConfig, seed: u64) -> Result<Sequence> {
    generate(&scenario_from_config(
        &cfg.scenario,
        cfg.covnet.appearance,
        seed,
    )?)
}

/// Constant-covariance tracking.
pub fn track_constant(cfg: &RunConfig, frames: &[Frame]) -> Result<Vec<TrackFrame>> {
    let out = run_sequence(&mut Eval, &cfg.tracker, frames, &mut ConstantResiduals)?;
    Ok(out.iter().map(TrackFrame::from).collect())
}

/// Tracking with per-CAV covariance networks.
pub fn track_learned(
    cfg: &RunConfig,
    covnet: &CovNetConfig,
    nets: &[CovNetParams],
    frames: &[Frame],
    appearance: &AppearanceStore,
) -> Result<Vec<TrackFrame>> {
    if appearance.shape() != covnet.appearance && !appearance.is_empty() {
        return Err(Error::Shape(format!(
            "appearance tensors are {:?}, network expects {:?}",
            appearance.shape(),
            covnet.appearance
        )));
    }
    let mut source = NetworkResiduals {
        nets,
        config: covnet,
        bounds: &cfg.features.bounds,
        appearance,
    };
    let out = run_sequence(&mut Eval, &cfg.tracker, frames, &mut source)?;
    Ok(out.iter().map(TrackFrame::from).collect())
}

/// Continues `state` (or a fresh initialization) until `cfg.train.epochs`.
pub fn train_networks(
    cfg: &RunConfig,
    covnet: &CovNetConfig,
    data: &[Sequence],
    state: Option<TrainState>,
    seed: u64,
) -> Result<TrainState> {
    let mut state = match state {
        Some(s) => s,
        None => TrainState::init(covnet, seed)?,
    };
    let ctx = NetContext {
        tracker: &cfg.tracker,
        covnet,
        bounds: &cfg.features.bounds,
        train: &cfg.train,
    };
    train(&mut state, data, &ctx, seed)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Constant,
    AppearanceOnly,
    PositionalOnly,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Constant,
        Variant::AppearanceOnly,
        Variant::PositionalOnly,
        Variant::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Constant => "constant_covariance",
            Variant::AppearanceOnly => "appearance_only",
            Variant::PositionalOnly => "positional_only",
            Variant::Both => "appearance_and_positional",
        }
    }

    pub fn features(self) -> Option<FeatureSet> {
        match self {
            Variant::Constant => None,
            Variant::AppearanceOnly => Some(FeatureSet::AppearanceOnly),
            Variant::PositionalOnly => Some(FeatureSet::PositionalOnly),
            Variant::Both => Some(FeatureSet::Both),
        }
    }
}

/// Data of one ablation seed: an evaluation sequence plus its training set.
pub struct SeedData {
    pub seed: u64,
    pub eval: Sequence,
    pub train: Vec<Sequence>,
}

pub fn seed_data(cfg: &RunConfig, seed: u64) -> Result<SeedData> {
    let train = cfg
        .ablation
        .train_seeds(seed)
        .into_iter()
        .map(|s| simulate(cfg, s))
        .collect::<Result<_>>()?;
    Ok(SeedData {
        seed,
        eval: simulate(cfg, seed)?,
        train,
    })
}

/// Trains (if needed) and evaluates one variant on one seed.
pub fn run_variant(cfg: &RunConfig, data: &SeedData, variant: Variant) -> Result<EvalReport> {
    let tracks = match variant.features() {
        None => track_constant(cfg, &data.eval.frames)?,
        Some(features) => {
            let covnet = CovNetConfig {
                features,
                ..cfg.covnet.clone()
            };
            let init_seed = cfg.seed.wrapping_add(data.seed);
            let state = train_networks(cfg, &covnet, &data.train, None, init_seed)?;
            track_learned(
                cfg,
                &covnet,
                &state.nets,
                &data.eval.frames,
                &data.eval.appearance,
            )?
        }
    };
    evaluate_with(&tracks, &data.eval.gt, &cfg.eval)
}

/// Per-frame communication cost. The constant-covariance variant shares boxes only.
pub fn variant_cost_mb(variant: Variant, frames: &[Frame]) -> f64 {
    let mb = comm_cost(frames).mb_per_frame;
    match variant {
        Variant::Constant => mb / payload_ratio(),
        _ => mb,
    }
}

fn mean_row(method: &str, rows: &[SummaryRow]) -> SummaryRow {
    let n = rows.len() as f64;
    let avg = |f: fn(&SummaryRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    SummaryRow {
        method: method.to_string(),
        amota: avg(|r| r.amota),
        amotp: avg(|r| r.amotp),
        samota: avg(|r| r.samota),
        mota: avg(|r| r.mota),
        mt: avg(|r| r.mt),
        ml: avg(|r| r.ml),
        ids: rows.iter().map(|r| r.ids).sum(),
        cost_mb: rows
            .iter()
            .map(|r| r.cost_mb)
            .sum::<Option<f64>>()
            .map(|c| c / n),
    }
}

/// Runs `variants` on every ablation seed; one row per variant, metrics
/// averaged over seeds and id switches summed.
pub fn ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let mut per_variant: Vec<Vec<SummaryRow>> = vec![Vec::new(); variants.len()];
    for &seed in &cfg.ablation.seeds {
        let data = seed_data(cfg, seed)?;
        for (rows, &v) in per_variant.iter_mut().zip(variants) {
            let report = run_variant(cfg, &data, v)?;
            let cost = variant_cost_mb(v, &data.eval.frames);
            rows.push(SummaryRow::new(v.name(), &report, Some(cost)));
        }
    }
    Ok(variants
        .iter()
        .zip(&per_variant)
        .map(|(v, rows)| mean_row(v.name(), rows))
        .collect())
}
