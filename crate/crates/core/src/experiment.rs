//! Scenario files, calibration of trained models, sweeps and CSV reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{
    calibrate, calibrate_adaptive_threshold, prediction_set, Calibration, CalibrationRecord,
    ConformalError,
};
use crate::fusion::{Combiner, FusionError, ModalityReport};
use crate::metrics::{Approach, CostModel};
use crate::perceiver::{
    load_checkpoint, train, Model, ModelError, PerceiverConfig, Registry, Sample, TrainSchedule,
};
use crate::protocol::{run_dataset, ChannelPlan, NoiseModel, ProtocolError, SimConfig, Simulation};
use crate::rng;
use crate::synth::{generate_task, Dataset, SynthError, SyntheticTaskSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown modality `{0}` in SNR map")]
    UnknownModality(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uplink SNRs in dB, keyed by modality name; `default_db` covers the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSetting {
    pub default_db: f64,
    #[serde(default)]
    pub modalities: BTreeMap<String, f64>,
}

impl Default for SnrSetting {
    fn default() -> Self {
        Self {
            default_db: f64::INFINITY,
            modalities: BTreeMap::new(),
        }
    }
}

impl SnrSetting {
    pub fn plan(&self, registry: &Registry) -> Result<ChannelPlan, ExperimentError> {
        let mut plan = ChannelPlan::uniform(self.default_db);
        for (name, &db) in &self.modalities {
            let id = registry
                .modalities
                .iter()
                .position(|m| &m.name == name)
                .ok_or_else(|| ExperimentError::UnknownModality(name.clone()))?;
            plan = plan.degrade_modality(id, db);
        }
        Ok(plan)
    }

    /// Compact form for CSV cells, e.g. `default=30;m1=10`.
    pub fn label(&self) -> String {
        let mut s = format!("default={}", fmt_db(self.default_db));
        for (name, db) in &self.modalities {
            s.push_str(&format!(";{name}={}", fmt_db(*db)));
        }
        s
    }
}

/// Accepts a bare number (`30`, `inf`) or the `label` form
/// `default=30;m1=10`; an omitted default is a perfect channel.
impl std::str::FromStr for SnrSetting {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let db = |v: &str| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|d| !d.is_nan())
                .ok_or_else(|| ExperimentError::Config(format!("bad SNR value `{v}`")))
        };
        let mut out = SnrSetting::default();
        if !s.contains('=') {
            out.default_db = db(s)?;
            return Ok(out);
        }
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part.split_once('=').ok_or_else(|| {
                ExperimentError::Config(format!("expected name=dB, got `{part}`"))
            })?;
            match name.trim() {
                "default" => out.default_db = db(value)?,
                m => {
                    out.modalities.insert(m.to_string(), db(value)?);
                }
            }
        }
        Ok(out)
    }
}

fn fmt_db(db: f64) -> String {
    if db == f64::INFINITY {
        "inf".into()
    } else {
        format!("{db}")
    }
}

fn default_approaches() -> Vec<Approach> {
    Approach::ALL.to_vec()
}

fn default_rates() -> Vec<f64> {
    vec![1e6]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_alpha() -> f64 {
    0.1
}

fn default_alpha2() -> f64 {
    0.3
}

fn default_true() -> bool {
    true
}

fn default_name() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub task: SyntheticTaskSpec,
    #[serde(default)]
    pub model: PerceiverConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default = "default_approaches")]
    pub approaches: Vec<Approach>,
    #[serde(default)]
    pub combiner: Combiner,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_alpha2")]
    pub alpha2: f64,
    #[serde(default = "default_rates")]
    pub rates_bps: Vec<f64>,
    #[serde(default)]
    pub snr: SnrSetting,
    #[serde(default = "default_true")]
    pub reliable_control: bool,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub costs: CostModel,
    /// Pre-trained model; when absent every seed trains from scratch.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn new(task: SyntheticTaskSpec) -> Self {
        Self {
            name: default_name(),
            task,
            model: PerceiverConfig::desk(),
            schedule: TrainSchedule::default(),
            approaches: default_approaches(),
            combiner: Combiner::default(),
            alpha: default_alpha(),
            alpha2: default_alpha2(),
            rates_bps: default_rates(),
            snr: SnrSetting::default(),
            reliable_control: true,
            noise: NoiseModel::Symbol,
            seeds: default_seeds(),
            costs: CostModel::default(),
            checkpoint: None,
            calibration: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.into()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha2) {
            return bad("alpha2 must lie in [0, 1]");
        }
        if self.rates_bps.is_empty() || self.rates_bps.iter().any(|r| r.is_nan() || *r <= 0.0) {
            return bad("rates_bps must be a non-empty list of positive rates");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.approaches.is_empty() {
            return bad("approaches must not be empty");
        }
        if let Combiner::Sssc { beta } = self.combiner {
            if beta.is_nan() || beta < 1.0 {
                return bad("beta must be at least 1");
            }
        }
        Ok(())
    }

    pub fn sim_config(
        &self,
        registry: &Registry,
        rate_bps: f64,
        seed: u64,
    ) -> Result<SimConfig, ExperimentError> {
        Ok(SimConfig {
            rate_bps,
            channel: self.snr.plan(registry)?,
            reliable_control: self.reliable_control,
            noise: self.noise,
            combiner: self.combiner,
            costs: self.costs,
            seed,
        })
    }
}

/// Softmax of every single-modality classifier on `samples`, per modality.
type ModalitySoftmax = Vec<(crate::perceiver::ModalityId, Vec<f64>)>;

fn unimodal_softmax(model: &Model, samples: &[Sample]) -> Result<Vec<ModalitySoftmax>, ModelError> {
    samples
        .par_iter()
        .map(|s| {
            s.inputs
                .iter()
                .map(|m| Ok((m.modality, model.unimodal(m)?.softmax)))
                .collect::<Result<Vec<_>, ModelError>>()
        })
        .collect()
}

/// Conformal quantiles for every (task, modality) seen in `cal`, and routing
/// thresholds for each combiner. The two halves use the same split.
pub fn calibrate_model(
    model: &Model,
    cal: &[Sample],
    alpha: f64,
    alpha2: f64,
    combiners: &[Combiner],
) -> Result<Calibration, ExperimentError> {
    let outputs = unimodal_softmax(model, cal)?;
    let mut records: BTreeMap<(usize, usize), Vec<CalibrationRecord>> = BTreeMap::new();
    for (s, outs) in cal.iter().zip(&outputs) {
        for (m, softmax) in outs {
            records
                .entry((s.task, *m))
                .or_default()
                .push(CalibrationRecord {
                    softmax: softmax.clone(),
                    label: s.label,
                });
        }
    }
    let mut calibration = Calibration::default();
    for ((task, modality), recs) in &records {
        calibration
            .quantiles
            .push(calibrate(recs, alpha, *task, *modality)?);
    }
    let tasks: Vec<usize> = records
        .keys()
        .map(|(t, _)| *t)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    for task in tasks {
        for &combiner in combiners {
            let mut samples = Vec::new();
            for (s, outs) in cal.iter().zip(&outputs).filter(|(s, _)| s.task == task) {
                let reports: Vec<ModalityReport> = outs
                    .iter()
                    .map(|(m, softmax)| {
                        let q = calibration.quantile(task, *m).expect("calibrated above");
                        ModalityReport {
                            modality: *m,
                            softmax: softmax.clone(),
                            set: prediction_set(softmax, q.q_hat),
                        }
                    })
                    .collect();
                let fused = combiner.fuse(&reports)?;
                samples.push((fused.confidence(), fused.prediction() == s.label));
            }
            calibration.thresholds.push(calibrate_adaptive_threshold(
                &samples, alpha2, task, combiner,
            )?);
        }
    }
    Ok(calibration)
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub approach: Approach,
    pub combiner: String,
    pub beta: Option<f64>,
    pub alpha: f64,
    pub alpha2: f64,
    pub rate_bps: f64,
    pub snr_map: String,
    pub accuracy: f64,
    pub latency_s: f64,
    pub energy_j: f64,
    pub p_h: Option<f64>,
    pub seed: u64,
}

fn row_order(a: &ReportRow, b: &ReportRow) -> std::cmp::Ordering {
    (&a.task, a.approach, &a.combiner, &a.snr_map, a.seed)
        .cmp(&(&b.task, b.approach, &b.combiner, &b.snr_map, b.seed))
        .then(a.rate_bps.total_cmp(&b.rate_bps))
        .then(a.alpha.total_cmp(&b.alpha))
        .then(a.alpha2.total_cmp(&b.alpha2))
}

/// A trained model with its data and calibration, ready to simulate.
pub struct Prepared {
    pub dataset: Dataset,
    pub model: Model,
    pub calibration: Calibration,
}

/// Generates the task for `seed` and trains and calibrates a model on it,
/// or loads them from the configured artifacts.
pub fn prepare(cfg: &ScenarioConfig, seed: u64) -> Result<Prepared, ExperimentError> {
    let spec = SyntheticTaskSpec {
        seed,
        ..cfg.task.clone()
    };
    let dataset = generate_task(&spec)?;
    let model = match &cfg.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let mut model = Model::new(
                cfg.model,
                dataset.registry.clone(),
                rng::derive(seed, &[0x4d4f]),
            )?;
            let schedule = TrainSchedule {
                seed: rng::derive(seed, &[0x5452]),
                ..cfg.schedule
            };
            train(
                &mut model,
                &dataset.train,
                &[&dataset.cal, &dataset.test],
                &schedule,
            )?;
            model
        }
    };
    let calibration = match &cfg.calibration {
        Some(path) => Calibration::load(path)?,
        None => calibrate_model(&model, &dataset.cal, cfg.alpha, cfg.alpha2, &[cfg.combiner])?,
    };
    Ok(Prepared {
        dataset,
        model,
        calibration,
    })
}

/// Rows for every approach and rate on the prepared test split.
pub fn simulate(
    cfg: &ScenarioConfig,
    prepared: &Prepared,
    seed: u64,
) -> Result<Vec<ReportRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &rate in &cfg.rates_bps {
        let sim_cfg = cfg.sim_config(&prepared.model.registry, rate, seed)?;
        let sim = Simulation {
            model: &prepared.model,
            calibration: Some(&prepared.calibration),
            config: &sim_cfg,
        };
        for &approach in &cfg.approaches {
            let agg = run_dataset(approach, &prepared.dataset.test, &sim)?;
            rows.push(ReportRow {
                task: cfg.name.clone(),
                approach,
                combiner: cfg.combiner.name().into(),
                beta: cfg.combiner.beta(),
                alpha: cfg.alpha,
                alpha2: cfg.alpha2,
                rate_bps: rate,
                snr_map: cfg.snr.label(),
                accuracy: agg.accuracy,
                latency_s: agg.mean_latency_s,
                energy_j: agg.mean_energy_j,
                p_h: agg.p_h,
                seed,
            });
        }
    }
    Ok(rows)
}

/// Prepares and simulates every seed in parallel; rows come back sorted.
pub fn run_experiment(cfg: &ScenarioConfig) -> Result<Vec<ReportRow>, ExperimentError> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let prepared = prepare(cfg, seed)?;
            simulate(cfg, &prepared, seed)
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let mut rows: Vec<ReportRow> = per_seed.into_iter().flatten().collect();
    rows.sort_by(row_order);
    Ok(rows)
}

pub fn write_rows<W: std::io::Write>(rows: &[ReportRow], w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(REPORT_HEADER)?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows<R: std::io::Read>(r: R) -> Result<Vec<ReportRow>, ExperimentError> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<Result<Vec<ReportRow>, _>>()?)
}

pub const REPORT_HEADER: [&str; 13] = [
    "task",
    "approach",
    "combiner",
    "beta",
    "alpha",
    "alpha2",
    "rate_bps",
    "snr_map",
    "accuracy",
    "latency_s",
    "energy_j",
    "p_h",
    "seed",
];

/// Mean and sample standard deviation of the numeric columns over seeds,
/// one row per scenario point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub approach: Approach,
    pub combiner: String,
    pub beta: Option<f64>,
    pub alpha: f64,
    pub alpha2: f64,
    pub rate_bps: f64,
    pub snr_map: String,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub latency_s_mean: f64,
    pub latency_s_std: f64,
    pub energy_j_mean: f64,
    pub energy_j_std: f64,
    pub p_h_mean: Option<f64>,
    pub p_h_std: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(row_order);
    let same_point = |a: &ReportRow, b: &ReportRow| {
        a.task == b.task
            && a.approach == b.approach
            && a.combiner == b.combiner
            && a.beta == b.beta
            && a.alpha == b.alpha
            && a.alpha2 == b.alpha2
            && a.rate_bps == b.rate_bps
            && a.snr_map == b.snr_map
    };
    let mut groups: Vec<Vec<&ReportRow>> = Vec::new();
    for r in &sorted {
        match groups.iter_mut().find(|g| same_point(g[0], r)) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|g| {
            let col = |f: &dyn Fn(&ReportRow) -> f64| {
                mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (accuracy_mean, accuracy_std) = col(&|r| r.accuracy);
            let (latency_s_mean, latency_s_std) = col(&|r| r.latency_s);
            let (energy_j_mean, energy_j_std) = col(&|r| r.energy_j);
            let p: Vec<f64> = g.iter().filter_map(|r| r.p_h).collect();
            let (p_h_mean, p_h_std) = if p.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&p);
                (Some(m), Some(s))
            };
            let first = g[0];
            SummaryRow {
                task: first.task.clone(),
                approach: first.approach,
                combiner: first.combiner.clone(),
                beta: first.beta,
                alpha: first.alpha,
                alpha2: first.alpha2,
                rate_bps: first.rate_bps,
                snr_map: first.snr_map.clone(),
                seeds: g.len(),
                accuracy_mean,
                accuracy_std,
                latency_s_mean,
                latency_s_std,
                energy_j_mean,
                energy_j_std,
                p_h_mean,
                p_h_std,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (&a.task, a.approach, &a.snr_map)
            .cmp(&(&b.task, b.approach, &b.snr_map))
            .then(a.rate_bps.total_cmp(&b.rate_bps))
    });
    out
}

pub fn write_summary<W: std::io::Write>(rows: &[SummaryRow], w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
