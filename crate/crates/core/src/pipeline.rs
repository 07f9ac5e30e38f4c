//! End-to-end runs: configuration, data preparation, per-beam training,
//! evaluation and allocation, plus the on-disk layout the CLI uses.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/data.csv
//! <out>/models/<beam>/<variant>.pkan
//! <out>/logs/<beam>/<variant>.csv
//! <out>/metrics.{csv,json}            pooled over beams
//! <out>/metrics_by_beam.{csv,json}
//! <out>/allocation/<beam>/<variant>.csv
//! <out>/allocation_summary.{csv,json}
//! <out>/pareto.csv
//! <out>/plots/<beam>.{svg,csv}
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{
    self, pareto, static_budget, AllocationError, AllocationReport, AllocationTotals, ParetoPoint, RiskAxis, ThresholdPolicy,
};
use crate::data::{self, DataError, Standardizer, SplitSpec, SyntheticSpec, TimeSeries, Window};
use crate::likelihood::LikelihoodError;
use crate::metrics::{self, EvalRecord, Forecast, MetricsError, MetricsReport};
use crate::nets::{
    LikelihoodKind, ModelConfig, ModelFamily, ModelState, NetsError, Prediction, SplineConfig, DEFAULT_KAN_HIDDEN,
    DEFAULT_MLP_HIDDEN,
};
use crate::plot::BandSeries;
use crate::training::{self, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{context}: {source}")]
    Train {
        context: String,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// 1 usage/config, 2 data, 3 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Train {
                source: TrainError::Diverged { .. },
                ..
            } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A model family with its likelihood, written `p_kan:gaussian`,
/// `p_mlp:student_t`, `kan_pf`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub family: ModelFamily,
    pub likelihood: LikelihoodKind,
}

impl Variant {
    pub fn new(family: ModelFamily, likelihood: LikelihoodKind) -> Self {
        Self { family, likelihood }
    }

    /// File-name form, `:` replaced by `-`.
    pub fn file_stem(&self) -> String {
        self.to_string().replace(':', "-")
    }

    pub fn is_point(&self) -> bool {
        self.family.is_point()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.likelihood {
            LikelihoodKind::None => f.write_str(self.family.label()),
            l => write!(f, "{}:{}", self.family.label(), l.label()),
        }
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || PipelineError::Config(format!("unknown model variant `{s}`"));
        let (fam, lik) = match s.split_once(':') {
            Some((f, l)) => (f, Some(l)),
            None => (s, None),
        };
        let family = match fam.trim() {
            "p_kan" => ModelFamily::PKan,
            "p_mlp" => ModelFamily::PMlp,
            "kan_pf" => ModelFamily::KanPf,
            "mlp_pf" => ModelFamily::MlpPf,
            _ => return Err(bad()),
        };
        let likelihood = match (family.is_point(), lik.map(str::trim)) {
            (true, None | Some("none")) => LikelihoodKind::None,
            (false, Some("gaussian")) => LikelihoodKind::Gaussian,
            (false, Some("student_t")) => LikelihoodKind::StudentT,
            _ => return Err(bad()),
        };
        Ok(Self { family, likelihood })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn default_variants() -> Vec<Variant> {
    [
        "p_kan:gaussian",
        "p_kan:student_t",
        "p_mlp:gaussian",
        "p_mlp:student_t",
        "kan_pf",
        "mlp_pf",
    ]
    .iter()
    .map(|s| s.parse().expect("built-in variant"))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// CSV to load; when absent the synthetic generator is used.
    pub input: Option<PathBuf>,
    pub beams: usize,
    /// Spread diurnal phases evenly across generated beams.
    pub jitter_phase: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: None,
            beams: 6,
            jitter_phase: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub variants: Vec<Variant>,
    pub context: usize,
    pub horizon: usize,
    pub kan_hidden: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    pub spline: SplineConfig,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variants: default_variants(),
            context: 168,
            horizon: 24,
            kan_hidden: DEFAULT_KAN_HIDDEN.to_vec(),
            mlp_hidden: DEFAULT_MLP_HIDDEN.to_vec(),
            spline: SplineConfig::default(),
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            family: variant.family,
            likelihood: variant.likelihood,
            context: self.context,
            horizon: self.horizon,
            hidden_sizes: if variant.family.is_kan() {
                self.kan_hidden.clone()
            } else {
                self.mlp_hidden.clone()
            },
            spline: self.spline,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Forecasts rolled over the test span with true history as context.
    #[default]
    Rolling,
    /// Only windows lying entirely inside the test span.
    Windows,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub mode: EvalMode,
    pub stride: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Rolling,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Static,
    #[default]
    P99,
    Point,
}

impl FromStr for PolicyChoice {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(PolicyChoice::Static),
            "p99" | "dynamic" => Ok(PolicyChoice::P99),
            "point" => Ok(PolicyChoice::Point),
            _ => Err(PipelineError::Config(format!("unknown policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocateConfig {
    /// Policy for probabilistic models; point models always use their raw
    /// forecast and a static baseline is always reported.
    pub policy: PolicyChoice,
    pub quantile: f64,
    pub risk_axis: RiskAxis,
    /// Central interval drawn in plots.
    pub interval: f64,
}

impl Default for AllocateConfig {
    fn default() -> Self {
        Self {
            policy: PolicyChoice::P99,
            quantile: ThresholdPolicy::DEFAULT_QUANTILE,
            risk_axis: RiskAxis::EventRate,
            interval: 0.9,
        }
    }
}

impl AllocateConfig {
    pub fn policy_for(&self, variant: Variant) -> Result<ThresholdPolicy> {
        if variant.is_point() {
            return Ok(ThresholdPolicy::point());
        }
        Ok(match self.policy {
            PolicyChoice::Static => ThresholdPolicy::static_max(),
            PolicyChoice::Point => ThresholdPolicy::point(),
            PolicyChoice::P99 => ThresholdPolicy::dynamic(self.quantile)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: OutputFormat::Csv,
        }
    }
}

/// Everything a run needs, loadable from one TOML document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub split: SplitSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub allocate: AllocateConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Applies one seed to the generator, the model init and the optimizer.
    pub fn set_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.variants.is_empty() {
            return Err(PipelineError::Config("no model variants".into()));
        }
        for v in &self.model.variants {
            self.model.model_config(*v).validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.evaluate.stride == 0 {
            return Err(PipelineError::Config("evaluate.stride must be positive".into()));
        }
        if !(self.allocate.quantile > 0.0 && self.allocate.quantile < 1.0) {
            return Err(PipelineError::Config("allocate.quantile must lie in (0, 1)".into()));
        }
        if !(self.allocate.interval > 0.0 && self.allocate.interval < 1.0) {
            return Err(PipelineError::Config("allocate.interval must lie in (0, 1)".into()));
        }
        if self.split.train_hours < self.model.context + self.model.horizon {
            return Err(PipelineError::Config(format!(
                "train_hours {} cannot hold one window of {} + {}",
                self.split.train_hours, self.model.context, self.model.horizon
            )));
        }
        Ok(())
    }
}

/// Generated beams for the configured synthetic section.
pub fn synthesize(cfg: &RunConfig) -> Result<Vec<TimeSeries>> {
    Ok(data::generate_beams(&cfg.synthetic, cfg.data.beams, cfg.data.jitter_phase)?)
}

pub fn load_series(cfg: &RunConfig) -> Result<Vec<TimeSeries>> {
    match &cfg.data.input {
        Some(path) => Ok(data::load_csv(path)?),
        None => synthesize(cfg),
    }
}

/// One beam split and summarised for training.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamData {
    pub series: TimeSeries,
    pub train: TimeSeries,
    pub test: TimeSeries,
    pub standardizer: Standardizer,
    pub budget: u64,
}

impl BeamData {
    pub fn new(series: TimeSeries, split: SplitSpec) -> Result<Self> {
        let (train, test) = data::split(&series, split)?;
        let standardizer = data::fit_standardizer(&train)?;
        let budget = static_budget(&train.values)?;
        Ok(Self {
            series,
            train,
            test,
            standardizer,
            budget,
        })
    }

    pub fn beam_id(&self) -> &str {
        &self.series.beam_id
    }

    /// Train followed by test values.
    pub fn history(&self) -> Vec<f64> {
        let mut v = self.train.values.clone();
        v.extend_from_slice(&self.test.values);
        v
    }

    pub fn train_windows(&self, context: usize, horizon: usize) -> Result<Vec<Window>> {
        Ok(data::make_windows(&self.train, context, horizon)?)
    }

    /// Windows whose targets cover the test span. Offsets index into
    /// [`Self::history`].
    pub fn test_windows(&self, mode: EvalMode, context: usize, horizon: usize, stride: usize) -> Result<Vec<Window>> {
        let start = self.train.len();
        Ok(match mode {
            EvalMode::Rolling => data::rolling_test_windows(&self.history(), start, context, horizon, stride)?,
            EvalMode::Windows => data::windows_strided(&self.test.values, context, horizon, stride)?
                .into_iter()
                .map(|mut w| {
                    w.offset += start;
                    w
                })
                .collect(),
        })
    }
}

pub fn prepare(series: Vec<TimeSeries>, split: SplitSpec) -> Result<Vec<BeamData>> {
    series.into_iter().map(|s| BeamData::new(s, split)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub beam_id: String,
    pub variant: Variant,
    pub model: ModelState,
    pub log: Option<TrainLog>,
}

pub fn train_one(cfg: &RunConfig, beam: &BeamData, variant: Variant) -> Result<TrainedModel> {
    let mc = cfg.model.model_config(variant);
    let fresh = ModelState::new(mc.clone(), beam.standardizer)?;
    let windows = beam.train_windows(mc.context, mc.horizon)?;
    let (model, log) = training::train(&fresh, &windows, &cfg.train).map_err(|source| PipelineError::Train {
        context: format!("{} / {}", beam.beam_id(), variant),
        source,
    })?;
    Ok(TrainedModel {
        beam_id: beam.beam_id().to_string(),
        variant,
        model,
        log: Some(log),
    })
}

/// Every (beam, variant) pair, trained in parallel; results come back in
/// beam order, then variant order.
pub fn train_all(cfg: &RunConfig, beams: &[BeamData]) -> Result<Vec<TrainedModel>> {
    let jobs: Vec<(&BeamData, Variant)> = beams
        .iter()
        .flat_map(|b| cfg.model.variants.iter().map(move |v| (b, *v)))
        .collect();
    jobs.par_iter().map(|(b, v)| train_one(cfg, b, *v)).collect()
}

fn model_path(dir: &Path, beam: &str, variant: Variant) -> PathBuf {
    dir.join("models").join(beam).join(format!("{}.pkan", variant.file_stem()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(io_err(p))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn save_models(dir: &Path, models: &[TrainedModel]) -> Result<()> {
    for m in models {
        write_file(&model_path(dir, &m.beam_id, m.variant), &m.model.to_bytes())?;
        if let Some(log) = &m.log {
            let mut buf = Vec::new();
            log.write_csv(&mut buf).expect("write to Vec");
            let path = dir.join("logs").join(&m.beam_id).join(format!("{}.csv", m.variant.file_stem()));
            write_file(&path, &buf)?;
        }
    }
    Ok(())
}

pub fn load_models(dir: &Path, cfg: &RunConfig, beams: &[BeamData]) -> Result<Vec<TrainedModel>> {
    let mut out = Vec::new();
    for b in beams {
        for &variant in &cfg.model.variants {
            let path = model_path(dir, b.beam_id(), variant);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            out.push(TrainedModel {
                beam_id: b.beam_id().to_string(),
                variant,
                model: ModelState::from_bytes(&bytes)?,
                log: None,
            });
        }
    }
    Ok(out)
}

/// Per-step forecasts for each window, flattened in window order.
pub fn forecast_windows(model: &ModelState, windows: &[Window]) -> Result<Vec<Vec<Forecast>>> {
    let contexts: Vec<&[f64]> = windows.iter().map(|w| w.context.as_slice()).collect();
    let preds = model.predict_batch(&contexts)?;
    preds
        .into_iter()
        .map(|p| match p {
            Prediction::Point(v) => Ok(v.into_iter().map(Forecast::Point).collect()),
            Prediction::Distribution(d) => (0..d.horizon())
                .map(|i| Ok(Forecast::Distribution(d.step(i)?)))
                .collect::<Result<Vec<_>>>(),
        })
        .collect()
}

pub fn eval_records(cfg: &RunConfig, beam: &BeamData, model: &ModelState) -> Result<Vec<EvalRecord>> {
    let (c, h) = (model.config.context, model.config.horizon);
    let windows = beam.test_windows(cfg.evaluate.mode, c, h, cfg.evaluate.stride)?;
    let forecasts = forecast_windows(model, &windows)?;
    let mut records = Vec::with_capacity(windows.len() * h);
    for (w, fs) in windows.iter().zip(forecasts) {
        for (tau, (f, &y)) in fs.into_iter().zip(&w.target).enumerate() {
            records.push(EvalRecord {
                beam_id: beam.beam_id().to_string(),
                timestamp: beam.series.timestamp(w.target_start() + tau),
                truth: y,
                forecast: f,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beam: Option<String>,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Per-beam rows (beam order, then variant order) and pooled rows
/// (variant order).
pub fn evaluate_all(cfg: &RunConfig, beams: &[BeamData], models: &[TrainedModel]) -> Result<(Vec<MetricsRow>, Vec<MetricsRow>)> {
    let per: Vec<(String, Variant, Vec<EvalRecord>)> = models
        .par_iter()
        .map(|m| {
            let beam = find_beam(beams, &m.beam_id)?;
            Ok((m.beam_id.clone(), m.variant, eval_records(cfg, beam, &m.model)?))
        })
        .collect::<Result<_>>()?;
    let by_beam = per
        .par_iter()
        .map(|(beam, v, recs)| {
            Ok(MetricsRow {
                model: v.to_string(),
                beam: Some(beam.clone()),
                report: metrics::evaluate(recs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = cfg
        .model
        .variants
        .par_iter()
        .map(|v| {
            let recs: Vec<EvalRecord> = per
                .iter()
                .filter(|(_, pv, _)| pv == v)
                .flat_map(|(_, _, r)| r.iter().cloned())
                .collect();
            Ok(MetricsRow {
                model: v.to_string(),
                beam: None,
                report: metrics::evaluate(&recs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((by_beam, pooled))
}

fn find_beam<'a>(beams: &'a [BeamData], id: &str) -> Result<&'a BeamData> {
    beams
        .iter()
        .find(|b| b.beam_id() == id)
        .ok_or_else(|| PipelineError::Config(format!("no data for beam {id}")))
}

/// Forecasts and truths covering the test span with non-overlapping
/// `h`-step windows.
pub fn allocation_forecasts(beam: &BeamData, model: &ModelState) -> Result<(Vec<Forecast>, Vec<f64>)> {
    let (c, h) = (model.config.context, model.config.horizon);
    let windows = beam.test_windows(EvalMode::Rolling, c, h, h)?;
    let forecasts = forecast_windows(model, &windows)?;
    let truths = windows.iter().flat_map(|w| w.target.iter().copied()).collect();
    Ok((forecasts.into_iter().flatten().collect(), truths))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub beam: Option<String>,
    pub model: String,
    pub policy: String,
    #[serde(flatten)]
    pub summary: allocation::AllocationSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationOutputs {
    /// `(beam, label, report)`; label is the variant or `static`.
    pub reports: Vec<(String, String, AllocationReport)>,
    pub rows: Vec<AllocationRow>,
    pub pareto: Vec<ParetoPoint>,
    pub plots: Vec<(String, BandSeries)>,
}

impl AllocationOutputs {
    /// Pooled totals for `label` across beams.
    pub fn pooled(&self, label: &str) -> Option<AllocationTotals> {
        self.rows
            .iter()
            .find(|r| r.beam.is_none() && r.model == label)
            .map(|r| r.summary.totals)
    }

    pub fn beam_totals(&self, beam: &str, label: &str) -> Option<AllocationTotals> {
        self.reports
            .iter()
            .find(|(b, l, _)| b == beam && l == label)
            .map(|(_, _, r)| r.totals)
    }
}

pub const STATIC_LABEL: &str = "static";

pub fn allocate_all(cfg: &RunConfig, beams: &[BeamData], models: &[TrainedModel]) -> Result<AllocationOutputs> {
    struct Job<'a> {
        beam: &'a BeamData,
        label: String,
        policy: ThresholdPolicy,
        model: Option<&'a TrainedModel>,
    }
    let mut jobs = Vec::new();
    for b in beams {
        jobs.push(Job {
            beam: b,
            label: STATIC_LABEL.into(),
            policy: ThresholdPolicy::static_max(),
            model: None,
        });
        for m in models.iter().filter(|m| m.beam_id == b.beam_id()) {
            jobs.push(Job {
                beam: b,
                label: m.variant.to_string(),
                policy: cfg.allocate.policy_for(m.variant)?,
                model: Some(m),
            });
        }
    }

    let results: Vec<(String, String, AllocationReport, Vec<Forecast>)> = jobs
        .par_iter()
        .map(|job| {
            let (forecasts, truths) = match job.model {
                Some(m) => allocation_forecasts(job.beam, &m.model)?,
                None => {
                    let h = cfg.model.horizon;
                    let windows = job.beam.test_windows(EvalMode::Rolling, cfg.model.context, h, h)?;
                    let truths: Vec<f64> = windows.iter().flat_map(|w| w.target.iter().copied()).collect();
                    (vec![Forecast::Point(f64::NAN); truths.len()], truths)
                }
            };
            let report = allocation::allocate(&job.policy, &forecasts, &truths, job.beam.budget)?;
            Ok((job.beam.beam_id().to_string(), job.label.clone(), report, forecasts))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (beam, label, report, _) in &results {
        rows.push(AllocationRow {
            beam: Some(beam.clone()),
            model: label.clone(),
            policy: report.policy.label(),
            summary: report.totals.summary(),
        });
    }
    let mut labels: Vec<(String, String)> = vec![(STATIC_LABEL.into(), ThresholdPolicy::static_max().label())];
    for v in &cfg.model.variants {
        labels.push((v.to_string(), cfg.allocate.policy_for(*v)?.label()));
    }
    let mut points = Vec::new();
    for (label, policy) in &labels {
        let totals = AllocationTotals::pooled(results.iter().filter(|r| &r.1 == label).map(|r| &r.2.totals));
        rows.push(AllocationRow {
            beam: None,
            model: label.clone(),
            policy: policy.clone(),
            summary: totals.summary(),
        });
        points.push(ParetoPoint::new(label.clone(), &totals));
    }

    let plot_variant = cfg.model.variants.iter().find(|v| !v.is_point()).map(|v| v.to_string());
    let mut plots = Vec::new();
    if let Some(pv) = plot_variant {
        let (lo, hi) = (0.5 * (1.0 - cfg.allocate.interval), 0.5 * (1.0 + cfg.allocate.interval));
        for (beam, label, report, forecasts) in results.iter().filter(|r| r.1 == pv) {
            let q = |p: f64| -> Result<Vec<f64>> {
                forecasts
                    .iter()
                    .map(|f| match f.distribution() {
                        Some(d) => Ok(d.quantile(p)?),
                        None => Ok(f.center()),
                    })
                    .collect()
            };
            plots.push((
                beam.clone(),
                BandSeries {
                    title: format!("{beam} {label} ({})", report.policy.label()),
                    truth: report.steps.iter().map(|s| s.demand as f64).collect(),
                    median: forecasts.iter().map(Forecast::center).collect(),
                    lower: q(lo)?,
                    upper: q(hi)?,
                    threshold: report.allocations().map(|a| a as f64).collect(),
                    static_max: report.budget as f64,
                    interval: cfg.allocate.interval,
                },
            ));
        }
    }

    Ok(AllocationOutputs {
        reports: results.into_iter().map(|(b, l, r, _)| (b, l, r)).collect(),
        rows,
        pareto: pareto(points, cfg.allocate.risk_axis),
        plots,
    })
}

fn metrics_csv(rows: &[MetricsRow], with_beam: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = Vec::new();
    if with_beam {
        header.push("beam");
    }
    header.extend(MetricsReport::CSV_HEADER);
    w.write_record(&header).map_err(DataError::from)?;
    for r in rows {
        let mut rec = Vec::new();
        if with_beam {
            rec.push(r.beam.clone().unwrap_or_default());
        }
        rec.extend(r.report.csv_record(&r.model));
        w.write_record(&rec).map_err(DataError::from)?;
    }
    w.into_inner().map_err(|e| PipelineError::Config(e.to_string()))
}

pub fn write_metrics(dir: &Path, format: OutputFormat, by_beam: &[MetricsRow], pooled: &[MetricsRow]) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            write_file(&dir.join("metrics.csv"), &metrics_csv(pooled, false)?)?;
            write_file(&dir.join("metrics_by_beam.csv"), &metrics_csv(by_beam, true)?)?;
        }
        OutputFormat::Json => {
            write_file(&dir.join("metrics.json"), serde_json::to_string_pretty(pooled)?.as_bytes())?;
            write_file(&dir.join("metrics_by_beam.json"), serde_json::to_string_pretty(by_beam)?.as_bytes())?;
        }
    }
    Ok(())
}

const ALLOCATION_HEADER: [&str; 18] = [
    "beam",
    "model",
    "policy",
    "steps",
    "budget_mass",
    "demand",
    "saved",
    "overprovisioned",
    "served",
    "underprovisioned",
    "underprov_events",
    "savings_frac",
    "overprov_frac",
    "served_frac",
    "underprov_frac",
    "underprov_event_rate",
    "savings_over_demand",
    "identity_ok",
];

pub fn write_allocation(dir: &Path, format: OutputFormat, out: &AllocationOutputs) -> Result<()> {
    for (beam, label, report) in &out.reports {
        let mut buf = Vec::new();
        report.write_steps_csv(&mut buf).expect("write to Vec");
        let stem = label.replace(':', "-");
        write_file(&dir.join("allocation").join(beam).join(format!("{stem}.csv")), &buf)?;
    }
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(ALLOCATION_HEADER).map_err(DataError::from)?;
            for r in &out.rows {
                let t = &r.summary.totals;
                let s = &r.summary;
                w.write_record([
                    r.beam.clone().unwrap_or_else(|| "all".into()),
                    r.model.clone(),
                    r.policy.clone(),
                    t.steps.to_string(),
                    t.budget_mass.to_string(),
                    t.demand.to_string(),
                    t.saved.to_string(),
                    t.overprovisioned.to_string(),
                    t.served.to_string(),
                    t.underprovisioned.to_string(),
                    t.underprov_events.to_string(),
                    s.savings_frac.to_string(),
                    s.overprov_frac.to_string(),
                    s.served_frac.to_string(),
                    s.underprov_frac.to_string(),
                    s.underprov_event_rate.to_string(),
                    s.savings_over_demand.to_string(),
                    t.identity_holds().to_string(),
                ])
                .map_err(DataError::from)?;
            }
            let bytes = w.into_inner().map_err(|e| PipelineError::Config(e.to_string()))?;
            write_file(&dir.join("allocation_summary.csv"), &bytes)?;
        }
        OutputFormat::Json => {
            write_file(
                &dir.join("allocation_summary.json"),
                serde_json::to_string_pretty(&out.rows)?.as_bytes(),
            )?;
        }
    }
    let mut buf = Vec::new();
    allocation::write_pareto_csv(&out.pareto, &mut buf).expect("write to Vec");
    write_file(&dir.join("pareto.csv"), &buf)?;
    for (beam, band) in &out.plots {
        write_file(&dir.join("plots").join(format!("{beam}.svg")), band.to_svg().as_bytes())?;
        let mut buf = Vec::new();
        band.write_csv(&mut buf).expect("write to Vec");
        write_file(&dir.join("plots").join(format!("{beam}.csv")), &buf)?;
    }
    Ok(())
}

pub fn write_dataset(dir: &Path, series: &[TimeSeries]) -> Result<PathBuf> {
    let path = dir.join("data.csv");
    create_parent(&path)?;
    data::save_csv(series, &path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub model: String,
    pub params: usize,
}

pub fn count_params(cfg: &RunConfig) -> Vec<ParamCountRow> {
    cfg.model
        .variants
        .iter()
        .map(|v| ParamCountRow {
            model: v.to_string(),
            params: crate::nets::count_parameters(&cfg.model.model_config(*v)),
        })
        .collect()
}
