//! Hourly PRB series: synthetic generation, CSV I/O, splitting,
//! standardization and sliding windows.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Pareto, Poisson, StudentT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}` in header")]
    MissingColumn(&'static str),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("row {row}: duplicate timestamp {timestamp} for beam {beam}")]
    Duplicate {
        row: usize,
        beam: String,
        timestamp: NaiveDateTime,
    },
    #[error("row {row}: timestamp {timestamp} for beam {beam} goes backwards")]
    NonMonotone {
        row: usize,
        beam: String,
        timestamp: NaiveDateTime,
    },
    #[error("row {row}: gap before {timestamp} for beam {beam}")]
    Gap {
        row: usize,
        beam: String,
        timestamp: NaiveDateTime,
    },
    #[error("row {row}: negative prb {value}")]
    Negative { row: usize, value: f64 },
    #[error("series of length {len} is too short for context {context} + horizon {horizon}")]
    TooShort {
        len: usize,
        context: usize,
        horizon: usize,
    },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One beam's hourly demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub beam_id: String,
    pub start: NaiveDateTime,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + TimeDelta::hours(i as i64)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        (0..self.len()).map(|i| self.timestamp(i))
    }

    /// Hours `[from, to)` as a new series.
    pub fn slice(&self, from: usize, to: usize) -> TimeSeries {
        TimeSeries {
            beam_id: self.beam_id.clone(),
            start: self.timestamp(from),
            values: self.values[from..to].to_vec(),
        }
    }
}

pub fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_hours: usize,
    pub test_hours: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_hours: 360,
            test_hours: 192,
        }
    }
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train_hours + self.test_hours
    }
}

pub fn split(ts: &TimeSeries, spec: SplitSpec) -> Result<(TimeSeries, TimeSeries)> {
    if spec.train_hours == 0 || spec.test_hours == 0 {
        return Err(DataError::InvalidSpec("split hours must be positive".into()));
    }
    if spec.total() > ts.len() {
        return Err(DataError::InvalidSpec(format!(
            "split needs {} hours, series {} has {}",
            spec.total(),
            ts.beam_id,
            ts.len()
        )));
    }
    Ok((
        ts.slice(0, spec.train_hours),
        ts.slice(spec.train_hours, spec.total()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    StudentT,
}

/// Parameters of the synthetic traffic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub beam_id: String,
    pub start: NaiveDateTime,
    pub length: usize,
    pub base: f64,
    pub diurnal_amplitude: f64,
    /// Radians.
    pub diurnal_phase: f64,
    pub weekly_amplitude: f64,
    /// Expected burst arrivals per hour.
    pub burst_rate: f64,
    pub burst_shape: f64,
    pub burst_scale: f64,
    pub noise_family: NoiseFamily,
    pub noise_scale: f64,
    pub noise_dof: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            beam_id: "beam_0".into(),
            start: default_start(),
            length: 552,
            base: 60.0,
            diurnal_amplitude: 25.0,
            diurnal_phase: 0.0,
            weekly_amplitude: 5.0,
            burst_rate: 0.02,
            burst_shape: 2.5,
            burst_scale: 10.0,
            noise_family: NoiseFamily::Gaussian,
            noise_scale: 3.0,
            noise_dof: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.into()));
        if self.length == 0 {
            return bad("length must be positive");
        }
        let finite = [
            self.base,
            self.diurnal_amplitude,
            self.diurnal_phase,
            self.weekly_amplitude,
            self.noise_scale,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("parameters must be finite");
        }
        if self.diurnal_amplitude < 0.0 || self.weekly_amplitude < 0.0 || self.noise_scale < 0.0 {
            return bad("amplitudes and noise scale must be non-negative");
        }
        if !(self.burst_rate >= 0.0 && self.burst_rate.is_finite()) {
            return bad("burst rate must be non-negative");
        }
        if self.burst_rate > 0.0 && !(self.burst_shape > 0.0 && self.burst_scale > 0.0) {
            return bad("burst Pareto shape and scale must be positive");
        }
        if self.noise_family == NoiseFamily::StudentT && !(self.noise_dof > 0.0) {
            return bad("noise degrees of freedom must be positive");
        }
        Ok(())
    }

    /// Noise-free level at hour `t`, before bursts and clipping.
    pub fn seasonal(&self, t: usize) -> f64 {
        use std::f64::consts::TAU;
        let t = t as f64;
        self.base
            + self.diurnal_amplitude * (TAU * t / 24.0 + self.diurnal_phase).sin()
            + self.weekly_amplitude * (TAU * t / 168.0).sin()
    }
}

/// A burst arrival: `magnitude` at `hour`, half of it an hour later, a
/// quarter two hours later.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurstEvent {
    pub hour: usize,
    pub magnitude: f64,
}

pub const BURST_DECAY: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSeries {
    pub series: TimeSeries,
    pub bursts: Vec<BurstEvent>,
    /// Per-hour noise draws (before clipping at zero).
    pub noise: Vec<f64>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<TimeSeries> {
    Ok(generate_detailed(spec)?.series)
}

/// Same as [`generate`], also returning the latent burst and noise draws.
pub fn generate_detailed(spec: &SyntheticSpec) -> Result<GeneratedSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.length;

    let mut bursts = Vec::new();
    let mut burst_level = vec![0.0; n];
    if spec.burst_rate > 0.0 {
        let arrivals = Poisson::new(spec.burst_rate).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        let magnitude =
            Pareto::new(spec.burst_scale, spec.burst_shape).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        for hour in 0..n {
            let k = arrivals.sample(&mut rng) as usize;
            for _ in 0..k {
                let m = magnitude.sample(&mut rng);
                bursts.push(BurstEvent { hour, magnitude: m });
                for (lag, f) in BURST_DECAY.iter().enumerate() {
                    if let Some(slot) = burst_level.get_mut(hour + lag) {
                        *slot += m * f;
                    }
                }
            }
        }
    }

    let noise: Vec<f64> = if spec.noise_scale == 0.0 {
        vec![0.0; n]
    } else {
        match spec.noise_family {
            NoiseFamily::Gaussian => {
                let d = Normal::new(0.0, spec.noise_scale).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            NoiseFamily::StudentT => {
                let d = StudentT::new(spec.noise_dof).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
                (0..n).map(|_| spec.noise_scale * d.sample(&mut rng)).collect()
            }
        }
    };

    let values = (0..n)
        .map(|t| (spec.seasonal(t) + burst_level[t] + noise[t]).max(0.0))
        .collect();
    Ok(GeneratedSeries {
        series: TimeSeries {
            beam_id: spec.beam_id.clone(),
            start: spec.start,
            values,
        },
        bursts,
        noise,
    })
}

/// Multi-beam generation: beam `i` is named `beam_{i}` and seeded with a
/// per-beam seed drawn from `seed`; the diurnal phase is spread uniformly
/// over the day when `jitter_phase` is set.
pub fn generate_beams(template: &SyntheticSpec, beams: usize, jitter_phase: bool) -> Result<Vec<TimeSeries>> {
    if beams == 0 {
        return Err(DataError::InvalidSpec("beam count must be positive".into()));
    }
    beam_specs(template, beams, jitter_phase).iter().map(generate).collect()
}

pub fn beam_specs(template: &SyntheticSpec, beams: usize, jitter_phase: bool) -> Vec<SyntheticSpec> {
    let mut seeder = ChaCha8Rng::seed_from_u64(template.seed);
    (0..beams)
        .map(|i| {
            let mut spec = template.clone();
            spec.beam_id = format!("beam_{i}");
            spec.seed = seeder.random();
            if jitter_phase {
                spec.diurnal_phase = template.diurnal_phase + std::f64::consts::TAU * i as f64 / beams as f64;
            }
            spec
        })
        .collect()
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    beam_id: String,
    timestamp: String,
    prb: f64,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s.trim_end_matches('Z'), TIMESTAMP_FORMAT))
        .ok()
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<TimeSeries>> {
    read_csv(std::fs::File::open(path)?)
}

/// Parses `beam_id,timestamp,prb` rows. Row numbers in errors count the
/// header as row 1.
pub fn read_csv(reader: impl Read) -> Result<Vec<TimeSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(DataError::MissingColumn(name))
    };
    let (ib, it, ip) = (col("beam_id")?, col("timestamp")?, col("prb")?);

    let mut beams: BTreeMap<String, (NaiveDateTime, Vec<f64>)> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let field = |j: usize| record.get(j).ok_or_else(|| DataError::Row {
            row,
            message: "too few fields".into(),
        });
        let beam = field(ib)?.to_string();
        let raw_ts = field(it)?;
        let timestamp = parse_timestamp(raw_ts).ok_or_else(|| DataError::Row {
            row,
            message: format!("unparseable timestamp `{raw_ts}`"),
        })?;
        let raw_prb = field(ip)?;
        let value: f64 = raw_prb.parse().map_err(|_| DataError::Row {
            row,
            message: format!("unparseable prb `{raw_prb}`"),
        })?;
        if !value.is_finite() {
            return Err(DataError::Row {
                row,
                message: format!("non-finite prb `{raw_prb}`"),
            });
        }
        if value < 0.0 {
            return Err(DataError::Negative { row, value });
        }
        match beams.get_mut(&beam) {
            None => {
                beams.insert(beam, (timestamp, vec![value]));
            }
            Some((start, values)) => {
                let last = *start + TimeDelta::hours(values.len() as i64 - 1);
                let next = last + TimeDelta::hours(1);
                if timestamp == last {
                    return Err(DataError::Duplicate { row, beam, timestamp });
                }
                if timestamp < last {
                    return Err(DataError::NonMonotone { row, beam, timestamp });
                }
                if timestamp != next {
                    return Err(DataError::Gap { row, beam, timestamp });
                }
                values.push(value);
            }
        }
    }
    Ok(beams
        .into_iter()
        .map(|(beam_id, (start, values))| TimeSeries { beam_id, start, values })
        .collect())
}

pub fn write_csv(series: &[TimeSeries], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for ts in series {
        for (i, &prb) in ts.values.iter().enumerate() {
            w.serialize(CsvRow {
                beam_id: ts.beam_id.clone(),
                timestamp: ts.timestamp(i).format(TIMESTAMP_FORMAT).to_string(),
                prb,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(series: &[TimeSeries], path: impl AsRef<Path>) -> Result<()> {
    write_csv(series, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Affine map to zero mean / unit variance using training statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Sample mean and population std (floored at [`STD_FLOOR`]).
pub fn fit_standardizer(train: &TimeSeries) -> Result<Standardizer> {
    let v = &train.values;
    if v.is_empty() {
        return Err(DataError::InvalidSpec("cannot standardize an empty series".into()));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(Standardizer {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    })
}

/// A context/target pair; `offset` is the series index of the first
/// context value.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub offset: usize,
    pub context: Vec<f64>,
    pub target: Vec<f64>,
}

impl Window {
    /// Series index of the first target value.
    pub fn target_start(&self) -> usize {
        self.offset + self.context.len()
    }
}

/// All stride-1 windows of `ts`.
pub fn make_windows(ts: &TimeSeries, context: usize, horizon: usize) -> Result<Vec<Window>> {
    windows_strided(&ts.values, context, horizon, 1)
}

pub fn windows_strided(values: &[f64], context: usize, horizon: usize, stride: usize) -> Result<Vec<Window>> {
    if context == 0 || horizon == 0 || stride == 0 {
        return Err(DataError::InvalidSpec("context, horizon and stride must be positive".into()));
    }
    if values.len() < context + horizon {
        return Err(DataError::TooShort {
            len: values.len(),
            context,
            horizon,
        });
    }
    Ok((0..=values.len() - context - horizon)
        .step_by(stride)
        .map(|offset| Window {
            offset,
            context: values[offset..offset + context].to_vec(),
            target: values[offset + context..offset + context + horizon].to_vec(),
        })
        .collect())
}

/// Windows whose targets lie entirely in `values[test_start..]`, contexts
/// drawn from the true history before each target.
pub fn rolling_test_windows(
    values: &[f64],
    test_start: usize,
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if test_start < context {
        return Err(DataError::InvalidSpec(format!(
            "test span starts at hour {test_start}, before a full context of {context}"
        )));
    }
    let all = windows_strided(&values[test_start - context..], context, horizon, stride)?;
    Ok(all
        .into_iter()
        .map(|mut w| {
            w.offset += test_start - context;
            w
        })
        .collect())
}
