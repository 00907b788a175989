//! Exogenous per-BS inputs: harvested energy, traffic load and the energy
//! drained to serve that load.
//!
//! Synthetic generators stand in for recorded traces. Every generator takes an
//! explicit seed and owns its RNG, so calls are reproducible and thread-safe.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid trace parameter: {0}")]
    InvalidParameter(String),
    #[error("value {value} at index {index} is not a finite non-negative number")]
    InvalidValue { index: usize, value: f64 },
    #[error("load value {value} at index {index} is outside [0, 1]")]
    LoadOutOfRange { index: usize, value: f64 },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("negative value {value} in row {row}")]
    NegativeValue { row: usize, value: f64 },
    #[error("series is empty")]
    Empty,
    #[error("series is identically zero, cannot normalize")]
    AllZero,
}

/// A uniformly slotted, non-negative scalar series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub start_slot: usize,
    /// Slot duration in hours.
    pub step: f64,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(start_slot: usize, step: f64, values: Vec<f64>) -> Result<Self, TraceError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(TraceError::InvalidParameter(format!("slot step {step} h")));
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(TraceError::InvalidValue { index, value });
        }
        Ok(Self {
            start_slot,
            step,
            values,
        })
    }

    /// Hourly series starting at slot 0.
    pub fn hourly(values: Vec<f64>) -> Result<Self, TraceError> {
        Self::new(0, 1.0, values)
    }

    /// Like [`TimeSeries::new`] but additionally requires every value in `[0, 1]`.
    pub fn load(start_slot: usize, step: f64, values: Vec<f64>) -> Result<Self, TraceError> {
        let s = Self::new(start_slot, step, values)?;
        s.check_load()?;
        Ok(s)
    }

    pub fn check_load(&self) -> Result<(), TraceError> {
        match self.values.iter().enumerate().find(|(_, v)| **v > 1.0) {
            Some((index, &value)) => Err(TraceError::LoadOutOfRange { index, value }),
            None => Ok(()),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Daily harvest shape: a raised cosine between sunrise and sunset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolarProfile {
    /// Energy harvested in the noon slot of a clear day (J).
    pub peak_joules: f64,
    /// Relative spread of the per-day factor and the per-hour noise.
    pub noise_scale: f64,
    /// Hour of day at which harvesting starts.
    pub sunrise: f64,
    /// Hour of day at which harvesting stops.
    pub sunset: f64,
}

impl Default for SolarProfile {
    fn default() -> Self {
        Self {
            peak_joules: 100e3,
            noise_scale: 0.2,
            sunrise: 6.0,
            sunset: 18.0,
        }
    }
}

impl SolarProfile {
    /// Clear-sky value for an hour of day.
    pub fn bell(&self, hour: f64) -> f64 {
        if hour <= self.sunrise || hour >= self.sunset {
            return 0.0;
        }
        let phase = (hour - self.sunrise) / (self.sunset - self.sunrise);
        self.peak_joules * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * phase).cos())
    }

    /// Hourly trace over `days` days.
    ///
    /// Each day is scaled by `1 - noise·|z|` (cloud cover never brightens a
    /// day), and each daylight hour gets multiplicative noise `1 + noise·z/2`.
    pub fn generate(&self, days: usize, seed: u64) -> Result<TimeSeries, TraceError> {
        if days == 0 {
            return Err(TraceError::InvalidParameter("days must be at least 1".into()));
        }
        if !(self.peak_joules > 0.0) {
            return Err(TraceError::InvalidParameter(format!(
                "peak {} J must be positive",
                self.peak_joules
            )));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(TraceError::InvalidParameter(format!(
                "noise scale {} must be non-negative",
                self.noise_scale
            )));
        }
        if !(0.0 <= self.sunrise && self.sunrise < self.sunset && self.sunset <= 24.0) {
            return Err(TraceError::InvalidParameter(format!(
                "daylight window [{}, {}] h",
                self.sunrise, self.sunset
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(days * 24);
        for _ in 0..days {
            let z: f64 = rng.sample(StandardNormal);
            let day_factor = (1.0 - self.noise_scale * z.abs()).max(0.0);
            for hour in 0..24 {
                let z: f64 = rng.sample(StandardNormal);
                let clear = self.bell(hour as f64);
                let noisy = clear * day_factor * (1.0 + 0.5 * self.noise_scale * z).max(0.0);
                values.push(noisy);
            }
        }
        TimeSeries::hourly(values)
    }
}

pub fn gen_solar_trace(
    days: usize,
    peak_joules: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<TimeSeries, TraceError> {
    SolarProfile {
        peak_joules,
        noise_scale,
        ..SolarProfile::default()
    }
    .generate(days, seed)
}

/// Day-periodic signal in `[0, 1]` with a drifting amplitude.
///
/// Used as a stand-in for a normalized harvest or load trace when checking
/// forecasting quality. The amplitude is `1 + a(t)` where `a` is an hourly
/// AR(1) process with lag-one correlation 0.97 and stationary standard
/// deviation `noise`, so consecutive days resemble each other without
/// repeating exactly.
pub fn gen_quasi_periodic_trace(days: usize, noise: f64, seed: u64) -> Result<TimeSeries, TraceError> {
    if days == 0 {
        return Err(TraceError::InvalidParameter("days must be at least 1".into()));
    }
    if !(noise >= 0.0) {
        return Err(TraceError::InvalidParameter("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho: f64 = 0.97;
    let innovation = noise * (1.0 - rho * rho).sqrt();
    let mut dev = noise * rng.sample::<f64, _>(StandardNormal);
    let mut values = Vec::with_capacity(days * 24);
    for t in 0..days * 24 {
        let z: f64 = rng.sample(StandardNormal);
        dev = rho * dev + innovation * z;
        let shape = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (t % 24) as f64 / 24.0).cos();
        values.push((0.05 + 0.85 * (1.0 + dev) * shape).max(0.0));
    }
    let series = TimeSeries::hourly(values)?;
    let (normalized, _) = normalize(&series)?;
    Ok(normalized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterId {
    /// Heavy daily load.
    Heavy = 1,
    /// Light daily load.
    Light = 2,
}

/// The two daily traffic templates and the probability of drawing the light one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterProfiles {
    pub cluster1: Vec<f64>,
    pub cluster2: Vec<f64>,
    /// Probability that a BS is assigned the light template.
    pub p: f64,
    /// Std-dev of additive per-hour jitter (clipped to `[0, 1]`).
    pub jitter: f64,
}

impl Default for ClusterProfiles {
    fn default() -> Self {
        // Office-like heavy cluster with a broad daytime plateau and evening
        // shoulder; residential-like light cluster peaking in the evening.
        let cluster1 = vec![
            0.30, 0.22, 0.16, 0.12, 0.10, 0.10, 0.14, 0.25, 0.45, 0.65, 0.78, 0.85, //
            0.88, 0.88, 0.86, 0.84, 0.82, 0.80, 0.78, 0.74, 0.66, 0.56, 0.46, 0.38,
        ];
        let cluster2 = vec![
            0.08, 0.06, 0.04, 0.03, 0.03, 0.03, 0.04, 0.07, 0.12, 0.16, 0.19, 0.21, //
            0.22, 0.22, 0.21, 0.21, 0.22, 0.24, 0.26, 0.27, 0.25, 0.20, 0.15, 0.11,
        ];
        Self {
            cluster1,
            cluster2,
            p: 0.5,
            jitter: 0.0,
        }
    }
}

impl ClusterProfiles {
    pub fn validate(&self) -> Result<(), TraceError> {
        for (name, t) in [("cluster1", &self.cluster1), ("cluster2", &self.cluster2)] {
            if t.len() != 24 {
                return Err(TraceError::InvalidParameter(format!(
                    "{name} has {} entries, expected 24",
                    t.len()
                )));
            }
            if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(TraceError::InvalidParameter(format!(
                    "{name} entries must lie in [0, 1]"
                )));
            }
        }
        if self.cluster1.iter().sum::<f64>() < self.cluster2.iter().sum::<f64>() {
            return Err(TraceError::InvalidParameter(
                "cluster1 must carry at least as much daily load as cluster2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(TraceError::InvalidParameter(format!(
                "cluster probability {} outside [0, 1]",
                self.p
            )));
        }
        if !(self.jitter >= 0.0) {
            return Err(TraceError::InvalidParameter("jitter must be non-negative".into()));
        }
        Ok(())
    }

    pub fn template(&self, id: ClusterId) -> &[f64] {
        match id {
            ClusterId::Heavy => &self.cluster1,
            ClusterId::Light => &self.cluster2,
        }
    }
}

/// Draws a cluster once, then tiles its daily template over `days` days.
pub fn gen_traffic_trace(
    days: usize,
    profiles: &ClusterProfiles,
    seed: u64,
) -> Result<(TimeSeries, ClusterId), TraceError> {
    if days == 0 {
        return Err(TraceError::InvalidParameter("days must be at least 1".into()));
    }
    profiles.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = if rng.random::<f64>() < profiles.p {
        ClusterId::Light
    } else {
        ClusterId::Heavy
    };
    let template = profiles.template(id);
    let mut values = Vec::with_capacity(days * 24);
    for _ in 0..days {
        for &v in template {
            let v = if profiles.jitter > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                (v + profiles.jitter * z).clamp(0.0, 1.0)
            } else {
                v
            };
            values.push(v);
        }
    }
    Ok((TimeSeries::load(0, 1.0, values)?, id))
}

/// Linear power model of a BS: `P(L) = base_power + load_slope · L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsumptionModel {
    /// Idle drain (W).
    pub base_power: f64,
    /// Additional drain at full load (W).
    pub load_slope: f64,
    /// Slot duration (h).
    pub slot_duration: f64,
}

impl Default for ConsumptionModel {
    /// Small-cell figures sized against a 100 Wh buffer.
    fn default() -> Self {
        Self {
            base_power: 5.0,
            load_slope: 10.0,
            slot_duration: 1.0,
        }
    }
}

impl ConsumptionModel {
    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.base_power >= 0.0 && self.load_slope >= 0.0 && self.slot_duration > 0.0) {
            return Err(TraceError::InvalidParameter(format!(
                "consumption model {self:?} needs non-negative powers and a positive slot"
            )));
        }
        Ok(())
    }

    /// Energy drained in one slot at load `l` (J).
    pub fn energy(&self, l: f64) -> f64 {
        (self.base_power + self.load_slope * l) * self.slot_duration * SECONDS_PER_HOUR
    }

    /// Joules per unit of load; the slope of [`ConsumptionModel::energy`].
    pub fn joules_per_load(&self) -> f64 {
        self.load_slope * self.slot_duration * SECONDS_PER_HOUR
    }

    /// Energy drained over a full day at load 1 (J).
    pub fn full_load_daily(&self) -> f64 {
        self.energy(1.0) * 24.0 / self.slot_duration
    }
}

pub fn consumption(load: &TimeSeries, model: &ConsumptionModel) -> Result<TimeSeries, TraceError> {
    model.validate()?;
    load.check_load()?;
    let values = load.values().iter().map(|&l| model.energy(l)).collect();
    TimeSeries::new(load.start_slot, load.step, values)
}

/// Reads one numeric column of a headed CSV file.
pub fn load_csv(path: impl AsRef<Path>, column: &str) -> Result<TimeSeries, TraceError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| TraceError::MalformedRow {
            row: 0,
            reason: e.to_string(),
        })?
        .clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| TraceError::MissingColumn(column.to_string()))?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| TraceError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        let field = record.get(idx).ok_or_else(|| TraceError::MalformedRow {
            row,
            reason: format!("missing column `{column}`"),
        })?;
        let value: f64 = field.parse().map_err(|_| TraceError::MalformedRow {
            row,
            reason: format!("`{field}` is not a number"),
        })?;
        if value.is_nan() || value.is_infinite() {
            return Err(TraceError::MalformedRow {
                row,
                reason: format!("`{field}` is not finite"),
            });
        }
        if value < 0.0 {
            return Err(TraceError::NegativeValue { row, value });
        }
        values.push(value);
    }
    if values.is_empty() {
        return Err(TraceError::Empty);
    }
    TimeSeries::hourly(values)
}

/// Writes series as columns of a headed CSV file.
pub fn write_csv(path: impl AsRef<Path>, columns: &[(&str, &TimeSeries)]) -> Result<(), TraceError> {
    let path = path.as_ref();
    let io_err = |e: csv::Error| TraceError::Io {
        path: path.display().to_string(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(columns.iter().map(|(n, _)| *n)).map_err(io_err)?;
    let rows = columns.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
    for r in 0..rows {
        let rec: Vec<String> = columns
            .iter()
            .map(|(_, s)| s.values().get(r).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Scales a series into `[0, 1]` by its maximum; returns the scale.
pub fn normalize(series: &TimeSeries) -> Result<(TimeSeries, f64), TraceError> {
    if series.is_empty() {
        return Err(TraceError::Empty);
    }
    let scale = series.max();
    if scale <= 0.0 {
        return Err(TraceError::AllZero);
    }
    let values = series.values().iter().map(|v| v / scale).collect();
    Ok((TimeSeries::new(series.start_slot, series.step, values)?, scale))
}

pub fn denormalize(series: &TimeSeries, scale: f64) -> Result<TimeSeries, TraceError> {
    let values = series.values().iter().map(|v| v * scale).collect();
    TimeSeries::new(series.start_slot, series.step, values)
}
