//! Slotted simulation of the BS network.
//!
//! Each hourly slot runs, in order: grid purchases of ongrid BSs, action
//! computation (none, myopic, or GP forecasts plus MPC), allocation (convex or
//! Hungarian), routing and transfer over the grid, buffer update with the
//! realized harvest and consumption, and metrics.
//!
//! The first `gp.window` slots of every trace are history only. All
//! strategies see the same traces for a given seed, and GP forecasts depend
//! on traces alone, so a [`ForecastCache`] can share them across runs.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{self, AllocationError, AllocationMatrix, ConvexOptions};
use crate::gp::{FitOptions, GpError, GpModel, KernelExpr, Predictor};
use crate::grid::{self, GridError, GridParams, PpgTopology, TransferJob};
use crate::mpc::{self, DisturbanceForecast, MpcConfig, MpcError};
use crate::traces::{ClusterId, ClusterProfiles, ConsumptionModel, SolarProfile, TimeSeries, TraceError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("forecasting for BS {bs}: {source}")]
    Gp {
        bs: usize,
        #[source]
        source: GpError,
    },
    #[error("slot {slot}: {source}")]
    Mpc {
        slot: usize,
        #[source]
        source: MpcError,
    },
    #[error("slot {slot}: {source}")]
    Allocation {
        slot: usize,
        #[source]
        source: AllocationError,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "NOEE")]
    Noee,
    #[serde(rename = "CONV")]
    Conv,
    #[serde(rename = "HUNG")]
    Hung,
    #[serde(rename = "GPS_MPC_CONV")]
    GpsMpcConv,
    #[serde(rename = "GPS_MPC_HUNG")]
    GpsMpcHung,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Noee,
        Strategy::Conv,
        Strategy::Hung,
        Strategy::GpsMpcConv,
        Strategy::GpsMpcHung,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Noee => "NOEE",
            Strategy::Conv => "CONV",
            Strategy::Hung => "HUNG",
            Strategy::GpsMpcConv => "GPS_MPC_CONV",
            Strategy::GpsMpcHung => "GPS_MPC_HUNG",
        }
    }

    pub fn uses_forecasts(self) -> bool {
        matches!(self, Strategy::GpsMpcConv | Strategy::GpsMpcHung)
    }

    pub fn transfers(self) -> bool {
        self != Strategy::Noee
    }

    fn hungarian(self) -> bool {
        matches!(self, Strategy::Hung | Strategy::GpsMpcHung)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .map(|c| if c == '+' || c == '-' { '_' } else { c.to_ascii_uppercase() })
            .collect();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == key)
            .ok_or_else(|| SimError::Config(format!("unknown strategy `{s}`")))
    }
}

/// Buffer thresholds (J).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub b_max: f64,
    pub b_up: f64,
    pub b_ref: f64,
    pub b_low: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        let b_max = 360e3;
        Self {
            b_max,
            b_up: 0.7 * b_max,
            b_ref: 0.5 * b_max,
            b_low: 0.1 * b_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    /// Chains hanging off the router.
    pub branches: usize,
    pub per_branch: usize,
    /// `parent,child` edge list; overrides the chains when set.
    pub edge_list: Option<PathBuf>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            branches: 3,
            per_branch: 6,
            edge_list: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSettings {
    pub horizon: usize,
    pub alpha: f64,
    pub backoff: f64,
    pub soft_penalty: f64,
}

impl Default for MpcSettings {
    fn default() -> Self {
        let d = MpcConfig::default();
        Self {
            horizon: d.horizon,
            alpha: d.alpha,
            backoff: d.backoff,
            soft_penalty: d.soft_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSettings {
    /// Training window N (slots); also the warm-up history length.
    pub window: usize,
    pub noise_std: f64,
    /// Refit period in slots; `None` fits once on the warm-up history.
    pub refit_every: Option<usize>,
    pub kernel: KernelExpr,
    pub fit: FitOptions,
}

impl Default for GpSettings {
    fn default() -> Self {
        Self {
            window: 336,
            noise_std: 0.05,
            refit_every: None,
            kernel: KernelExpr::quasi_periodic(24.0),
            fit: FitOptions {
                grid: vec![0.1, 1.0, 10.0],
                max_evals: 60,
                ..FitOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Simulated days after the warm-up history.
    pub days: usize,
    pub strategy: Strategy,
    /// Daily purchase cap as a fraction of full-load daily consumption;
    /// `inf` disables the cap.
    pub eta: f64,
    pub beta: f64,
    /// Ids of the BSs allowed to buy from the power grid.
    pub ongrid: Vec<usize>,
    pub thresholds: Thresholds,
    pub topology: TopologyConfig,
    pub mpc: MpcSettings,
    pub gp: GpSettings,
    pub solar: SolarProfile,
    /// Traffic templates; `traffic.p` is the light-cluster probability.
    pub traffic: ClusterProfiles,
    pub consumption: ConsumptionModel,
    pub grid: GridParams,
    /// Multi-start budget of the convex allocation.
    pub allocation: ConvexOptions,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            days: 7,
            strategy: Strategy::Conv,
            eta: f64::INFINITY,
            beta: 0.5,
            ongrid: vec![0, 3, 6, 9, 12, 15],
            thresholds: Thresholds::default(),
            topology: TopologyConfig::default(),
            mpc: MpcSettings::default(),
            gp: GpSettings::default(),
            solar: SolarProfile {
                peak_joules: 100e3,
                ..SolarProfile::default()
            },
            traffic: ClusterProfiles {
                jitter: 0.03,
                ..ClusterProfiles::default()
            },
            consumption: ConsumptionModel::default(),
            grid: GridParams::default(),
            allocation: ConvexOptions {
                max_iterations: 300,
                tolerance: 1e-7,
                random_starts: 2,
                vertex_limit: 64,
                random_vertices: 8,
                ..ConvexOptions::default()
            },
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(s).map_err(|e| SimError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Edge lists are resolved against the config's directory.
        if let (Some(edges), Some(dir)) = (cfg.topology.edge_list.as_mut(), path.parent()) {
            if edges.is_relative() {
                *edges = dir.join(&*edges);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let t = &self.thresholds;
        if !(0.0 < t.b_low && t.b_low < t.b_ref && t.b_ref < t.b_up && t.b_up < t.b_max && t.b_max.is_finite()) {
            return Err(SimError::Config(format!(
                "thresholds must satisfy 0 < b_low < b_ref < b_up < b_max, got {} / {} / {} / {}",
                t.b_low, t.b_ref, t.b_up, t.b_max
            )));
        }
        if !(self.eta > 0.0) {
            return Err(SimError::Config(format!("eta {} must be positive (inf for no cap)", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(SimError::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.gp.window < 2 {
            return Err(SimError::Config("gp.window must be at least 2".into()));
        }
        if !(self.gp.noise_std >= 0.0) {
            return Err(SimError::Config("gp.noise_std must be >= 0".into()));
        }
        if self.gp.refit_every == Some(0) {
            return Err(SimError::Config("gp.refit_every must be positive".into()));
        }
        self.gp.kernel.validate().map_err(|e| SimError::Config(format!("gp.kernel: {e}")))?;
        self.mpc_config().validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.traffic.validate()?;
        self.consumption.validate()?;
        self.grid.validate()?;
        let mut seen = self.ongrid.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.ongrid.len() {
            return Err(SimError::Config("ongrid ids must be unique".into()));
        }
        if self.topology.edge_list.is_none() {
            let n = self.topology.branches * self.topology.per_branch;
            if n == 0 {
                return Err(SimError::Config("topology has no BSs".into()));
            }
            if let Some(&bad) = self.ongrid.iter().find(|&&id| id >= n) {
                return Err(SimError::Config(format!("ongrid id {bad} but only {n} BSs")));
            }
        }
        Ok(())
    }

    pub fn mpc_config(&self) -> MpcConfig {
        MpcConfig {
            horizon: self.mpc.horizon,
            alpha: self.mpc.alpha,
            b_ref: self.thresholds.b_ref,
            b_low: self.thresholds.b_low,
            b_max: self.thresholds.b_max,
            backoff: self.mpc.backoff,
            soft_penalty: self.mpc.soft_penalty,
        }
    }

    pub fn build_topology(&self) -> Result<PpgTopology, SimError> {
        let topo = match &self.topology.edge_list {
            Some(path) => PpgTopology::load_edge_list(path, self.grid)?,
            None => PpgTopology::chains(self.topology.branches, self.topology.per_branch, self.grid)?,
        };
        if let Some(&bad) = self.ongrid.iter().find(|&&id| id >= topo.bs_count()) {
            return Err(SimError::Config(format!(
                "ongrid id {bad} but the topology has {} BSs",
                topo.bs_count()
            )));
        }
        Ok(topo)
    }

    /// Daily purchase cap per ongrid BS (J).
    pub fn daily_cap(&self) -> f64 {
        self.eta * self.consumption.full_load_daily()
    }

    pub fn slots(&self) -> usize {
        self.days * 24
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d4_9bb1_3311_14eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsState {
    pub id: usize,
    pub ongrid: bool,
    pub buffer: f64,
    pub cluster: ClusterId,
    pub harvest: TimeSeries,
    pub load: TimeSeries,
    pub consumption: TimeSeries,
    /// Energy bought in each simulated slot.
    pub purchased: Vec<f64>,
}

/// Traces for every BS, covering warm-up, simulation and one horizon beyond.
pub fn generate_states(cfg: &ScenarioConfig, n_bs: usize) -> Result<Vec<BsState>, SimError> {
    let total = cfg.gp.window + cfg.slots() + cfg.mpc.horizon;
    let days = total.div_ceil(24);
    (0..n_bs)
        .map(|id| {
            let harvest = cfg.solar.generate(days, mix_seed(cfg.seed, 2 * id as u64))?;
            let (load, cluster) = crate::traces::gen_traffic_trace(days, &cfg.traffic, mix_seed(cfg.seed, 2 * id as u64 + 1))?;
            let consumption = crate::traces::consumption(&load, &cfg.consumption)?;
            Ok(BsState {
                id,
                ongrid: cfg.ongrid.contains(&id),
                buffer: cfg.thresholds.b_ref,
                cluster,
                harvest,
                load,
                consumption,
                purchased: Vec::new(),
            })
        })
        .collect()
}

/// Outcome of one buffer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferUpdate {
    pub buffer: f64,
    /// Surplus above `B_max` that could not be stored.
    pub wasted: f64,
    /// Demand that could not be served from an empty buffer.
    pub unserved: f64,
    pub depleted: bool,
}

pub fn buffer_update(b: f64, h: f64, o: f64, t: f64, theta: f64, b_max: f64) -> BufferUpdate {
    let raw = b + h - o + t + theta;
    if raw > b_max {
        BufferUpdate {
            buffer: b_max,
            wasted: raw - b_max,
            unserved: 0.0,
            depleted: false,
        }
    } else if raw <= 0.0 {
        BufferUpdate {
            buffer: 0.0,
            wasted: 0.0,
            unserved: -raw,
            depleted: true,
        }
    } else {
        BufferUpdate {
            buffer: raw,
            wasted: 0.0,
            unserved: 0.0,
            depleted: false,
        }
    }
}

/// Top-up to `B_up`, limited by what is left of the daily cap.
pub fn grid_purchase(buffer: f64, b_up: f64, cap_remaining: f64) -> f64 {
    (b_up - buffer).max(0.0).min(cap_remaining.max(0.0))
}

/// Demand `B_ref − B` below the reference, offer `B − B_ref` above it,
/// returned with the sign convention of the controller (receive > 0).
pub fn myopic_actions(buffers: &[f64], b_ref: f64) -> Vec<f64> {
    buffers.iter().map(|b| b_ref - b).collect()
}

pub fn outage_probability(buffers: &[f64]) -> f64 {
    if buffers.is_empty() {
        return 0.0;
    }
    buffers.iter().filter(|b| **b <= 0.0).count() as f64 / buffers.len() as f64
}

/// Adds to each ongrid BS's disturbance mean the purchases it is expected to
/// make over the horizon with no transfers, honouring the daily cap that
/// resets at midnight. `buffers` are post-purchase levels at hour
/// `first_hour`.
pub fn with_expected_purchases(
    dist: &DisturbanceForecast,
    buffers: &[f64],
    ongrid: &[bool],
    cap_remaining: &[f64],
    first_hour: usize,
    daily_cap: f64,
    th: &Thresholds,
) -> Result<DisturbanceForecast, MpcError> {
    let mut mean = dist.mean().clone();
    for n in (0..dist.bs_count()).filter(|&n| ongrid[n]) {
        let mut z = buffers[n];
        let mut left = cap_remaining[n];
        for k in 0..dist.horizon() {
            z = (z + mean[(k, n)]).clamp(0.0, th.b_max);
            if (first_hour + k + 1) % 24 == 0 {
                left = daily_cap;
            }
            let theta = grid_purchase(z, th.b_up, left);
            left -= theta;
            z += theta;
            mean[(k, n)] += theta;
        }
    }
    DisturbanceForecast::new(mean, dist.variance().clone())
}

/// GP forecasts of harvest and load for every BS and slot of one trace set.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBank {
    harvest: Vec<Vec<f64>>,
    load: Vec<Vec<f64>>,
    settings: GpSettings,
    horizon: usize,
    slots: usize,
    /// `[bs][slot]` means and variances over the horizon.
    h_mean: Vec<Vec<Vec<f64>>>,
    h_var: Vec<Vec<Vec<f64>>>,
    l_mean: Vec<Vec<Vec<f64>>>,
    l_var: Vec<Vec<Vec<f64>>>,
    /// `[slot][bs]` one-step errors in normalized units.
    h_err: Vec<Vec<f64>>,
    l_err: Vec<Vec<f64>>,
}

struct SeriesForecast {
    mean: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
    err: Vec<f64>,
}

fn forecast_series(
    values: &[f64],
    settings: &GpSettings,
    horizon: usize,
    slots: usize,
    max_normalize: bool,
) -> Result<SeriesForecast, GpError> {
    let n = settings.window;
    let scale_at = |t: usize| {
        if max_normalize {
            values[t - n..t].iter().copied().fold(0.0, f64::max)
        } else {
            1.0
        }
    };
    // Stationary kernels on an evenly spaced window: the posterior only
    // depends on positions relative to the window start.
    let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let tests: Vec<f64> = (n..n + horizon).map(|i| i as f64).collect();
    let targets = |t: usize, scale: f64| -> Vec<f64> { values[t - n..t].iter().map(|v| v / scale).collect() };
    let fitted = |t: usize, kernel: &KernelExpr, refine: bool| -> Result<KernelExpr, GpError> {
        let scale = scale_at(t);
        if scale <= 0.0 {
            return Ok(kernel.clone());
        }
        let model = GpModel::new(kernel.clone(), settings.noise_std, xs.clone(), targets(t, scale))?;
        let best = if refine { model.refine(&settings.fit)? } else { model.fit(&settings.fit)? };
        Ok(best.kernel().clone())
    };
    let predictor = |kernel: &KernelExpr| -> Result<Predictor, GpError> {
        GpModel::new(kernel.clone(), settings.noise_std, xs.clone(), vec![0.0; n])?.predictor(&tests)
    };

    let base = fitted(n, &settings.kernel, false)?;
    let mut pred = predictor(&base)?;
    let mut out = SeriesForecast {
        mean: Vec::with_capacity(slots),
        var: Vec::with_capacity(slots),
        err: Vec::with_capacity(slots),
    };
    for s in 0..slots {
        let t = n + s;
        if let Some(every) = settings.refit_every {
            if s > 0 && s % every == 0 {
                pred = predictor(&fitted(t, &base, true)?)?;
            }
        }
        let scale = scale_at(t);
        if scale <= 0.0 {
            out.err.push(values[t]);
            out.mean.push(vec![0.0; horizon]);
            out.var.push(vec![0.0; horizon]);
            continue;
        }
        let f = pred.predict(&targets(t, scale))?;
        let mean: Vec<f64> = f.mean.iter().map(|m| (m * scale).clamp(0.0, scale)).collect();
        let var: Vec<f64> = f.variance().iter().map(|v| v.max(0.0) * scale * scale).collect();
        out.err.push((mean[0] - values[t]) / scale);
        out.mean.push(mean);
        out.var.push(var);
    }
    Ok(out)
}

impl ForecastBank {
    pub fn build(cfg: &ScenarioConfig, states: &[BsState]) -> Result<Self, SimError> {
        let slots = cfg.slots();
        let horizon = cfg.mpc.horizon;
        let mut bank = ForecastBank {
            harvest: states.iter().map(|s| s.harvest.values().to_vec()).collect(),
            load: states.iter().map(|s| s.load.values().to_vec()).collect(),
            settings: cfg.gp.clone(),
            horizon,
            slots,
            h_mean: Vec::new(),
            h_var: Vec::new(),
            l_mean: Vec::new(),
            l_var: Vec::new(),
            h_err: vec![Vec::new(); slots],
            l_err: vec![Vec::new(); slots],
        };
        for st in states {
            let need = cfg.gp.window + slots + horizon;
            if st.harvest.len() < need || st.load.len() < need {
                return Err(SimError::Config(format!("traces of BS {} shorter than {need} slots", st.id)));
            }
            let h = forecast_series(st.harvest.values(), &cfg.gp, horizon, slots, true)
                .map_err(|source| SimError::Gp { bs: st.id, source })?;
            let l = forecast_series(st.load.values(), &cfg.gp, horizon, slots, false)
                .map_err(|source| SimError::Gp { bs: st.id, source })?;
            for s in 0..slots {
                bank.h_err[s].push(h.err[s]);
                bank.l_err[s].push(l.err[s]);
            }
            bank.h_mean.push(h.mean);
            bank.h_var.push(h.var);
            bank.l_mean.push(l.mean);
            bank.l_var.push(l.var);
        }
        Ok(bank)
    }

    fn matches(&self, cfg: &ScenarioConfig, states: &[BsState]) -> bool {
        self.settings == cfg.gp
            && self.horizon == cfg.mpc.horizon
            && self.slots == cfg.slots()
            && self.harvest.len() == states.len()
            && states
                .iter()
                .zip(self.harvest.iter().zip(&self.load))
                .all(|(s, (h, l))| s.harvest.values() == &h[..] && s.load.values() == &l[..])
    }

    /// Forecast of `H − O` for every BS at simulated slot `s`.
    pub fn disturbance(&self, s: usize, model: &ConsumptionModel) -> Result<DisturbanceForecast, MpcError> {
        let n = self.h_mean.len();
        let m = self.horizon;
        let jpl = model.joules_per_load();
        let idle = model.energy(0.0);
        let mean = DMatrix::from_fn(m, n, |k, j| self.h_mean[j][s][k] - (idle + jpl * self.l_mean[j][s][k]));
        let var = DMatrix::from_fn(m, n, |k, j| self.h_var[j][s][k] + jpl * jpl * self.l_var[j][s][k]);
        DisturbanceForecast::new(mean, var)
    }

    /// Root-mean-square one-step error across BSs at slot `s`, normalized.
    pub fn rmse(&self, s: usize) -> (f64, f64) {
        let r = |e: &[f64]| (e.iter().map(|x| x * x).sum::<f64>() / e.len().max(1) as f64).sqrt();
        (r(&self.h_err[s]), r(&self.l_err[s]))
    }
}

/// Forecast banks keyed by the traces and GP settings they were built from.
#[derive(Debug, Default)]
pub struct ForecastCache {
    banks: Vec<ForecastBank>,
}

impl ForecastCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    fn get_or_build(&mut self, cfg: &ScenarioConfig, states: &[BsState]) -> Result<&ForecastBank, SimError> {
        if let Some(i) = self.banks.iter().position(|b| b.matches(cfg, states)) {
            return Ok(&self.banks[i]);
        }
        self.banks.push(ForecastBank::build(cfg, states)?);
        Ok(self.banks.last().expect("just pushed"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotMetrics {
    pub slot: usize,
    pub gamma: f64,
    pub mean_buffer: f64,
    pub purchased: f64,
    /// Energy leaving sources.
    pub transferred: f64,
    pub delivered: f64,
    /// Transfer losses.
    pub lost: f64,
    pub harvested: f64,
    pub consumed: f64,
    pub wasted: f64,
    pub unserved: f64,
    pub total_buffer: f64,
    /// One-step normalized forecast RMSE across BSs (NaN without GP).
    pub rmse_h: f64,
    pub rmse_l: f64,
}

impl SlotMetrics {
    /// `ΔΣB − (H − O + θ − lost − wasted + unserved)` for this slot.
    pub fn accounting_residual(&self, previous_total: f64) -> f64 {
        (self.total_buffer - previous_total)
            - (self.harvested - self.consumed + self.purchased - self.lost - self.wasted + self.unserved)
    }
}

pub const METRICS_HEADER: [&str; 14] = [
    "slot",
    "gamma",
    "mean_buffer",
    "purchased",
    "transferred",
    "lost",
    "delivered",
    "harvested",
    "consumed",
    "wasted",
    "unserved",
    "total_buffer",
    "rmse_h",
    "rmse_l",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub strategy: Strategy,
    pub seed: u64,
    pub p: f64,
    pub eta: f64,
    pub initial_total_buffer: f64,
    pub slots: Vec<SlotMetrics>,
    pub purchased_per_bs: Vec<f64>,
    pub ongrid: Vec<bool>,
    pub clusters: Vec<ClusterId>,
    pub final_buffers: Vec<f64>,
    /// Set when the run has nothing to report.
    pub notice: Option<String>,
}

/// Seed-level aggregate of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: Strategy,
    pub seed: u64,
    pub p: f64,
    pub eta: f64,
    pub slots: usize,
    pub mean_gamma: f64,
    pub max_gamma: f64,
    pub mean_buffer: f64,
    pub total_purchased: f64,
    pub total_transferred: f64,
    pub total_lost: f64,
    pub total_wasted: f64,
    pub total_unserved: f64,
}

impl Metrics {
    pub fn mean_gamma(&self) -> f64 {
        mean(self.slots.iter().map(|s| s.gamma))
    }

    pub fn total_purchased(&self) -> f64 {
        self.slots.iter().map(|s| s.purchased).sum()
    }

    pub fn total_transferred(&self) -> f64 {
        self.slots.iter().map(|s| s.transferred).sum()
    }

    pub fn summary(&self) -> Summary {
        Summary {
            strategy: self.strategy,
            seed: self.seed,
            p: self.p,
            eta: self.eta,
            slots: self.slots.len(),
            mean_gamma: self.mean_gamma(),
            max_gamma: self.slots.iter().map(|s| s.gamma).fold(0.0, f64::max),
            mean_buffer: mean(self.slots.iter().map(|s| s.mean_buffer)),
            total_purchased: self.total_purchased(),
            total_transferred: self.total_transferred(),
            total_lost: self.slots.iter().map(|s| s.lost).sum(),
            total_wasted: self.slots.iter().map(|s| s.wasted).sum(),
            total_unserved: self.slots.iter().map(|s| s.unserved).sum(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(METRICS_HEADER)?;
        for s in &self.slots {
            w.write_record(&[
                s.slot.to_string(),
                s.gamma.to_string(),
                s.mean_buffer.to_string(),
                s.purchased.to_string(),
                s.transferred.to_string(),
                s.lost.to_string(),
                s.delivered.to_string(),
                s.harvested.to_string(),
                s.consumed.to_string(),
                s.wasted.to_string(),
                s.unserved.to_string(),
                s.total_buffer.to_string(),
                s.rmse_h.to_string(),
                s.rmse_l.to_string(),
            ])?;
        }
        w.flush().map_err(|source| SimError::Io {
            path: "<metrics>".into(),
            source,
        })?;
        Ok(())
    }

    /// Rows `bs,ongrid,cluster,purchased,final_buffer`.
    pub fn write_bs_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["bs", "ongrid", "cluster", "purchased", "final_buffer"])?;
        for i in 0..self.purchased_per_bs.len() {
            w.write_record(&[
                i.to_string(),
                self.ongrid[i].to_string(),
                (self.clusters[i] as u8).to_string(),
                self.purchased_per_bs[i].to_string(),
                self.final_buffers[i].to_string(),
            ])?;
        }
        w.flush().map_err(|source| SimError::Io {
            path: "<bs metrics>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Reads the per-slot rows written by [`Metrics::write_csv`].
pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<SlotMetrics>, SimError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(SimError::Parse(format!("unexpected metrics header {header:?}")));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64, SimError> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| SimError::Parse(format!("row {}: bad `{}` value `{}`", row + 1, METRICS_HEADER[i], &rec[i])))
        };
        out.push(SlotMetrics {
            slot: rec[0]
                .parse()
                .map_err(|_| SimError::Parse(format!("row {}: bad slot `{}`", row + 1, &rec[0])))?,
            gamma: f(1)?,
            mean_buffer: f(2)?,
            purchased: f(3)?,
            transferred: f(4)?,
            lost: f(5)?,
            delivered: f(6)?,
            harvested: f(7)?,
            consumed: f(8)?,
            wasted: f(9)?,
            unserved: f(10)?,
            total_buffer: f(11)?,
            rmse_h: f(12)?,
            rmse_l: f(13)?,
        });
    }
    Ok(out)
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mutable state of a running scenario.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: ScenarioConfig,
    pub topo: PpgTopology,
    pub bs: Vec<BsState>,
    /// Next simulated slot.
    pub slot: usize,
    purchased_today: Vec<f64>,
}

impl World {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let topo = cfg.build_topology()?;
        let bs = generate_states(&cfg, topo.bs_count())?;
        let n = bs.len();
        Ok(Self {
            cfg,
            topo,
            bs,
            slot: 0,
            purchased_today: vec![0.0; n],
        })
    }

    pub fn buffers(&self) -> Vec<f64> {
        self.bs.iter().map(|b| b.buffer).collect()
    }

    /// Trace index of the next slot.
    fn trace_index(&self) -> usize {
        self.cfg.gp.window + self.slot
    }
}

/// Advances the world by one slot. `forecasts` must be present for the
/// forecast-driven strategies.
pub fn run_slot(world: &mut World, strategy: Strategy, forecasts: Option<&ForecastBank>) -> Result<SlotMetrics, SimError> {
    let slot = world.slot;
    let t = world.trace_index();
    let th = world.cfg.thresholds;
    let n = world.bs.len();
    let before: f64 = world.bs.iter().map(|b| b.buffer).sum();

    // (a) purchases
    if t % 24 == 0 {
        world.purchased_today.iter_mut().for_each(|p| *p = 0.0);
    }
    let cap = world.cfg.daily_cap();
    let mut purchased = 0.0;
    for (i, b) in world.bs.iter_mut().enumerate() {
        let theta = if b.ongrid {
            grid_purchase(b.buffer, th.b_up, cap - world.purchased_today[i])
        } else {
            0.0
        };
        b.buffer += theta;
        b.purchased.push(theta);
        world.purchased_today[i] += theta;
        purchased += theta;
    }

    // (b) actions
    let buffers = world.buffers();
    let actions = match strategy {
        Strategy::Noee => vec![0.0; n],
        Strategy::Conv | Strategy::Hung => myopic_actions(&buffers, th.b_ref),
        Strategy::GpsMpcConv | Strategy::GpsMpcHung => {
            let bank = forecasts.ok_or_else(|| SimError::Config(format!("{strategy} needs forecasts")))?;
            let ongrid: Vec<bool> = world.bs.iter().map(|b| b.ongrid).collect();
            let remaining: Vec<f64> = world.purchased_today.iter().map(|p| cap - p).collect();
            let dist = bank
                .disturbance(slot, &world.cfg.consumption)
                .and_then(|d| {
                    with_expected_purchases(&d, &buffers, &ongrid, &remaining, t % 24, cap, &th)
                })
                .map_err(|source| SimError::Mpc { slot, source })?;
            mpc::mpc_step(&buffers, &dist, &world.cfg.mpc_config()).map_err(|source| SimError::Mpc { slot, source })?
        }
    };

    // (c) allocation and (d) routing
    let mut ledger = grid::TransferLedger::default();
    if strategy.transfers() && n > 1 {
        let problem = allocation::build_problem(&actions, &world.topo, world.cfg.beta, th.b_max)
            .map_err(|source| SimError::Allocation { slot, source })?;
        if !problem.is_empty() {
            let y: AllocationMatrix = if strategy.hungarian() {
                allocation::solve_assignment(&problem)
            } else {
                allocation::solve_convex_with(&problem, &world.cfg.allocation).allocation
            };
            let mut jobs = Vec::new();
            for (i, src) in problem.sources.iter().enumerate() {
                for (j, dst) in problem.consumers.iter().enumerate() {
                    let energy = y.sent(&problem, i, j);
                    if energy > 0.0 {
                        jobs.push(TransferJob::new(&world.topo, src.bs, dst.bs, energy)?);
                    }
                }
            }
            let schedule = grid::schedule_transfers(&jobs, &world.topo)?;
            let mut buf = world.buffers();
            ledger = grid::apply_transfers(&schedule, &jobs, &world.topo, &mut buf)?;
            for (b, v) in world.bs.iter_mut().zip(buf) {
                b.buffer = v;
            }
        }
    }

    // (e) buffer update
    let (mut harvested, mut consumed, mut wasted, mut unserved) = (0.0, 0.0, 0.0, 0.0);
    for b in world.bs.iter_mut() {
        let h = b.harvest.values()[t];
        let o = b.consumption.values()[t];
        let up = buffer_update(b.buffer, h, o, 0.0, 0.0, th.b_max);
        b.buffer = up.buffer;
        harvested += h;
        consumed += o;
        wasted += up.wasted;
        unserved += up.unserved;
    }
    world.slot += 1;

    // (f) metrics
    let buffers = world.buffers();
    let total: f64 = buffers.iter().sum();
    let (rmse_h, rmse_l) = match (strategy.uses_forecasts(), forecasts) {
        (true, Some(bank)) => bank.rmse(slot),
        _ => (f64::NAN, f64::NAN),
    };
    let metrics = SlotMetrics {
        slot,
        gamma: outage_probability(&buffers),
        mean_buffer: total / n as f64,
        purchased,
        transferred: ledger.total_sent(),
        delivered: ledger.total_delivered(),
        lost: ledger.total_lost(),
        harvested,
        consumed,
        wasted,
        unserved,
        total_buffer: total,
        rmse_h,
        rmse_l,
    };
    debug_assert!(metrics.accounting_residual(before).abs() <= 1e-6 * (1.0 + before));
    Ok(metrics)
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Metrics, SimError> {
    run_scenario_cached(cfg, &mut ForecastCache::new())
}

pub fn run_scenario_cached(cfg: &ScenarioConfig, cache: &mut ForecastCache) -> Result<Metrics, SimError> {
    let mut world = World::new(cfg.clone())?;
    let strategy = cfg.strategy;
    let initial_total_buffer: f64 = world.bs.iter().map(|b| b.buffer).sum();
    let slots = cfg.slots();
    let bank = if strategy.uses_forecasts() && slots > 0 {
        Some(cache.get_or_build(cfg, &world.bs)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(slots);
    for _ in 0..slots {
        rows.push(run_slot(&mut world, strategy, bank)?);
    }
    Ok(Metrics {
        strategy,
        seed: cfg.seed,
        p: cfg.traffic.p,
        eta: cfg.eta,
        initial_total_buffer,
        slots: rows,
        purchased_per_bs: world.bs.iter().map(|b| b.purchased.iter().sum()).collect(),
        ongrid: world.bs.iter().map(|b| b.ongrid).collect(),
        clusters: world.bs.iter().map(|b| b.cluster).collect(),
        final_buffers: world.buffers(),
        notice: (slots == 0).then(|| "no slots to simulate after the warm-up history".to_string()),
    })
}
