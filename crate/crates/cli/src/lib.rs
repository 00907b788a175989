//! Batch front-end: scenario runs, parameter sweeps, strategy comparison and
//! standalone trace forecasting. All outputs are CSV; see `docs/formats.md`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ppgrid::gp::{self, FitOptions, KernelExpr, RollingOptions};
use ppgrid::sim::{self, ForecastCache, Metrics, ScenarioConfig, Strategy, Summary};
use ppgrid::traces;
use serde::{Deserialize, Serialize};

/// Scenario parameter varied across runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    None,
    P(Vec<f64>),
    Eta(Vec<f64>),
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Sweep::None => "none",
            Sweep::P(_) => "p",
            Sweep::Eta(_) => "eta",
        }
    }

    fn values(&self) -> Vec<Option<f64>> {
        match self {
            Sweep::None => vec![None],
            Sweep::P(v) | Sweep::Eta(v) => v.iter().copied().map(Some).collect(),
        }
    }

    fn apply(&self, cfg: &mut ScenarioConfig, value: Option<f64>) {
        match (self, value) {
            (Sweep::P(_), Some(v)) => cfg.traffic.p = v,
            (Sweep::Eta(_), Some(v)) => cfg.eta = v,
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub config: PathBuf,
    pub out: PathBuf,
    pub sweep: Sweep,
    /// Empty means the strategy named in the config.
    pub strategies: Vec<Strategy>,
    /// Empty means the seed named in the config.
    pub seeds: Vec<u64>,
    pub days: Option<usize>,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.sweep {
            Sweep::P(v) | Sweep::Eta(v) if v.is_empty() => bail!("sweep over {} has no values", self.sweep.axis()),
            Sweep::P(v) => {
                if let Some(bad) = v.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    bail!("sweep value p = {bad} outside [0, 1]");
                }
            }
            Sweep::Eta(v) => {
                if let Some(bad) = v.iter().find(|e| !(**e > 0.0)) {
                    bail!("sweep value eta = {bad} must be positive");
                }
            }
            Sweep::None => {}
        }
        Ok(())
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

pub const SUMMARY_METRICS: [&str; 8] = [
    "mean_gamma",
    "max_gamma",
    "mean_buffer",
    "total_purchased",
    "total_transferred",
    "total_lost",
    "total_wasted",
    "total_unserved",
];

fn metric_values(s: &Summary) -> [f64; 8] {
    [
        s.mean_gamma,
        s.max_gamma,
        s.mean_buffer,
        s.total_purchased,
        s.total_transferred,
        s.total_lost,
        s.total_wasted,
        s.total_unserved,
    ]
}

/// Seed-averaged summary of one (strategy, sweep value) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub strategy: Strategy,
    pub axis: String,
    /// `None` when there is no sweep.
    pub value: Option<f64>,
    pub seeds: Vec<u64>,
    pub slots: usize,
    /// One entry per name in [`SUMMARY_METRICS`].
    pub stats: Vec<Stat>,
}

impl SeedSummary {
    pub fn from_runs(strategy: Strategy, axis: &str, value: Option<f64>, runs: &[Summary]) -> Self {
        let stats = (0..SUMMARY_METRICS.len())
            .map(|k| Stat::of(&runs.iter().map(|r| metric_values(r)[k]).collect::<Vec<_>>()))
            .collect();
        Self {
            strategy,
            axis: axis.to_string(),
            value,
            seeds: runs.iter().map(|r| r.seed).collect(),
            slots: runs.first().map_or(0, |r| r.slots),
            stats,
        }
    }

    pub fn stat(&self, metric: &str) -> Option<Stat> {
        SUMMARY_METRICS.iter().position(|m| *m == metric).map(|i| self.stats[i])
    }

    fn header() -> Vec<String> {
        let mut h: Vec<String> = ["strategy", "axis", "value", "seeds", "slots"].map(String::from).to_vec();
        for m in SUMMARY_METRICS {
            h.push(format!("{m}_mean"));
            h.push(format!("{m}_std"));
        }
        h
    }

    pub fn write_csv<W: std::io::Write>(summaries: &[SeedSummary], w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(Self::header())?;
        for s in summaries {
            let mut row = vec![
                s.strategy.to_string(),
                s.axis.clone(),
                s.value.map(|v| v.to_string()).unwrap_or_default(),
                s.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
                s.slots.to_string(),
            ];
            for st in &s.stats {
                row.push(st.mean.to_string());
                row.push(st.std.to_string());
            }
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<SeedSummary>> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != Self::header() {
            bail!("not a summary file: unexpected header {header:?}");
        }
        let mut out = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let num = |k: usize| -> Result<f64> {
                rec[k].parse().with_context(|| format!("row {row}: bad `{}` value `{}`", header[k], &rec[k]))
            };
            let value = if rec[2].is_empty() { None } else { Some(num(2)?) };
            let seeds = rec[3]
                .split_whitespace()
                .map(|s| s.parse::<u64>().with_context(|| format!("row {row}: bad seed `{s}`")))
                .collect::<Result<Vec<_>>>()?;
            let stats = (0..SUMMARY_METRICS.len())
                .map(|k| {
                    Ok(Stat {
                        mean: num(5 + 2 * k)?,
                        std: num(6 + 2 * k)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(SeedSummary {
                strategy: rec[0].parse().map_err(|e| anyhow!("row {row}: {e}"))?,
                axis: rec[1].to_string(),
                value,
                seeds,
                slots: rec[4].parse().with_context(|| format!("row {row}: bad slot count `{}`", &rec[4]))?,
                stats,
            });
        }
        Ok(out)
    }
}

fn value_tag(axis: &str, value: Option<f64>) -> String {
    match value {
        Some(v) => format!("_{axis}{v}"),
        None => String::new(),
    }
}

pub fn metrics_file_name(strategy: Strategy, axis: &str, value: Option<f64>, seed: u64) -> String {
    format!("metrics_{strategy}{}_seed{seed}.csv", value_tag(axis, value))
}

pub fn summary_file_name(strategy: Strategy, axis: &str, value: Option<f64>) -> String {
    format!("summary_{strategy}{}.csv", value_tag(axis, value))
}

/// Files written by one command; removed again if the command fails.
struct Output {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Output {
    /// Creates the directory if needed and proves that it is writable.
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let probe = dir.join(".ppgrid-write-probe");
        fs::write(&probe, b"").with_context(|| format!("output directory {} is not writable", dir.display()))?;
        fs::remove_file(&probe).with_context(|| format!("cannot clean up {}", probe.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, body)
            .and_then(|_| fs::rename(&tmp, &path))
            .with_context(|| format!("cannot write {}", path.display()))
            .inspect_err(|_| {
                let _ = fs::remove_file(&tmp);
            })?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn rollback(&mut self) {
        for p in self.written.drain(..) {
            let _ = fs::remove_file(p);
        }
    }

    /// Runs `f`, removing everything it wrote if it fails.
    fn transaction<T>(mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let r = f(&mut self);
        if r.is_err() {
            self.rollback();
        }
        r
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics_files: Vec<PathBuf>,
    pub summary_files: Vec<PathBuf>,
    pub summaries: Vec<SeedSummary>,
    pub notices: Vec<String>,
}

fn load_config(spec: &RunSpec) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(&spec.config).with_context(|| format!("in config {}", spec.config.display()))?;
    if let Some(days) = spec.days {
        cfg.days = days;
    }
    Ok(cfg)
}

/// Runs every (strategy, sweep value, seed) combination in memory, then
/// writes one metrics CSV per run and one summary per (strategy, value).
pub fn cmd_run(spec: &RunSpec) -> Result<RunReport> {
    spec.validate()?;
    let base = load_config(spec)?;
    let out = Output::open(&spec.out)?;
    let strategies = if spec.strategies.is_empty() {
        vec![base.strategy]
    } else {
        spec.strategies.clone()
    };
    let seeds = if spec.seeds.is_empty() { vec![base.seed] } else { spec.seeds.clone() };
    let axis = spec.sweep.axis();

    let mut cache = ForecastCache::new();
    let mut runs: Vec<(Strategy, Option<f64>, u64, Metrics)> = Vec::new();
    for value in spec.sweep.values() {
        for &seed in &seeds {
            for &strategy in &strategies {
                let mut cfg = base.clone();
                spec.sweep.apply(&mut cfg, value);
                cfg.seed = seed;
                cfg.strategy = strategy;
                cfg.validate()?;
                let m = sim::run_scenario_cached(&cfg, &mut cache).with_context(|| {
                    format!("{strategy} seed {seed}{}", value.map(|v| format!(" {axis}={v}")).unwrap_or_default())
                })?;
                runs.push((strategy, value, seed, m));
            }
        }
    }

    out.transaction(|out| {
        let mut report = RunReport {
            metrics_files: Vec::new(),
            summary_files: Vec::new(),
            summaries: Vec::new(),
            notices: Vec::new(),
        };
        for (strategy, value, seed, m) in &runs {
            let mut body = Vec::new();
            m.write_csv(&mut body)?;
            report
                .metrics_files
                .push(out.write(&metrics_file_name(*strategy, axis, *value, *seed), &body)?);
            if let Some(n) = &m.notice {
                report.notices.push(format!("{strategy} seed {seed}: {n}"));
            }
        }
        for value in spec.sweep.values() {
            for &strategy in &strategies {
                let cell: Vec<Summary> = runs
                    .iter()
                    .filter(|(s, v, _, _)| *s == strategy && *v == value)
                    .map(|(_, _, _, m)| m.summary())
                    .collect();
                let summary = SeedSummary::from_runs(strategy, axis, value, &cell);
                let mut body = Vec::new();
                SeedSummary::write_csv(std::slice::from_ref(&summary), &mut body)?;
                report
                    .summary_files
                    .push(out.write(&summary_file_name(strategy, axis, value), &body)?);
                report.summaries.push(summary);
            }
        }
        Ok(report)
    })
}

/// Wide table: one row per sweep value, one column per metric and strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub axis: String,
    pub strategies: Vec<Strategy>,
    pub values: Vec<Option<f64>>,
    /// `cells[row][metric][strategy]` seed means.
    pub cells: Vec<Vec<Vec<f64>>>,
}

pub fn cmd_compare(summaries: &[SeedSummary]) -> Result<Comparison> {
    if summaries.len() < 2 {
        bail!("comparison needs at least 2 summaries, got {}", summaries.len());
    }
    let axis = &summaries[0].axis;
    let axes: Vec<&str> = summaries.iter().map(|s| s.axis.as_str()).collect();
    if axes.iter().any(|a| a != axis) {
        let mut distinct = axes.clone();
        distinct.sort_unstable();
        distinct.dedup();
        bail!("summaries span different sweep axes: {}", distinct.join(", "));
    }
    let mut strategies: Vec<Strategy> = summaries.iter().map(|s| s.strategy).collect();
    strategies.sort();
    strategies.dedup();
    let key = |v: Option<f64>| v.map(f64::to_bits);
    let mut by_value: BTreeMap<Option<u64>, BTreeMap<Strategy, &SeedSummary>> = BTreeMap::new();
    for s in summaries {
        if by_value.entry(key(s.value)).or_default().insert(s.strategy, s).is_some() {
            bail!(
                "duplicate summary for {} at {}",
                s.strategy,
                s.value.map_or("no sweep".to_string(), |v| format!("{axis}={v}"))
            );
        }
    }
    let mut values: Vec<Option<f64>> = by_value.keys().map(|k| k.map(f64::from_bits)).collect();
    values.sort_by(|a, b| a.unwrap_or(f64::NEG_INFINITY).total_cmp(&b.unwrap_or(f64::NEG_INFINITY)));
    let mut missing = Vec::new();
    for v in &values {
        let row = &by_value[&key(*v)];
        for s in &strategies {
            if !row.contains_key(s) {
                missing.push(format!("{s} at {}", v.map_or("no sweep".to_string(), |v| format!("{axis}={v}"))));
            }
        }
    }
    if !missing.is_empty() {
        bail!("summaries do not cover the same sweep values; missing {}", missing.join(", "));
    }
    let cells = values
        .iter()
        .map(|v| {
            let row = &by_value[&key(*v)];
            (0..SUMMARY_METRICS.len())
                .map(|k| strategies.iter().map(|s| row[s].stats[k].mean).collect())
                .collect()
        })
        .collect();
    Ok(Comparison {
        axis: axis.clone(),
        strategies,
        values,
        cells,
    })
}

impl Comparison {
    fn header(&self) -> Vec<String> {
        let mut h = vec![self.axis.clone()];
        for m in SUMMARY_METRICS {
            for s in &self.strategies {
                h.push(format!("{m}_{s}"));
            }
        }
        h
    }

    pub fn column(&self, metric: &str, strategy: Strategy) -> Option<Vec<f64>> {
        let k = SUMMARY_METRICS.iter().position(|m| *m == metric)?;
        let j = self.strategies.iter().position(|s| *s == strategy)?;
        Some(self.cells.iter().map(|row| row[k][j]).collect())
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(self.header())?;
        for (v, row) in self.values.iter().zip(&self.cells) {
            let mut rec = vec![v.map(|v| v.to_string()).unwrap_or_default()];
            rec.extend(row.iter().flatten().map(f64::to_string));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let axis = header.first().cloned().ok_or_else(|| anyhow!("empty comparison header"))?;
        let first = SUMMARY_METRICS[0];
        let strategies = header[1..]
            .iter()
            .take_while(|h| h.starts_with(first) && h[first.len()..].starts_with('_'))
            .map(|h| h[first.len() + 1..].parse::<Strategy>().map_err(|e| anyhow!("{e}")))
            .collect::<Result<Vec<_>>>()?;
        let table = Comparison {
            axis,
            strategies,
            values: Vec::new(),
            cells: Vec::new(),
        };
        if header != table.header() {
            bail!("not a comparison table: unexpected header {header:?}");
        }
        let (ns, nm) = (table.strategies.len(), SUMMARY_METRICS.len());
        let mut table = table;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec[k].parse().with_context(|| format!("row {}: bad `{}` value `{}`", i + 1, header[k], &rec[k]))
            };
            table.values.push(if rec[0].is_empty() { None } else { Some(parse(0)?) });
            let row = (0..nm)
                .map(|m| (0..ns).map(|s| parse(1 + m * ns + s)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            table.cells.push(row);
        }
        Ok(table)
    }
}

/// Reads every `summary_*.csv` in a directory.
pub fn load_summaries(dir: &Path) -> Result<Vec<SeedSummary>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("summary_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let f = fs::File::open(&p).with_context(|| format!("cannot open {}", p.display()))?;
        out.extend(SeedSummary::read_csv(f).with_context(|| format!("in {}", p.display()))?);
    }
    Ok(out)
}

pub const COMPARISON_FILE: &str = "comparison.csv";

/// Runs the spec (all strategies unless restricted) and writes the
/// comparison table next to the per-run files.
pub fn cmd_compare_run(spec: &RunSpec) -> Result<(RunReport, PathBuf)> {
    let mut spec = spec.clone();
    if spec.strategies.is_empty() {
        spec.strategies = Strategy::ALL.to_vec();
    }
    let report = cmd_run(&spec)?;
    let table = cmd_compare(&report.summaries);
    let mut out = Output::open(&spec.out)?;
    out.written = report.metrics_files.iter().chain(&report.summary_files).cloned().collect();
    let path = out.transaction(|out| {
        let mut body = Vec::new();
        table?.write_csv(&mut body)?;
        out.write(COMPARISON_FILE, &body)
    })?;
    Ok((report, path))
}

/// Compares the summaries found in `from` and writes the table to `out`.
pub fn cmd_compare_dir(from: &Path, out: &Path) -> Result<PathBuf> {
    let table = cmd_compare(&load_summaries(from)?)?;
    let mut body = Vec::new();
    table.write_csv(&mut body)?;
    Output::open(out)?.transaction(|o| o.write(COMPARISON_FILE, &body))
}

/// Settings of the standalone rolling forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// CSV column holding the trace; the only non-`slot` column when unset.
    pub column: Option<String>,
    pub window: usize,
    pub horizon: usize,
    pub noise_std: f64,
    pub refit_every: Option<usize>,
    /// Divide the trace by its maximum before forecasting.
    pub normalize: bool,
    pub kernel: KernelExpr,
    pub fit: FitOptions,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            column: None,
            window: 336,
            horizon: 24,
            noise_std: 1e-5,
            refit_every: None,
            normalize: true,
            kernel: KernelExpr::quasi_periodic(24.0),
            fit: FitOptions::default(),
        }
    }
}

impl ForecastConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| anyhow!("in config {}: {e}", path.display()))?;
        cfg.kernel.validate().map_err(|e| anyhow!("in config {}: kernel: {e}", path.display()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct ForecastSpec {
    pub trace: PathBuf,
    /// Forecast settings; defaults when unset.
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

pub const FORECAST_FILE: &str = "forecast.csv";
pub const FORECAST_SUMMARY_FILE: &str = "forecast_summary.csv";

/// One row of the forecast table.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    /// Trace index of the first forecast step.
    pub slot: usize,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub rmse: f64,
    /// Mean of `rmse` over this and all earlier rows.
    pub running_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub column: String,
    pub slots: usize,
    pub window: usize,
    pub horizon: usize,
    pub mean_rmse: f64,
    pub one_step_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct ForecastReport {
    pub rows: Vec<ForecastRow>,
    pub summary: ForecastSummary,
    pub files: Vec<PathBuf>,
}

fn pick_column(path: &Path, wanted: Option<&str>) -> Result<String> {
    if let Some(c) = wanted {
        return Ok(c.to_string());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open trace {}", path.display()))?;
    let cols: Vec<String> = rdr
        .headers()?
        .iter()
        .filter(|h| *h != "slot")
        .map(str::to_string)
        .collect();
    match cols.as_slice() {
        [one] => Ok(one.clone()),
        _ => bail!(
            "trace {} has columns {cols:?}; name one with `column` in the forecast config",
            path.display()
        ),
    }
}

pub fn forecast_header(horizon: usize) -> Vec<String> {
    let mut h = vec!["slot".to_string()];
    for prefix in ["truth", "mean", "std"] {
        h.extend((1..=horizon).map(|k| format!("{prefix}_{k}")));
    }
    h.push("rmse".into());
    h.push("running_rmse".into());
    h
}

pub fn write_forecast_csv<W: std::io::Write>(rows: &[ForecastRow], horizon: usize, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(forecast_header(horizon))?;
    for r in rows {
        let mut rec = vec![r.slot.to_string()];
        rec.extend(r.truth.iter().chain(&r.mean).chain(&r.std).map(f64::to_string));
        rec.push(r.rmse.to_string());
        rec.push(r.running_rmse.to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_forecast_csv<R: std::io::Read>(r: R) -> Result<Vec<ForecastRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || (header.len() - 3) % 3 != 0 {
        bail!("not a forecast table: header has {} columns", header.len());
    }
    let h = (header.len() - 3) / 3;
    if header != forecast_header(h) {
        bail!("not a forecast table: unexpected header {header:?}");
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let f = |k: usize| -> Result<f64> {
            rec[k].parse().with_context(|| format!("row {}: bad `{}` value `{}`", i + 1, header[k], &rec[k]))
        };
        let block = |start: usize| (start..start + h).map(f).collect::<Result<Vec<_>>>();
        out.push(ForecastRow {
            slot: rec[0].parse().with_context(|| format!("row {}: bad slot `{}`", i + 1, &rec[0]))?,
            truth: block(1)?,
            mean: block(1 + h)?,
            std: block(1 + 2 * h)?,
            rmse: f(1 + 3 * h)?,
            running_rmse: f(2 + 3 * h)?,
        });
    }
    Ok(out)
}

/// Rolling forecast over a trace CSV.
pub fn cmd_forecast(spec: &ForecastSpec) -> Result<ForecastReport> {
    let cfg = match &spec.config {
        Some(p) => ForecastConfig::load(p)?,
        None => ForecastConfig::default(),
    };
    let column = pick_column(&spec.trace, cfg.column.as_deref())?;
    let series = traces::load_csv(&spec.trace, &column).with_context(|| format!("in trace {}", spec.trace.display()))?;
    let needed = cfg.window + cfg.horizon + 1;
    if series.len() < needed {
        bail!(
            "trace {} has {} slots but window {} + horizon {} needs at least {needed}",
            spec.trace.display(),
            series.len(),
            cfg.window,
            cfg.horizon
        );
    }
    let out = Output::open(&spec.out)?;
    let values = if cfg.normalize {
        traces::normalize(&series)?.0.values().to_vec()
    } else {
        series.values().to_vec()
    };
    let steps = gp::rolling_forecast(
        &values,
        &cfg.kernel,
        &RollingOptions {
            window: cfg.window,
            horizon: cfg.horizon,
            refit_every: cfg.refit_every,
            noise_std: cfg.noise_std,
            fit: cfg.fit.clone(),
        },
    )?;
    let mut total = 0.0;
    let rows: Vec<ForecastRow> = steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            total += s.rmse;
            ForecastRow {
                slot: series.start_slot + s.t - 1 + cfg.window,
                truth: s.truth.clone(),
                mean: s.forecast.mean.clone(),
                std: s.forecast.std(),
                rmse: s.rmse,
                running_rmse: total / (i + 1) as f64,
            }
        })
        .collect();
    let one_step = (rows.iter().map(|r| (r.mean[0] - r.truth[0]).powi(2)).sum::<f64>() / rows.len() as f64).sqrt();
    let summary = ForecastSummary {
        column,
        slots: rows.len(),
        window: cfg.window,
        horizon: cfg.horizon,
        mean_rmse: gp::mean_rmse(&steps),
        one_step_rmse: one_step,
    };
    out.transaction(|out| {
        let mut body = Vec::new();
        write_forecast_csv(&rows, cfg.horizon, &mut body)?;
        let a = out.write(FORECAST_FILE, &body)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(&summary)?;
        let b = out.write(FORECAST_SUMMARY_FILE, &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
        Ok(ForecastReport {
            rows,
            summary,
            files: vec![a, b],
        })
    })
}

pub fn read_forecast_summary<R: std::io::Read>(r: R) -> Result<ForecastSummary> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .next()
        .ok_or_else(|| anyhow!("empty forecast summary"))?
        .map_err(Into::into)
}

impl fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = self.stats[0];
        let buy = self.stats[3];
        write!(f, "{:<13}", self.strategy.to_string())?;
        if let Some(v) = self.value {
            write!(f, " {}={v:<6}", self.axis)?;
        }
        write!(
            f,
            " gamma {:.4} ± {:.4}  purchased {:.1} ± {:.1} kJ  ({} seed{})",
            g.mean,
            g.std,
            buy.mean / 1e3,
            buy.std / 1e3,
            self.seeds.len(),
            if self.seeds.len() == 1 { "" } else { "s" }
        )
    }
}
