//! Experiment harness: runs the gain-sweep times control-mode grid over a
//! scenario, replication by replication, and persists manifests, summaries
//! and reports as flat CSV files.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::des::{simulate, ControlMode, DesOptions, EventLog, RngConfig};
use crate::fluid::{fluid_schedules, integrate, FluidOptions};
use crate::metrics::{
    delay_band, mean_delay_filtered, ratio_table, summarize, CellSummary, DelayBandRow,
    LogSummary, QueueStats, RatioReport,
};
use crate::network::TurnKind;
use crate::scenario::Scenario;

#[derive(Debug)]
pub enum ExperimentError {
    Io(std::io::Error),
    Csv(csv::Error),
    BadGrid(String),
    Report(String),
}

impl std::fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExperimentError::Io(e) => write!(f, "io error: {e}"),
            ExperimentError::Csv(e) => write!(f, "csv error: {e}"),
            ExperimentError::BadGrid(msg) => write!(f, "bad experiment grid: {msg}"),
            ExperimentError::Report(msg) => write!(f, "report error: {msg}"),
        }
    }
}

impl std::error::Error for ExperimentError {}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e)
    }
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Csv(e)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub gains: Vec<f64>,
    pub controls: Vec<ControlMode>,
    pub replications: u64,
    pub master_seed: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
}

impl ExperimentGrid {
    fn validate(&self) -> Result<(), ExperimentError> {
        if self.gains.is_empty() || self.gains.iter().any(|g| !(*g > 0.0)) {
            return Err(ExperimentError::BadGrid("gains must be positive".into()));
        }
        if self.controls.is_empty() {
            return Err(ExperimentError::BadGrid("need at least one control".into()));
        }
        if self.replications < 1 {
            return Err(ExperimentError::BadGrid("need at least one replication".into()));
        }
        if !(self.duration_s > 0.0 && self.warmup_s >= 0.0 && self.warmup_s < self.duration_s) {
            return Err(ExperimentError::BadGrid("need 0 <= warmup < duration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Des,
    Fluid,
}

impl Backend {
    fn label(&self) -> &'static str {
        match self {
            Backend::Des => "des",
            Backend::Fluid => "fluid",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub backend: Backend,
    pub out_dir: Option<PathBuf>,
    /// Also write per-replication raw event and vehicle CSVs. Off by
    /// default: a full grid of raw logs runs to gigabytes.
    pub save_logs: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions { backend: Backend::Des, out_dir: None, save_logs: false }
    }
}

/// Replication-averaged per-movement statistics of one cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub gain: f64,
    pub control: String,
    pub summary: Option<CellSummary>,
    pub per_movement: Vec<QueueStats>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub cells: Vec<CellOutcome>,
    pub ratios: Option<RatioReport>,
    pub delay_bands: Vec<DelayBandRow>,
}

/// Executes every (gain, control, replication) cell, aggregates summaries,
/// writes the result set to `out_dir` when given, and returns the scaling
/// and delay reports. Individual cell failures are recorded and the grid
/// continues.
pub fn run_experiment(
    scenario: &Scenario,
    grid: &ExperimentGrid,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport, ExperimentError> {
    grid.validate()?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        write_manifest(dir, scenario, grid, opts)?;
    }

    let n = scenario.network.n_movements();
    let cells: Vec<(f64, ControlMode)> = grid
        .gains
        .iter()
        .flat_map(|g| grid.controls.iter().map(move |c| (*g, *c)))
        .collect();

    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|(gain, control)| run_cell(scenario, grid, opts, *gain, *control, n))
        .collect();

    let summaries: Vec<CellSummary> =
        outcomes.iter().filter_map(|c| c.summary.clone()).collect();
    let ratios = ratio_table(&summaries).ok();
    let bands = delay_band(&summaries);

    if let Some(dir) = &opts.out_dir {
        write_summaries(dir, scenario, &outcomes)?;
        write_reports(dir, ratios.as_ref(), &bands)?;
    }
    Ok(ExperimentReport { cells: outcomes, ratios, delay_bands: bands })
}

fn run_cell(
    scenario: &Scenario,
    grid: &ExperimentGrid,
    opts: &ExperimentOptions,
    gain: f64,
    control: ControlMode,
    n: usize,
) -> CellOutcome {
    let scaled = match scenario.scaled(gain) {
        Ok(s) => s,
        Err(e) => {
            return CellOutcome {
                gain,
                control: control.label(),
                summary: None,
                per_movement: Vec::new(),
                error: Some(e.to_string()),
            }
        }
    };
    let result = match opts.backend {
        Backend::Des => run_des_cell(&scaled, grid, opts, gain, control, n),
        Backend::Fluid => match control {
            ControlMode::FixedTime => run_fluid_cell(&scaled, grid, n),
            other => Err(format!(
                "fluid backend supports fixed-time control only, got {}",
                other.label()
            )),
        },
    };
    match result {
        Ok((summaries, logs)) => {
            if let (Some(dir), true) = (&opts.out_dir, opts.save_logs) {
                if let Err(e) = persist_logs(dir, &scaled, gain, &control.label(), &logs) {
                    return CellOutcome {
                        gain,
                        control: control.label(),
                        summary: None,
                        per_movement: Vec::new(),
                        error: Some(format!("persisting logs: {e}")),
                    };
                }
            }
            let (cell, per_movement) =
                aggregate_cell(scenario, gain, &control.label(), grid, &summaries);
            CellOutcome {
                gain,
                control: control.label(),
                summary: Some(cell),
                per_movement,
                error: None,
            }
        }
        Err(e) => CellOutcome {
            gain,
            control: control.label(),
            summary: None,
            per_movement: Vec::new(),
            error: Some(e),
        },
    }
}

type CellRunOutput = (Vec<LogSummary>, Vec<EventLog>);

fn run_des_cell(
    scaled: &Scenario,
    grid: &ExperimentGrid,
    opts: &ExperimentOptions,
    _gain: f64,
    control: ControlMode,
    n: usize,
) -> Result<CellRunOutput, String> {
    let mut summaries = Vec::new();
    let mut logs = Vec::new();
    for rep in 0..grid.replications {
        let log = simulate(
            scaled,
            control,
            grid.duration_s,
            RngConfig::new(grid.master_seed, rep),
            DesOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        log.check_conservation().map_err(|e| format!("conservation: {e}"))?;
        summaries.push(summarize(&log, n, grid.warmup_s).map_err(|e| e.to_string())?);
        if opts.save_logs {
            logs.push(log);
        }
    }
    Ok((summaries, logs))
}

/// The fluid backend integrates the deterministic dynamics once per cell and
/// derives per-movement delays from Little's law.
fn run_fluid_cell(
    scaled: &Scenario,
    grid: &ExperimentGrid,
    n: usize,
) -> Result<CellRunOutput, String> {
    let schedules = fluid_schedules(scaled).map_err(|e| e.to_string())?;
    let x0 = vec![0.0; n];
    let traj = integrate(
        &scaled.network,
        &schedules,
        &x0,
        grid.duration_s,
        FluidOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut per_movement = Vec::with_capacity(n);
    for mi in 0..n {
        let mean_queue = traj
            .average_queue(mi, grid.warmup_s, grid.duration_s)
            .map_err(|e| e.to_string())?;
        let served_veh = traj.departures_in(mi, grid.warmup_s, grid.duration_s);
        let lambda_e = served_veh / (grid.duration_s - grid.warmup_s);
        let mean_delay_s = if lambda_e > 0.0 { Some(mean_queue / lambda_e) } else { None };
        per_movement.push(QueueStats {
            movement: mi as u32,
            mean_queue,
            mean_delay_s,
            served: served_veh.round() as u64,
            censored: 0,
            little_residual: mean_delay_s.map(|_| 0.0),
        });
    }
    let total_mean_queue = per_movement.iter().map(|q| q.mean_queue).sum();
    let summary = LogSummary {
        warmup_s: grid.warmup_s,
        duration_s: grid.duration_s,
        per_movement,
        total_mean_queue,
        mean_delay_s: None,
        censored_total: 0,
    };
    Ok((vec![summary], Vec::new()))
}

fn aggregate_cell(
    scenario: &Scenario,
    gain: f64,
    control: &str,
    grid: &ExperimentGrid,
    summaries: &[LogSummary],
) -> (CellSummary, Vec<QueueStats>) {
    let n = scenario.network.n_movements();
    let reps = summaries.len();
    let mut queue_sum = vec![0.0f64; n];
    let mut delay_sum = vec![0.0f64; n];
    let mut served = vec![0u64; n];
    let mut censored = vec![0u64; n];
    for s in summaries {
        for q in &s.per_movement {
            let mi = q.movement as usize;
            queue_sum[mi] += q.mean_queue;
            if let Some(d) = q.mean_delay_s {
                delay_sum[mi] += d * q.served as f64;
            }
            served[mi] += q.served;
            censored[mi] += q.censored;
        }
    }
    let window = grid.duration_s - grid.warmup_s;
    let per_movement: Vec<QueueStats> = (0..n)
        .map(|mi| {
            let mean_queue = queue_sum[mi] / reps as f64;
            let mean_delay_s =
                if served[mi] > 0 { Some(delay_sum[mi] / served[mi] as f64) } else { None };
            let little_residual = match mean_delay_s {
                Some(d) if mean_queue > 0.0 => {
                    let lambda_e = served[mi] as f64 / (reps as f64 * window);
                    Some((mean_queue - lambda_e * d).abs() / mean_queue)
                }
                _ => None,
            };
            QueueStats {
                movement: mi as u32,
                mean_queue,
                mean_delay_s,
                served: served[mi],
                censored: censored[mi],
                little_residual,
            }
        })
        .collect();

    let weighted = |filter: Option<bool>| -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0u64;
        for (mi, q) in per_movement.iter().enumerate() {
            let is_rt = scenario.network.movements[mi].turn == TurnKind::Right;
            let keep = match filter {
                None => true,
                Some(rt) => rt == is_rt,
            };
            if keep {
                if let Some(d) = q.mean_delay_s {
                    sum += d * q.served as f64;
                    count += q.served;
                }
            }
        }
        if count > 0 {
            Some(sum / count as f64)
        } else {
            None
        }
    };

    let cell = CellSummary {
        gain,
        control: control.into(),
        replications: reps,
        mean_total_queue: per_movement.iter().map(|q| q.mean_queue).sum(),
        mean_delay_s: weighted(None),
        mean_delay_rt_s: weighted(Some(true)),
        mean_delay_nonrt_s: weighted(Some(false)),
        censored_total: per_movement.iter().map(|q| q.censored).sum(),
    };
    (cell, per_movement)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn scenario_hash(scenario: &Scenario) -> String {
    let mut hasher = Sha256::new();
    hasher.update(scenario.to_toml_string().as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(
    dir: &Path,
    scenario: &Scenario,
    grid: &ExperimentGrid,
    opts: &ExperimentOptions,
) -> Result<(), ExperimentError> {
    let mut f = std::fs::File::create(dir.join("manifest.toml"))?;
    writeln!(f, "code_version = \"{}\"", env!("CARGO_PKG_VERSION"))?;
    writeln!(f, "scenario_sha256 = \"{}\"", scenario_hash(scenario))?;
    writeln!(f, "backend = \"{}\"", opts.backend.label())?;
    writeln!(f, "master_seed = {}", grid.master_seed)?;
    writeln!(f, "replications = {}", grid.replications)?;
    writeln!(f, "duration_s = {}", grid.duration_s)?;
    writeln!(f, "warmup_s = {}", grid.warmup_s)?;
    writeln!(
        f,
        "gains = [{}]",
        grid.gains.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(", ")
    )?;
    writeln!(
        f,
        "controls = [{}]",
        grid.controls
            .iter()
            .map(|c| format!("\"{}\"", c.label()))
            .collect::<Vec<_>>()
            .join(", ")
    )?;
    Ok(())
}

/// Event-log CSV with the columns time_s, kind, intersection, from_link,
/// to_link, vehicle_id.
pub fn write_event_csv<W: std::io::Write>(
    log: &EventLog,
    scenario: &Scenario,
    mut out: W,
) -> Result<(), ExperimentError> {
    let net = &scenario.network;
    writeln!(out, "time_s,kind,intersection,from_link,to_link,vehicle_id")?;
    for ev in &log.events {
        let inter = ev
            .intersection
            .map(|i| net.intersections[i as usize].id.clone())
            .unwrap_or_default();
        let (from, to) = match ev.movement {
            Some(mi) => {
                let m = &net.movements[mi as usize];
                (m.from.clone(), m.to.clone())
            }
            None => (String::new(), String::new()),
        };
        let vid = ev.vehicle.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{inter},{from},{to},{vid}", ev.time_s, ev.kind.as_str())?;
    }
    Ok(())
}

/// Vehicle-record CSV with the columns vehicle_id, hop_index, movement,
/// join_s, depart_s.
pub fn write_vehicle_csv<W: std::io::Write>(
    log: &EventLog,
    scenario: &Scenario,
    mut out: W,
) -> Result<(), ExperimentError> {
    let net = &scenario.network;
    writeln!(out, "vehicle_id,hop_index,movement,join_s,depart_s")?;
    for v in &log.vehicles {
        for (k, hop) in v.hops.iter().enumerate() {
            let m = &net.movements[hop.movement as usize];
            let join = if hop.joined_s.is_finite() {
                hop.joined_s.to_string()
            } else {
                String::new()
            };
            let depart = hop.departed_s.map(|d| d.to_string()).unwrap_or_default();
            writeln!(out, "{},{k},{}>{},{join},{depart}", v.id, m.from, m.to)?;
        }
    }
    Ok(())
}

fn persist_logs(
    dir: &Path,
    scenario: &Scenario,
    gain: f64,
    control: &str,
    logs: &[EventLog],
) -> Result<(), ExperimentError> {
    let cell_dir = dir.join(format!("logs/g{gain}_{control}"));
    std::fs::create_dir_all(&cell_dir)?;
    for (rep, log) in logs.iter().enumerate() {
        let ev = std::fs::File::create(cell_dir.join(format!("rep{rep}_events.csv")))?;
        write_event_csv(log, scenario, std::io::BufWriter::new(ev))?;
        let vr = std::fs::File::create(cell_dir.join(format!("rep{rep}_vehicles.csv")))?;
        write_vehicle_csv(log, scenario, std::io::BufWriter::new(vr))?;
    }
    Ok(())
}

fn write_summaries(
    dir: &Path,
    scenario: &Scenario,
    outcomes: &[CellOutcome],
) -> Result<(), ExperimentError> {
    let net = &scenario.network;
    let mut w = csv::Writer::from_path(dir.join("queues.csv"))?;
    w.write_record([
        "gain",
        "control",
        "movement",
        "turn",
        "mean_queue",
        "mean_delay_s",
        "served",
        "censored",
        "little_residual",
    ])?;
    for cell in outcomes {
        for q in &cell.per_movement {
            let m = &net.movements[q.movement as usize];
            w.write_record([
                cell.gain.to_string(),
                cell.control.clone(),
                m.key(),
                format!("{:?}", m.turn).to_lowercase(),
                q.mean_queue.to_string(),
                q.mean_delay_s.map(|d| d.to_string()).unwrap_or_default(),
                q.served.to_string(),
                q.censored.to_string(),
                q.little_residual.map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(ExperimentError::Io)?;

    let mut w = csv::Writer::from_path(dir.join("totals.csv"))?;
    w.write_record([
        "gain",
        "control",
        "replications",
        "mean_total_queue",
        "mean_delay_s",
        "mean_delay_rt_s",
        "mean_delay_nonrt_s",
        "censored",
        "error",
    ])?;
    for cell in outcomes {
        match &cell.summary {
            Some(s) => w.write_record([
                s.gain.to_string(),
                s.control.clone(),
                s.replications.to_string(),
                s.mean_total_queue.to_string(),
                s.mean_delay_s.map(|d| d.to_string()).unwrap_or_default(),
                s.mean_delay_rt_s.map(|d| d.to_string()).unwrap_or_default(),
                s.mean_delay_nonrt_s.map(|d| d.to_string()).unwrap_or_default(),
                s.censored_total.to_string(),
                String::new(),
            ])?,
            None => w.write_record([
                cell.gain.to_string(),
                cell.control.clone(),
                "0".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                cell.error.clone().unwrap_or_default(),
            ])?,
        }
    }
    w.flush().map_err(ExperimentError::Io)?;
    Ok(())
}

fn write_reports(
    dir: &Path,
    ratios: Option<&RatioReport>,
    bands: &[DelayBandRow],
) -> Result<(), ExperimentError> {
    if let Some(report) = ratios {
        let mut w = csv::Writer::from_path(dir.join("ratios.csv"))?;
        w.write_record([
            "gain",
            "control",
            "mean_total_queue",
            "ratio_to_base",
            "dev_from_gain",
            "flagged",
        ])?;
        for r in &report.rows {
            w.write_record([
                r.gain.to_string(),
                r.control.clone(),
                r.mean_total_queue.to_string(),
                r.ratio_to_base.to_string(),
                r.dev_from_gain.to_string(),
                r.flagged.to_string(),
            ])?;
        }
        w.flush().map_err(ExperimentError::Io)?;

        let mut w = csv::Writer::from_path(dir.join("mp_ratio.csv"))?;
        w.write_record(["gain", "mp4_over_mp6_queue_ratio"])?;
        for (g, r) in &report.mp4_over_mp6 {
            w.write_record([g.to_string(), r.to_string()])?;
        }
        w.flush().map_err(ExperimentError::Io)?;
    }

    let mut w = csv::Writer::from_path(dir.join("delays.csv"))?;
    w.write_record(["control", "scope", "gain", "mean_delay_s"])?;
    for row in bands {
        let scope = if row.include_rt { "with_rt" } else { "without_rt" };
        for (g, d) in &row.delays {
            w.write_record([row.control.clone(), scope.into(), g.to_string(), d.to_string()])?;
        }
    }
    w.flush().map_err(ExperimentError::Io)?;

    let mut w = csv::Writer::from_path(dir.join("bands.csv"))?;
    w.write_record(["control", "scope", "band_width_frac"])?;
    for row in bands {
        let scope = if row.include_rt { "with_rt" } else { "without_rt" };
        w.write_record([
            row.control.clone(),
            scope.into(),
            row.band_width_frac.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(ExperimentError::Io)?;
    Ok(())
}

/// Rebuilds the ratio and delay reports from a persisted result directory.
pub fn report_from_dir(dir: &Path) -> Result<ExperimentReport, ExperimentError> {
    let mut rdr = csv::Reader::from_path(dir.join("totals.csv"))?;
    let mut cells = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let parse_opt = |s: &str| -> Option<f64> { s.parse().ok() };
        let error = record.get(8).unwrap_or_default();
        if !error.is_empty() {
            cells.push(CellOutcome {
                gain: record[0].parse().unwrap_or(f64::NAN),
                control: record[1].to_string(),
                summary: None,
                per_movement: Vec::new(),
                error: Some(error.to_string()),
            });
            continue;
        }
        let summary = CellSummary {
            gain: record[0]
                .parse()
                .map_err(|_| ExperimentError::Report("bad gain in totals.csv".into()))?,
            control: record[1].to_string(),
            replications: record[2].parse().unwrap_or(0),
            mean_total_queue: record[3]
                .parse()
                .map_err(|_| ExperimentError::Report("bad queue in totals.csv".into()))?,
            mean_delay_s: parse_opt(&record[4]),
            mean_delay_rt_s: parse_opt(&record[5]),
            mean_delay_nonrt_s: parse_opt(&record[6]),
            censored_total: record[7].parse().unwrap_or(0),
        };
        cells.push(CellOutcome {
            gain: summary.gain,
            control: summary.control.clone(),
            summary: Some(summary),
            per_movement: Vec::new(),
            error: None,
        });
    }
    let summaries: Vec<CellSummary> = cells.iter().filter_map(|c| c.summary.clone()).collect();
    let ratios = ratio_table(&summaries).ok();
    let bands = delay_band(&summaries);
    write_reports(dir, ratios.as_ref(), &bands)?;
    Ok(ExperimentReport { cells, ratios, delay_bands: bands })
}

/// Convenience wrapper used by tests and the on/off comparisons: mean delays
/// filtered to right turns or their complement, pooled over replications.
pub fn pooled_delay(
    scenario: &Scenario,
    summaries: &[LogSummary],
    include_rt: Option<bool>,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0u64;
    for s in summaries {
        if let Some(d) = mean_delay_filtered(s, &scenario.network, include_rt) {
            let served: u64 = s
                .per_movement
                .iter()
                .filter(|q| {
                    let is_rt =
                        scenario.network.movements[q.movement as usize].turn == TurnKind::Right;
                    match include_rt {
                        None => true,
                        Some(rt) => rt == is_rt,
                    }
                })
                .map(|q| q.served)
                .sum();
            sum += d * served as f64;
            n += served;
        }
    }
    if n > 0 {
        Some(sum / n as f64)
    } else {
        None
    }
}
