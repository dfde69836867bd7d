//! Performance measures from event logs: per-movement time-averaged queue
//! lengths, per-vehicle delays, Little's-law residuals, and the scaling and
//! delay-band reports built over an experiment grid.

use crate::des::EventLog;
use crate::network::{Network, TurnKind};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    MissingBaseline { control: String },
    BadWindow(String),
}

impl std::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricsError::MissingBaseline { control } => {
                write!(f, "grid has no gain-1 baseline for control {control}")
            }
            MetricsError::BadWindow(msg) => write!(f, "bad window: {msg}"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// Per-movement statistics over the measurement window.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueStats {
    pub movement: u32,
    /// Time-averaged queue length, vehicles.
    pub mean_queue: f64,
    /// Mean queueing delay of hops joined in the window, seconds.
    pub mean_delay_s: Option<f64>,
    /// Departures whose queueing time is counted in `mean_delay_s`.
    pub served: u64,
    /// Hops that joined (or reached a full-link boundary) in the window but
    /// never departed.
    pub censored: u64,
    /// |N - lambda_e * D| / N with the served rate as lambda_e.
    pub little_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogSummary {
    pub warmup_s: f64,
    pub duration_s: f64,
    pub per_movement: Vec<QueueStats>,
    /// Network total: the sum of per-movement time averages.
    pub total_mean_queue: f64,
    /// Hop-weighted mean delay across all movements, seconds.
    pub mean_delay_s: Option<f64>,
    pub censored_total: u64,
}

/// Time averages and delays from a complete, time-ordered event log. The
/// queue integral only depends on the multiset of timestamped steps, so any
/// log re-sorted by the deterministic tie-break summarizes identically.
pub fn summarize(log: &EventLog, n_movements: usize, warmup_s: f64) -> Result<LogSummary, MetricsError> {
    if !(warmup_s >= 0.0 && warmup_s < log.duration_s) {
        return Err(MetricsError::BadWindow(format!(
            "warmup {warmup_s} outside [0, {})",
            log.duration_s
        )));
    }
    let window = log.duration_s - warmup_s;

    let mut level = vec![0i64; n_movements];
    let mut prev_t = vec![0.0f64; n_movements];
    let mut area = vec![0.0f64; n_movements];
    for ev in &log.events {
        use crate::des::EventKind::*;
        let delta = match ev.kind {
            ExogenousArrival | QueueJoin => 1i64,
            Departure => -1,
            _ => continue,
        };
        let mi = ev.movement.expect("vehicle events carry a movement") as usize;
        let lo = prev_t[mi].max(warmup_s);
        let hi = ev.time_s.max(warmup_s);
        area[mi] += level[mi] as f64 * (hi - lo);
        level[mi] += delta;
        prev_t[mi] = ev.time_s;
    }
    for mi in 0..n_movements {
        area[mi] += level[mi] as f64 * (log.duration_s - prev_t[mi].max(warmup_s));
    }

    let mut delay_sum = vec![0.0f64; n_movements];
    let mut served = vec![0u64; n_movements];
    let mut censored = vec![0u64; n_movements];
    for v in &log.vehicles {
        for hop in &v.hops {
            let mi = hop.movement as usize;
            let entered = if hop.joined_s.is_finite() { hop.joined_s } else { hop.arrived_s };
            if entered < warmup_s {
                continue;
            }
            match hop.departed_s {
                Some(dep) => {
                    delay_sum[mi] += dep - hop.joined_s;
                    served[mi] += 1;
                }
                None => censored[mi] += 1,
            }
        }
    }

    let per_movement: Vec<QueueStats> = (0..n_movements)
        .map(|mi| {
            let mean_queue = area[mi] / window;
            let mean_delay_s = if served[mi] > 0 {
                Some(delay_sum[mi] / served[mi] as f64)
            } else {
                None
            };
            let little_residual = match mean_delay_s {
                Some(d) if mean_queue > 0.0 => {
                    let lambda_e = served[mi] as f64 / window;
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

    let total_mean_queue = per_movement.iter().map(|q| q.mean_queue).sum();
    let total_served: u64 = served.iter().sum();
    let mean_delay_s = if total_served > 0 {
        Some(delay_sum.iter().sum::<f64>() / total_served as f64)
    } else {
        None
    };
    Ok(LogSummary {
        warmup_s,
        duration_s: log.duration_s,
        per_movement,
        total_mean_queue,
        mean_delay_s,
        censored_total: censored.iter().sum(),
    })
}

/// Hop-weighted mean delay over a subset of movements.
pub fn mean_delay_filtered(
    summary: &LogSummary,
    network: &Network,
    include_rt: Option<bool>,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0u64;
    for q in &summary.per_movement {
        let is_rt = network.movements[q.movement as usize].turn == TurnKind::Right;
        let keep = match include_rt {
            None => true,
            Some(true) => is_rt,
            Some(false) => !is_rt,
        };
        if keep {
            if let Some(d) = q.mean_delay_s {
                sum += d * q.served as f64;
                n += q.served;
            }
        }
    }
    if n > 0 {
        Some(sum / n as f64)
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Grid reports
// ---------------------------------------------------------------------------

/// Replication-averaged measures of one (gain, control) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub gain: f64,
    pub control: String,
    pub replications: usize,
    pub mean_total_queue: f64,
    pub mean_delay_s: Option<f64>,
    pub mean_delay_rt_s: Option<f64>,
    pub mean_delay_nonrt_s: Option<f64>,
    pub censored_total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub gain: f64,
    pub control: String,
    pub mean_total_queue: f64,
    /// Mean total queue divided by the gain-1 baseline of the same control.
    pub ratio_to_base: f64,
    /// Relative deviation of the ratio from the gain itself.
    pub dev_from_gain: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
    /// MP4-to-MP6 total-queue ratio per gain, where both controls ran.
    pub mp4_over_mp6: Vec<(f64, f64)>,
}

/// Deviations of the queue ratio from the gain beyond this fraction are
/// flagged in the report.
pub const RATIO_FLAG_TOL: f64 = 0.25;

/// Scaling report: per-control queue ratios against the gain-1 baseline.
pub fn ratio_table(cells: &[CellSummary]) -> Result<RatioReport, MetricsError> {
    let mut rows = Vec::new();
    let controls: Vec<String> = {
        let mut cs: Vec<String> = cells.iter().map(|c| c.control.clone()).collect();
        cs.sort();
        cs.dedup();
        cs
    };
    for control in &controls {
        let base = cells
            .iter()
            .find(|c| &c.control == control && c.gain == 1.0)
            .ok_or_else(|| MetricsError::MissingBaseline { control: control.clone() })?;
        let mut of_control: Vec<&CellSummary> =
            cells.iter().filter(|c| &c.control == control).collect();
        of_control.sort_by(|a, b| a.gain.total_cmp(&b.gain));
        for cell in of_control {
            let ratio = cell.mean_total_queue / base.mean_total_queue;
            let dev = (ratio / cell.gain - 1.0).abs();
            rows.push(RatioRow {
                gain: cell.gain,
                control: control.clone(),
                mean_total_queue: cell.mean_total_queue,
                ratio_to_base: ratio,
                dev_from_gain: dev,
                flagged: dev > RATIO_FLAG_TOL,
            });
        }
    }

    let mut gains: Vec<f64> = cells.iter().map(|c| c.gain).collect();
    gains.sort_by(f64::total_cmp);
    gains.dedup();
    let mut mp4_over_mp6 = Vec::new();
    for g in gains {
        let mp4 = cells.iter().find(|c| c.control == "mp4" && c.gain == g);
        let mp6 = cells.iter().find(|c| c.control == "mp6" && c.gain == g);
        if let (Some(a), Some(b)) = (mp4, mp6) {
            if b.mean_total_queue > 0.0 {
                mp4_over_mp6.push((g, a.mean_total_queue / b.mean_total_queue));
            }
        }
    }
    Ok(RatioReport { rows, mp4_over_mp6 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayBandRow {
    pub control: String,
    pub include_rt: bool,
    /// (gain, mean delay seconds), ascending in gain.
    pub delays: Vec<(f64, f64)>,
    /// (max - min) / mean over the gains, or None when no delays exist.
    pub band_width_frac: Option<f64>,
}

/// Per-control mean delays across the gain sweep, with and without
/// right-turn movements, and the relative width of each band.
pub fn delay_band(cells: &[CellSummary]) -> Vec<DelayBandRow> {
    let mut controls: Vec<String> = cells.iter().map(|c| c.control.clone()).collect();
    controls.sort();
    controls.dedup();
    let mut rows = Vec::new();
    for control in &controls {
        for include_rt in [true, false] {
            let mut delays: Vec<(f64, f64)> = cells
                .iter()
                .filter(|c| &c.control == control)
                .filter_map(|c| {
                    let d = if include_rt { c.mean_delay_s } else { c.mean_delay_nonrt_s };
                    d.map(|d| (c.gain, d))
                })
                .collect();
            delays.sort_by(|a, b| a.0.total_cmp(&b.0));
            let band_width_frac = if delays.len() >= 2 {
                let lo = delays.iter().map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
                let hi = delays.iter().map(|(_, d)| *d).fold(f64::NEG_INFINITY, f64::max);
                let mean = delays.iter().map(|(_, d)| *d).sum::<f64>() / delays.len() as f64;
                Some((hi - lo) / mean)
            } else {
                None
            };
            rows.push(DelayBandRow {
                control: control.clone(),
                include_rt,
                delays,
                band_width_frac,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::des::{simulate, ControlMode, DesOptions, EventKind, EventLog, Hop, RngConfig, SimEvent, VehicleRecord};
    use crate::scenario::two_intersection_scenario;

    fn hand_log() -> EventLog {
        // Two vehicles through movement 0: queued 10 s and 20 s.
        let ev = |time_s: f64, kind: EventKind, vehicle: u64| SimEvent {
            time_s,
            kind,
            intersection: Some(0),
            movement: Some(0),
            vehicle: Some(vehicle),
            phase: None,
        };
        EventLog {
            duration_s: 100.0,
            control: "ft".into(),
            events: vec![
                ev(10.0, EventKind::ExogenousArrival, 0),
                ev(20.0, EventKind::ExogenousArrival, 1),
                ev(20.0, EventKind::Departure, 0),
                ev(40.0, EventKind::Departure, 1),
            ],
            vehicles: vec![
                VehicleRecord {
                    id: 0,
                    origin_link: 0,
                    hops: vec![Hop {
                        movement: 0,
                        arrived_s: 10.0,
                        joined_s: 10.0,
                        departed_s: Some(20.0),
                    }],
                    exited_s: Some(20.0),
                    exit_link: Some(1),
                },
                VehicleRecord {
                    id: 1,
                    origin_link: 0,
                    hops: vec![Hop {
                        movement: 0,
                        arrived_s: 20.0,
                        joined_s: 20.0,
                        departed_s: Some(40.0),
                    }],
                    exited_s: Some(40.0),
                    exit_link: Some(1),
                },
            ],
            dropped: vec![0],
            offered: vec![2],
            exited: 2,
            final_queued: 0,
            final_in_transit: 0,
            final_at_boundary: 0,
        }
    }

    #[test]
    fn hand_built_log_statistics() {
        let summary = summarize(&hand_log(), 1, 0.0).unwrap();
        assert_eq!(summary.per_movement[0].mean_delay_s, Some(15.0));
        assert_eq!(summary.per_movement[0].served, 2);
        assert_eq!(summary.per_movement[0].censored, 0);
        // Queue occupancy: one vehicle on [10,20), one on [20,40) = 30 veh-s.
        assert!((summary.total_mean_queue - 30.0 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn empty_log_summarizes_to_zeros() {
        let mut log = hand_log();
        log.events.clear();
        log.vehicles.clear();
        log.exited = 0;
        log.offered = vec![0];
        let summary = summarize(&log, 1, 0.0).unwrap();
        assert_eq!(summary.total_mean_queue, 0.0);
        assert_eq!(summary.mean_delay_s, None);
        assert_eq!(summary.censored_total, 0);
    }

    #[test]
    fn warmup_excludes_early_occupancy() {
        let summary = summarize(&hand_log(), 1, 25.0).unwrap();
        // After t=25 only vehicle 1 occupies the queue, for 15 s of 75.
        assert!((summary.total_mean_queue - 15.0 / 75.0).abs() < 1e-12);
        // Delays count hops joined after the warmup: only vehicle 1 at 20 s
        // joined before 25, so nothing is counted.
        assert_eq!(summary.per_movement[0].served, 0);
    }

    #[test]
    fn summaries_are_insensitive_to_tie_order() {
        let scenario = two_intersection_scenario();
        let log = simulate(
            &scenario,
            ControlMode::FixedTime,
            1800.0,
            RngConfig::new(3, 0),
            DesOptions::default(),
        )
        .unwrap();
        let n = scenario.network.n_movements();
        let base = summarize(&log, n, 300.0).unwrap();

        let mut shuffled = log.clone();
        shuffled.events.reverse();
        shuffled.events.sort_by(|a, b| {
            a.time_s
                .total_cmp(&b.time_s)
                .then_with(|| a.kind.cmp(&b.kind))
                .then_with(|| a.movement.cmp(&b.movement))
                .then_with(|| a.vehicle.cmp(&b.vehicle))
        });
        let resorted = summarize(&shuffled, n, 300.0).unwrap();
        assert_eq!(base.total_mean_queue, resorted.total_mean_queue);
        assert_eq!(base.mean_delay_s, resorted.mean_delay_s);
        for (a, b) in base.per_movement.iter().zip(&resorted.per_movement) {
            assert_eq!(a.mean_queue, b.mean_queue);
        }
    }

    #[test]
    fn network_total_is_sum_of_movement_means() {
        let scenario = two_intersection_scenario();
        let log = simulate(
            &scenario,
            ControlMode::FixedTime,
            1800.0,
            RngConfig::new(5, 1),
            DesOptions::default(),
        )
        .unwrap();
        let summary = summarize(&log, scenario.network.n_movements(), 0.0).unwrap();
        let sum: f64 = summary.per_movement.iter().map(|q| q.mean_queue).sum();
        assert_eq!(summary.total_mean_queue, sum);
    }

    #[test]
    fn little_residual_is_small_for_a_stable_queue() {
        let scenario = crate::scenario::single_queue_scenario(600.0, 1800.0, None, 120.0, 60.0);
        let log = simulate(
            &scenario,
            ControlMode::FixedTime,
            40_000.0,
            RngConfig::new(9, 0),
            DesOptions::default(),
        )
        .unwrap();
        let summary = summarize(&log, 1, 600.0).unwrap();
        let q = &summary.per_movement[0];
        assert!(q.mean_queue > 0.0);
        assert!(
            q.little_residual.unwrap() < 0.05,
            "residual {:?}",
            q.little_residual
        );
    }

    fn cell(gain: f64, control: &str, queue: f64, delay: f64) -> CellSummary {
        CellSummary {
            gain,
            control: control.into(),
            replications: 1,
            mean_total_queue: queue,
            mean_delay_s: Some(delay),
            mean_delay_rt_s: Some(delay * 0.3),
            mean_delay_nonrt_s: Some(delay),
            censored_total: 0,
        }
    }

    #[test]
    fn ratio_table_computes_ratios_and_mp_comparison() {
        let cells = vec![
            cell(1.0, "ft", 100.0, 15.0),
            cell(2.0, "ft", 210.0, 15.5),
            cell(1.0, "mp4", 80.0, 12.0),
            cell(2.0, "mp4", 150.0, 12.1),
            cell(1.0, "mp6", 50.0, 8.0),
            cell(2.0, "mp6", 100.0, 8.2),
        ];
        let report = ratio_table(&cells).unwrap();
        let ft2 = report
            .rows
            .iter()
            .find(|r| r.control == "ft" && r.gain == 2.0)
            .unwrap();
        assert!((ft2.ratio_to_base - 2.1).abs() < 1e-12);
        assert!(!ft2.flagged);
        assert_eq!(report.mp4_over_mp6.len(), 2);
        assert!((report.mp4_over_mp6[0].1 - 1.6).abs() < 1e-12);
        assert!((report.mp4_over_mp6[1].1 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn ratio_table_requires_a_baseline() {
        let cells = vec![cell(2.0, "ft", 210.0, 15.5)];
        assert!(matches!(
            ratio_table(&cells),
            Err(MetricsError::MissingBaseline { .. })
        ));
    }

    #[test]
    fn delay_band_reports_width() {
        let cells = vec![
            cell(1.0, "ft", 100.0, 14.0),
            cell(2.0, "ft", 210.0, 15.0),
            cell(3.0, "ft", 320.0, 16.0),
        ];
        let rows = delay_band(&cells);
        let without = rows.iter().find(|r| r.control == "ft" && !r.include_rt).unwrap();
        assert_eq!(without.delays.len(), 3);
        assert!((without.band_width_frac.unwrap() - 2.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn delay_band_flags_empty_series() {
        let mut c = cell(1.0, "ft", 100.0, 14.0);
        c.mean_delay_rt_s = None;
        c.mean_delay_s = None;
        c.mean_delay_nonrt_s = None;
        let rows = delay_band(&[c]);
        for row in rows {
            assert!(row.delays.is_empty());
            assert_eq!(row.band_width_frac, None);
        }
    }
}
