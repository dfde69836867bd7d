//! Per-movement service-rate schedules and signal controllers: fixed-time
//! plans built from cycle/green/offset, and the max-pressure phase selector.

use crate::network::{Intersection, Movement, MovementIdx, RoutingMatrix};

/// Fixed-time service window for a single movement: green starts `offset_s`
/// into the cycle and lasts `green_s`, repeating with `cycle_s`. The speedup
/// factor divides the cycle while preserving the green ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedTimePlan {
    pub cycle_s: f64,
    pub offset_s: f64,
    pub green_s: f64,
    pub g_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalError {
    BadPlan(String),
    EmptyPhaseTable,
}

impl std::fmt::Display for SignalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SignalError::BadPlan(msg) => write!(f, "bad signal plan: {msg}"),
            SignalError::EmptyPhaseTable => write!(f, "intersection has an empty phase table"),
        }
    }
}

impl std::error::Error for SignalError {}

impl FixedTimePlan {
    pub fn new(cycle_s: f64, offset_s: f64, green_s: f64) -> Result<Self, SignalError> {
        Self::with_speedup(cycle_s, offset_s, green_s, 1.0)
    }

    pub fn with_speedup(
        cycle_s: f64,
        offset_s: f64,
        green_s: f64,
        g_speed: f64,
    ) -> Result<Self, SignalError> {
        if !(cycle_s > 0.0) {
            return Err(SignalError::BadPlan("cycle must be positive".into()));
        }
        if !(0.0..cycle_s).contains(&offset_s) {
            return Err(SignalError::BadPlan("offset must lie in [0, cycle)".into()));
        }
        if !(green_s > 0.0 && green_s <= cycle_s) {
            return Err(SignalError::BadPlan("green must lie in (0, cycle]".into()));
        }
        if !(g_speed > 0.0) {
            return Err(SignalError::BadPlan("g_speed must be positive".into()));
        }
        Ok(Self { cycle_s, offset_s, green_s, g_speed })
    }

    /// True if the movement is served at time `t`.
    pub fn is_green(&self, t: f64) -> bool {
        let phase = (self.g_speed * t - self.offset_s).rem_euclid(self.cycle_s);
        phase < self.green_s
    }

    /// The period of the sped-up plan.
    pub fn period_s(&self) -> f64 {
        self.cycle_s / self.g_speed
    }
}

/// Service rate of a fixed-time movement: the saturation flow during green,
/// zero during red.
pub fn service_rate_vph(plan: &FixedTimePlan, saturation_flow_vph: f64, t: f64) -> f64 {
    if plan.is_green(t) {
        saturation_flow_vph
    } else {
        0.0
    }
}

/// Effective green ratio g/T; invariant under speedup since both durations
/// divide by the same factor.
pub fn green_ratio(plan: &FixedTimePlan) -> f64 {
    plan.green_s / plan.cycle_s
}

// ---------------------------------------------------------------------------
// Piecewise-constant periodic schedules (used by the fluid integrator)
// ---------------------------------------------------------------------------

/// Exact periodic on/off service schedule for one movement. Segments are
/// half-open `[start, start+len)` intervals within the period, sorted and
/// non-overlapping.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Always { rate_vph: f64 },
    Periodic { period_s: f64, windows: Vec<(f64, f64)>, rate_vph: f64 },
}

impl Schedule {
    /// Builds the normalized schedule from green windows given as
    /// (start-offset, duration) pairs in unsped cycle coordinates. Windows
    /// that wrap past the cycle end are split.
    pub fn periodic(
        cycle_s: f64,
        g_speed: f64,
        raw_windows: &[(f64, f64)],
        rate_vph: f64,
    ) -> Schedule {
        let mut windows: Vec<(f64, f64)> = Vec::new();
        for &(start, len) in raw_windows {
            let s = start.rem_euclid(cycle_s);
            if s + len <= cycle_s + 1e-12 {
                windows.push((s, len.min(cycle_s - s)));
            } else {
                windows.push((s, cycle_s - s));
                windows.push((0.0, s + len - cycle_s));
            }
        }
        windows.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Merge touching windows.
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (s, l) in windows {
            if let Some(last) = merged.last_mut() {
                if s <= last.0 + last.1 + 1e-12 {
                    let end = (s + l).max(last.0 + last.1);
                    last.1 = end - last.0;
                    continue;
                }
            }
            merged.push((s, l));
        }
        let total: f64 = merged.iter().map(|(_, l)| l).sum();
        if total >= cycle_s - 1e-12 {
            return Schedule::Always { rate_vph };
        }
        Schedule::Periodic {
            period_s: cycle_s / g_speed,
            windows: merged
                .into_iter()
                .map(|(s, l)| (s / g_speed, l / g_speed))
                .collect(),
            rate_vph,
        }
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        match self {
            Schedule::Always { rate_vph } => *rate_vph,
            Schedule::Periodic { period_s, windows, rate_vph } => {
                let u = t.rem_euclid(*period_s);
                for &(s, l) in windows {
                    if u >= s && u < s + l {
                        return *rate_vph;
                    }
                }
                0.0
            }
        }
    }

    /// Next time strictly after `t` at which the rate changes.
    pub fn next_change_after(&self, t: f64) -> Option<f64> {
        match self {
            Schedule::Always { .. } => None,
            Schedule::Periodic { period_s, windows, .. } => {
                let mut best = f64::INFINITY;
                for &(s, l) in windows {
                    for boundary in [s, s + l] {
                        // Smallest n with boundary + n * period > t.
                        let n = ((t - boundary) / period_s).floor() + 1.0;
                        let mut cand = boundary + n * period_s;
                        if cand <= t {
                            cand += period_s;
                        }
                        // Guard against overshooting by one period due to fp.
                        if cand - period_s > t {
                            cand -= period_s;
                        }
                        best = best.min(cand);
                    }
                }
                Some(best)
            }
        }
    }

    /// Total time the schedule is on within `[t0, t1)`, exact.
    pub fn on_time_in(&self, t0: f64, t1: f64) -> f64 {
        match self {
            Schedule::Always { .. } => t1 - t0,
            Schedule::Periodic { period_s, windows, .. } => {
                let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| -> f64 {
                    (a1.min(b1) - a0.max(b0)).max(0.0)
                };
                let mut total = 0.0;
                let n0 = (t0 / period_s).floor();
                let n1 = (t1 / period_s).ceil();
                let mut n = n0;
                while n < n1 {
                    let base = n * period_s;
                    for &(s, l) in windows {
                        total += overlap(t0, t1, base + s, base + s + l);
                    }
                    n += 1.0;
                }
                total
            }
        }
    }

    pub fn mean_rate_vph(&self) -> f64 {
        match self {
            Schedule::Always { rate_vph } => *rate_vph,
            Schedule::Periodic { period_s, windows, rate_vph } => {
                rate_vph * windows.iter().map(|(_, l)| l).sum::<f64>() / period_s
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Max pressure
// ---------------------------------------------------------------------------

/// Max-pressure configuration: `switches_per_cycle` equally spaced decision
/// instants per reference cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPressureConfig {
    pub cycle_s: f64,
    pub switches_per_cycle: u32,
    /// Service time lost at each phase switch. The paper's models ignore
    /// lost time, so this defaults to zero.
    pub lost_time_s: f64,
}

impl MaxPressureConfig {
    pub fn new(cycle_s: f64, switches_per_cycle: u32) -> Result<Self, SignalError> {
        if !(cycle_s > 0.0) || switches_per_cycle == 0 {
            return Err(SignalError::BadPlan(
                "need positive cycle and at least one switch per cycle".into(),
            ));
        }
        Ok(Self { cycle_s, switches_per_cycle, lost_time_s: 0.0 })
    }

    pub fn decision_interval_s(&self) -> f64 {
        self.cycle_s / self.switches_per_cycle as f64
    }
}

/// Picks the phase with maximal pressure.
///
/// The weight of movement j is its own queue minus the routing-weighted
/// queues immediately downstream; the pressure of a phase is the sum of
/// saturation-flow-weighted movement weights. Ties break to the lowest phase
/// index, so an all-empty intersection rests in phase 0.
pub fn max_pressure_decide(
    queues: &[f64],
    intersection: &Intersection,
    movements: &[Movement],
    routing: &RoutingMatrix,
) -> Result<usize, SignalError> {
    if intersection.phases.is_empty() {
        return Err(SignalError::EmptyPhaseTable);
    }
    let weight = |j: MovementIdx| -> f64 {
        let downstream: f64 = routing.row(j).iter().map(|&(i, p)| p * queues[i]).sum();
        queues[j] - downstream
    };
    let mut best = 0usize;
    let mut best_pressure = f64::NEG_INFINITY;
    for (k, phase) in intersection.phases.iter().enumerate() {
        let pressure: f64 = phase
            .movements
            .iter()
            .map(|&j| movements[j].saturation_flow_vph * weight(j))
            .sum();
        if pressure > best_pressure {
            best_pressure = pressure;
            best = k;
        }
    }
    Ok(best)
}
