//! Event-driven exact integrator for the delayed fluid network dynamics.
//!
//! Between events every arrival and service rate is constant, so queue
//! trajectories are exactly piecewise linear; the integrator advances from
//! breakpoint to breakpoint with no discretization error. Events are signal
//! switches, queues hitting zero, link occupancies hitting capacity, boundary
//! buffers emptying, and delayed arrival-rate changes propagated from
//! upstream departure breakpoints.
//!
//! Finite storage: when a link is at capacity, exogenous inflow in excess of
//! the admissible rate is dropped and logged; routed inflow already in
//! transit is held in a per-movement boundary buffer that is admitted, in
//! movement-id order, as service frees space. Queue trajectories stay
//! continuous and vehicles are conserved exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::network::{MovementIdx, Network};
use crate::scenario::{Scenario, SignalSpec};
use crate::signal::Schedule;

const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq)]
pub enum FluidError {
    BadInput(String),
    /// Routing over a zero-travel-time link would couple departure rates
    /// instantaneously; the integrator requires a positive transfer delay.
    ZeroDelayRouting { link: String },
    /// Only fixed-time (or always-served) schedules can drive the fluid
    /// model.
    UnsupportedControl { intersection: String },
    EventExplosion { at_time_s: f64, events: usize },
    /// A queue went materially negative; indicates an integrator bug.
    NegativeQueue { movement: MovementIdx, at_time_s: f64, value: f64 },
}

impl std::fmt::Display for FluidError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FluidError::BadInput(msg) => write!(f, "bad input: {msg}"),
            FluidError::ZeroDelayRouting { link } => {
                write!(f, "link {link} carries routed flow but has zero travel time")
            }
            FluidError::UnsupportedControl { intersection } => {
                write!(f, "intersection {intersection}: fluid model needs fixed-time control")
            }
            FluidError::EventExplosion { at_time_s, events } => {
                write!(f, "event explosion: {events} events by t = {at_time_s} s")
            }
            FluidError::NegativeQueue { movement, at_time_s, value } => {
                write!(f, "queue {movement} went negative ({value}) at t = {at_time_s} s")
            }
        }
    }
}

impl std::error::Error for FluidError {}

#[derive(Debug, Clone, Copy)]
pub struct FluidOptions {
    pub max_events: usize,
}

impl Default for FluidOptions {
    fn default() -> Self {
        FluidOptions { max_events: 20_000_000 }
    }
}

/// Piecewise record of one movement. `queue` holds (t, x) breakpoints of the
/// continuous piecewise-linear trajectory; the rate fields hold (t, rate)
/// steps in vehicles per second, each constant until the next step.
#[derive(Debug, Clone, Default)]
pub struct MovementTrace {
    pub queue: Vec<(f64, f64)>,
    pub departure_rate_ps: Vec<(f64, f64)>,
    pub admitted_rate_ps: Vec<(f64, f64)>,
    pub drop_rate_ps: Vec<(f64, f64)>,
    pub buffer: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct FluidTrajectory {
    pub horizon_s: f64,
    pub traces: Vec<MovementTrace>,
    /// Exogenous vehicles dropped at full entry links, per movement.
    pub dropped: Vec<f64>,
    /// Cumulative admitted arrivals per movement over the whole run.
    pub arrivals: Vec<f64>,
    /// Cumulative departures per movement over the whole run.
    pub departures: Vec<f64>,
    pub events: usize,
}

fn eval_piecewise_linear(points: &[(f64, f64)], t: f64) -> f64 {
    match points.binary_search_by(|(pt, _)| pt.total_cmp(&t)) {
        Ok(k) => points[k].1,
        Err(0) => points[0].1,
        Err(k) if k == points.len() => points[k - 1].1,
        Err(k) => {
            let (t0, x0) = points[k - 1];
            let (t1, x1) = points[k];
            x0 + (x1 - x0) * (t - t0) / (t1 - t0)
        }
    }
}

fn integrate_step(points: &[(f64, f64)], t0: f64, t1: f64) -> f64 {
    // Integral of a right-continuous step function over [t0, t1).
    let mut total = 0.0;
    for (k, &(ts, v)) in points.iter().enumerate() {
        let te = points.get(k + 1).map(|p| p.0).unwrap_or(f64::INFINITY);
        let lo = ts.max(t0);
        let hi = te.min(t1);
        if hi > lo {
            total += v * (hi - lo);
        }
    }
    total
}

impl FluidTrajectory {
    pub fn queue_at(&self, movement: MovementIdx, t: f64) -> f64 {
        eval_piecewise_linear(&self.traces[movement].queue, t)
    }

    /// Exact time average of the piecewise-linear queue over `[t0, t1]`.
    pub fn average_queue(
        &self,
        movement: MovementIdx,
        t0: f64,
        t1: f64,
    ) -> Result<f64, FluidError> {
        if !(t0 >= 0.0 && t1 > t0 && t1 <= self.horizon_s + 1e-9) {
            return Err(FluidError::BadInput(format!(
                "window [{t0}, {t1}] outside trajectory horizon {}",
                self.horizon_s
            )));
        }
        let pts = &self.traces[movement].queue;
        let mut total = 0.0;
        let mut prev_t = t0;
        let mut prev_x = self.queue_at(movement, t0);
        for &(t, x) in pts.iter().filter(|(t, _)| *t > t0 && *t < t1) {
            total += 0.5 * (prev_x + x) * (t - prev_t);
            prev_t = t;
            prev_x = x;
        }
        let end_x = self.queue_at(movement, t1);
        total += 0.5 * (prev_x + end_x) * (t1 - prev_t);
        Ok(total / (t1 - t0))
    }

    /// Vehicles departing movement `movement` during `[t0, t1)`.
    pub fn departures_in(&self, movement: MovementIdx, t0: f64, t1: f64) -> f64 {
        integrate_step(&self.traces[movement].departure_rate_ps, t0, t1)
    }

    pub fn arrivals_in(&self, movement: MovementIdx, t0: f64, t1: f64) -> f64 {
        integrate_step(&self.traces[movement].admitted_rate_ps, t0, t1)
    }

    pub fn dropped_in(&self, movement: MovementIdx, t0: f64, t1: f64) -> f64 {
        integrate_step(&self.traces[movement].drop_rate_ps, t0, t1)
    }

    pub fn departure_rate_at(&self, movement: MovementIdx, t: f64) -> f64 {
        step_value(&self.traces[movement].departure_rate_ps, t)
    }

    pub fn admitted_rate_at(&self, movement: MovementIdx, t: f64) -> f64 {
        step_value(&self.traces[movement].admitted_rate_ps, t)
    }

    pub fn breakpoint_times(&self, movement: MovementIdx) -> Vec<f64> {
        self.traces[movement].queue.iter().map(|(t, _)| *t).collect()
    }
}

fn step_value(points: &[(f64, f64)], t: f64) -> f64 {
    match points.binary_search_by(|(pt, _)| pt.total_cmp(&t)) {
        Ok(k) => points[k].1,
        Err(0) => 0.0,
        Err(k) => points[k - 1].1,
    }
}

/// Builds per-movement service schedules from a scenario's fixed-time plans.
/// A movement's green windows are the phases that contain it; always-served
/// movements run at their saturation flow continuously.
pub fn fluid_schedules(scenario: &Scenario) -> Result<Vec<Schedule>, FluidError> {
    let net = &scenario.network;
    let mut schedules = Vec::with_capacity(net.n_movements());
    for (mi, m) in net.movements.iter().enumerate() {
        if m.always_served {
            schedules.push(Schedule::Always { rate_vph: m.saturation_flow_vph });
            continue;
        }
        let ipos = net
            .intersections
            .iter()
            .position(|i| i.id == m.intersection)
            .ok_or_else(|| FluidError::BadInput(format!("movement {mi} has no intersection")))?;
        match &scenario.signals[ipos] {
            SignalSpec::FixedTime(plan) => {
                let windows: Vec<(f64, f64)> = net.intersections[ipos]
                    .phases
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.movements.contains(&mi))
                    .map(|(k, _)| (plan.phase_start_s(k), plan.phase_greens_s[k]))
                    .collect();
                if windows.is_empty() {
                    return Err(FluidError::BadInput(format!(
                        "movement {} is in no phase",
                        m.key()
                    )));
                }
                schedules.push(Schedule::periodic(
                    plan.cycle_s,
                    plan.g_speed,
                    &windows,
                    m.saturation_flow_vph,
                ));
            }
            SignalSpec::MaxPressure(_) => {
                return Err(FluidError::UnsupportedControl {
                    intersection: m.intersection.clone(),
                })
            }
        }
    }
    Ok(schedules)
}

/// Schedule with its rate scaled (service-rate homogeneity) leaving timing
/// untouched.
pub fn scale_schedule(s: &Schedule, gain: f64) -> Schedule {
    match s {
        Schedule::Always { rate_vph } => Schedule::Always { rate_vph: rate_vph * gain },
        Schedule::Periodic { period_s, windows, rate_vph } => Schedule::Periodic {
            period_s: *period_s,
            windows: windows.clone(),
            rate_vph: rate_vph * gain,
        },
    }
}

/// Schedule played `factor` times faster: same rates, all times divided.
pub fn speed_schedule(s: &Schedule, factor: f64) -> Schedule {
    match s {
        Schedule::Always { rate_vph } => Schedule::Always { rate_vph: *rate_vph },
        Schedule::Periodic { period_s, windows, rate_vph } => Schedule::Periodic {
            period_s: period_s / factor,
            windows: windows.iter().map(|(s, l)| (s / factor, l / factor)).collect(),
            rate_vph: *rate_vph,
        },
    }
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// A delayed arrival-rate change: at `time`, the contribution of `source`
/// into `target` becomes `rate_ps`.
#[derive(Debug, Clone, Copy)]
struct RateEvent {
    time: f64,
    target: MovementIdx,
    source: MovementIdx,
    rate_ps: f64,
    seq: u64,
}

impl PartialEq for RateEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for RateEvent {}
impl PartialOrd for RateEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for RateEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for the min-heap and ordered by (time, target, source,
        // seq) so that later-scheduled updates to the same contribution win.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.target.cmp(&self.target))
            .then_with(|| other.source.cmp(&self.source))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Engine<'a> {
    net: &'a Network,
    schedules: &'a [Schedule],
    opts: FluidOptions,
    t: f64,
    horizon: f64,
    // Per movement.
    x: Vec<f64>,
    buf: Vec<f64>,
    c_ps: Vec<f64>,
    exo_ps: Vec<f64>,
    contribs: Vec<Vec<(MovementIdx, f64)>>,
    b_ps: Vec<f64>,
    queue_in_ps: Vec<f64>,
    drop_ps: Vec<f64>,
    buf_in_ps: Vec<f64>,
    buf_out_ps: Vec<f64>,
    tau_s: Vec<f64>,
    // Per link.
    link_movements: Vec<Vec<MovementIdx>>,
    link_cap: Vec<Option<f64>>,
    pinned: Vec<bool>,
    heap: BinaryHeap<RateEvent>,
    seq: u64,
    events: usize,
    // Output accumulation.
    traces: Vec<MovementTrace>,
    cum_in: Vec<f64>,
    cum_out: Vec<f64>,
    cum_drop: Vec<f64>,
}

/// Integrates the network dynamics from `x0` to `horizon_s` under the given
/// per-movement service schedules.
pub fn integrate(
    network: &Network,
    schedules: &[Schedule],
    x0: &[f64],
    horizon_s: f64,
    opts: FluidOptions,
) -> Result<FluidTrajectory, FluidError> {
    if schedules.len() != network.n_movements() || x0.len() != network.n_movements() {
        return Err(FluidError::BadInput(
            "schedules and x0 must have one entry per movement".into(),
        ));
    }
    if x0.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(FluidError::BadInput("initial queues must be finite and >= 0".into()));
    }
    if !(horizon_s > 0.0) {
        return Err(FluidError::BadInput("horizon must be positive".into()));
    }
    for j in 0..network.n_movements() {
        if !network.routing.row(j).is_empty() && network.transfer_delay_s(j) <= 0.0 {
            return Err(FluidError::ZeroDelayRouting {
                link: network.movements[j].to.clone(),
            });
        }
    }

    let n = network.n_movements();
    let mut link_movements = vec![Vec::new(); network.links.len()];
    for (mi, m) in network.movements.iter().enumerate() {
        let li = network
            .link_idx(&m.from)
            .ok_or_else(|| FluidError::BadInput(format!("movement {mi} has a dangling link")))?;
        link_movements[li].push(mi);
    }
    let link_cap: Vec<Option<f64>> =
        network.links.iter().map(|l| l.storage_capacity.map(|k| k as f64)).collect();
    // Sanity: initial occupancies must respect capacities.
    for (li, cap) in link_cap.iter().enumerate() {
        if let Some(k) = cap {
            let occ: f64 = link_movements[li].iter().map(|&mi| x0[mi]).sum();
            if occ > *k + 1e-9 {
                return Err(FluidError::BadInput(format!(
                    "initial occupancy {occ} exceeds capacity {k} on link {}",
                    network.links[li].id
                )));
            }
        }
    }

    let contribs: Vec<Vec<(MovementIdx, f64)>> = {
        let mut by_target = vec![Vec::new(); n];
        for j in 0..n {
            for &(i, p) in network.routing.row(j) {
                if p > 0.0 {
                    by_target[i].push((j, 0.0));
                }
            }
        }
        for row in &mut by_target {
            row.sort_by_key(|(j, _)| *j);
        }
        by_target
    };

    let mut engine = Engine {
        net: network,
        schedules,
        opts,
        t: 0.0,
        horizon: horizon_s,
        x: x0.to_vec(),
        buf: vec![0.0; n],
        c_ps: vec![0.0; n],
        exo_ps: network.demand.rates_vph.iter().map(|r| r / SECONDS_PER_HOUR).collect(),
        contribs,
        b_ps: vec![0.0; n],
        queue_in_ps: vec![0.0; n],
        drop_ps: vec![0.0; n],
        buf_in_ps: vec![0.0; n],
        buf_out_ps: vec![0.0; n],
        tau_s: (0..n).map(|j| network.transfer_delay_s(j)).collect(),
        link_movements,
        link_cap,
        pinned: vec![false; network.links.len()],
        heap: BinaryHeap::new(),
        seq: 0,
        events: 0,
        traces: vec![MovementTrace::default(); n],
        cum_in: vec![0.0; n],
        cum_out: vec![0.0; n],
        cum_drop: vec![0.0; n],
    };
    engine.run()?;
    Ok(FluidTrajectory {
        horizon_s,
        traces: engine.traces,
        dropped: engine.cum_drop,
        arrivals: engine.cum_in,
        departures: engine.cum_out,
        events: engine.events,
    })
}

impl Engine<'_> {
    fn run(&mut self) -> Result<(), FluidError> {
        let n = self.net.n_movements();
        self.resolve_all(true);
        for i in 0..n {
            self.traces[i].queue.push((0.0, self.x[i]));
            self.traces[i].buffer.push((0.0, 0.0));
        }

        loop {
            self.events += 1;
            if self.events > self.opts.max_events {
                return Err(FluidError::EventExplosion {
                    at_time_s: self.t,
                    events: self.events,
                });
            }

            // Next event time: schedule switches, state hits, delayed rate
            // arrivals, or the horizon.
            let mut t_next = self.horizon;
            for sched in self.schedules.iter() {
                if let Some(ts) = sched.next_change_after(self.t) {
                    t_next = t_next.min(ts);
                }
            }
            let mut zero_hits: Vec<(f64, MovementIdx)> = Vec::new();
            let mut cap_hits: Vec<(f64, usize)> = Vec::new();
            let mut buf_hits: Vec<(f64, MovementIdx)> = Vec::new();
            for i in 0..n {
                let xdot = self.queue_in_ps[i] - self.b_ps[i];
                if self.x[i] > 0.0 && xdot < 0.0 {
                    let th = self.t + self.x[i] / -xdot;
                    zero_hits.push((th, i));
                    t_next = t_next.min(th);
                }
                let bufdot = self.buf_in_ps[i] - self.buf_out_ps[i];
                if self.buf[i] > 0.0 && bufdot < 0.0 {
                    let th = self.t + self.buf[i] / -bufdot;
                    buf_hits.push((th, i));
                    t_next = t_next.min(th);
                }
            }
            for (li, cap) in self.link_cap.iter().enumerate() {
                if let Some(k) = cap {
                    if !self.pinned[li] {
                        let occ: f64 =
                            self.link_movements[li].iter().map(|&mi| self.x[mi]).sum();
                        let od: f64 = self.link_movements[li]
                            .iter()
                            .map(|&mi| self.queue_in_ps[mi] - self.b_ps[mi])
                            .sum();
                        if od > 0.0 && occ < *k {
                            let th = self.t + (k - occ) / od;
                            cap_hits.push((th, li));
                            t_next = t_next.min(th);
                        } else if occ >= *k && od > 0.0 {
                            cap_hits.push((self.t, li));
                            t_next = self.t;
                        }
                    }
                }
            }
            if let Some(ev) = self.heap.peek() {
                if ev.time <= self.horizon {
                    t_next = t_next.min(ev.time);
                }
            }

            // Advance all state linearly to t_next.
            let dt = t_next - self.t;
            debug_assert!(dt >= 0.0, "time must not run backwards");
            for i in 0..n {
                let xdot = self.queue_in_ps[i] - self.b_ps[i];
                self.x[i] += xdot * dt;
                if self.x[i] < 0.0 {
                    if self.x[i] > -1e-9 {
                        self.x[i] = 0.0;
                    } else {
                        return Err(FluidError::NegativeQueue {
                            movement: i,
                            at_time_s: t_next,
                            value: self.x[i],
                        });
                    }
                }
                self.buf[i] += (self.buf_in_ps[i] - self.buf_out_ps[i]) * dt;
                if self.buf[i] < 0.0 {
                    self.buf[i] = 0.0;
                }
                self.cum_in[i] += self.queue_in_ps[i] * dt;
                self.cum_out[i] += self.b_ps[i] * dt;
                self.cum_drop[i] += self.drop_ps[i] * dt;
            }
            self.t = t_next;

            if t_next >= self.horizon {
                for i in 0..n {
                    self.traces[i].queue.push((self.horizon, self.x[i]));
                    self.traces[i].buffer.push((self.horizon, self.buf[i]));
                }
                return Ok(());
            }

            // Apply events at t_next in deterministic class order: signal
            // switches are realized by re-reading the schedules inside
            // resolve_all; capacity pins, then buffer-empty snaps, then
            // zero-hit snaps, then delayed rate changes.
            for &(th, li) in &cap_hits {
                if th == t_next {
                    self.pinned[li] = true;
                }
            }
            for &(th, i) in &buf_hits {
                if th == t_next {
                    self.buf[i] = 0.0;
                }
            }
            for &(th, i) in &zero_hits {
                if th == t_next {
                    self.x[i] = 0.0;
                }
            }
            while let Some(ev) = self.heap.peek() {
                if ev.time > t_next {
                    break;
                }
                let ev = self.heap.pop().expect("peeked event exists");
                let row = &mut self.contribs[ev.target];
                if let Some(entry) = row.iter_mut().find(|(j, _)| *j == ev.source) {
                    entry.1 = ev.rate_ps;
                }
            }

            self.resolve_all(false);
        }
    }

    /// Recomputes service rates, departures, admissions and buffer flows for
    /// the current instant, records changed steps, and schedules delayed
    /// downstream contribution changes for every departure-rate change.
    fn resolve_all(&mut self, initial: bool) {
        let n = self.net.n_movements();
        let t = self.t;
        for i in 0..n {
            self.c_ps[i] = self.schedules[i].rate_at(t) / SECONDS_PER_HOUR;
        }
        let b_prev = self.b_ps.clone();
        let qin_prev = self.queue_in_ps.clone();
        let drop_prev = self.drop_ps.clone();
        let xdot_prev: Vec<f64> =
            (0..n).map(|i| qin_prev[i] - b_prev[i]).collect();

        for li in 0..self.net.links.len() {
            if self.link_movements[li].is_empty() {
                continue;
            }
            // Unpin links whose buffers have drained and whose pressure has
            // relaxed; the pinned resolve below re-checks and may unpin.
            self.resolve_link(li);
        }

        for i in 0..n {
            let xdot = self.queue_in_ps[i] - self.b_ps[i];
            if initial || self.b_ps[i] != b_prev[i] {
                self.traces[i].departure_rate_ps.push((t, self.b_ps[i]));
                // Propagate the new rate downstream after the link delay.
                for &(target, p) in self.net.routing.row(i) {
                    if p > 0.0 {
                        self.seq += 1;
                        self.heap.push(RateEvent {
                            time: t + self.tau_s[i],
                            target,
                            source: i,
                            rate_ps: self.b_ps[i] * p,
                            seq: self.seq,
                        });
                    }
                }
            }
            if initial || self.queue_in_ps[i] != qin_prev[i] {
                self.traces[i].admitted_rate_ps.push((t, self.queue_in_ps[i]));
            }
            if initial || self.drop_ps[i] != drop_prev[i] {
                self.traces[i].drop_rate_ps.push((t, self.drop_ps[i]));
            }
            if !initial && xdot != xdot_prev[i] {
                self.traces[i].queue.push((t, self.x[i]));
                self.traces[i].buffer.push((t, self.buf[i]));
            }
        }
    }

    fn att_routed(&self, i: MovementIdx) -> f64 {
        self.contribs[i].iter().map(|(_, r)| r).sum()
    }

    fn resolve_link(&mut self, li: usize) {
        let members = self.link_movements[li].clone();
        let cap = self.link_cap[li];

        if cap.is_none() || !self.pinned[li] {
            // Free-flowing: everything is admitted.
            for &i in &members {
                let att = self.exo_ps[i] + self.att_routed(i);
                self.b_ps[i] = if self.x[i] > 0.0 {
                    self.c_ps[i]
                } else {
                    att.min(self.c_ps[i])
                };
                self.queue_in_ps[i] = att;
                self.drop_ps[i] = 0.0;
                self.buf_in_ps[i] = 0.0;
                self.buf_out_ps[i] = 0.0;
            }
            return;
        }

        // Pinned at capacity: admissions are limited to the service drained
        // from queued movements; boundary buffers take priority in
        // movement-id order, exogenous excess is dropped, routed excess is
        // buffered.
        let mut remaining: f64 =
            members.iter().filter(|&&i| self.x[i] > 0.0).map(|&i| self.c_ps[i]).sum();
        let any_buffer = members.iter().any(|&i| self.buf[i] > 0.0);
        for &i in &members {
            let att_routed = self.att_routed(i);
            let att = self.exo_ps[i] + att_routed;
            if self.buf[i] > 0.0 {
                // Buffered stock feeds the queue with priority; new routed
                // flow joins the buffer behind it, exogenous flow is lost.
                let pass = if self.x[i] > 0.0 { 0.0 } else { self.c_ps[i] };
                self.b_ps[i] = self.c_ps[i];
                self.buf_out_ps[i] = pass + remaining;
                self.queue_in_ps[i] = self.buf_out_ps[i];
                self.buf_in_ps[i] = att_routed;
                self.drop_ps[i] = self.exo_ps[i];
                remaining = 0.0;
            } else if self.x[i] > 0.0 {
                self.b_ps[i] = self.c_ps[i];
                let adm = att.min(remaining);
                remaining -= adm;
                self.queue_in_ps[i] = adm;
                let blocked = att - adm;
                let routed_share = if att > 0.0 { att_routed / att } else { 0.0 };
                self.buf_in_ps[i] = blocked * routed_share;
                self.drop_ps[i] = blocked * (1.0 - routed_share);
                self.buf_out_ps[i] = 0.0;
            } else {
                // Empty queue on a full link: inflow up to the service rate
                // passes straight through without consuming storage.
                let pass = att.min(self.c_ps[i]);
                self.b_ps[i] = pass;
                let excess = att - pass;
                let adm = excess.min(remaining);
                remaining -= adm;
                self.queue_in_ps[i] = pass + adm;
                let blocked = excess - adm;
                let routed_share = if att > 0.0 { att_routed / att } else { 0.0 };
                self.buf_in_ps[i] = blocked * routed_share;
                self.drop_ps[i] = blocked * (1.0 - routed_share);
                self.buf_out_ps[i] = 0.0;
            }
        }
        if remaining > 0.0 && !any_buffer {
            // Admissions no longer exhaust the drained service: occupancy
            // falls strictly, so the link leaves the pinned regime.
            self.pinned[li] = false;
            for &i in &members {
                let att = self.exo_ps[i] + self.att_routed(i);
                self.b_ps[i] = if self.x[i] > 0.0 {
                    self.c_ps[i]
                } else {
                    att.min(self.c_ps[i])
                };
                self.queue_in_ps[i] = att;
                self.drop_ps[i] = 0.0;
                self.buf_in_ps[i] = 0.0;
                self.buf_out_ps[i] = 0.0;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scaling checks
// ---------------------------------------------------------------------------

/// Integrates the base system and the gain-scaled system (initial queues,
/// demands and service rates all multiplied) and returns the maximum
/// relative deviation of the scaled trajectory from `gain * x(t)` over all
/// movements and breakpoints of either run.
pub fn check_homogeneity(
    network: &Network,
    schedules: &[Schedule],
    x0: &[f64],
    gain: f64,
    horizon_s: f64,
) -> Result<f64, FluidError> {
    if !(gain > 0.0) {
        return Err(FluidError::BadInput("gain must be positive".into()));
    }
    let base = integrate(network, schedules, x0, horizon_s, FluidOptions::default())?;
    let scaled_net = network
        .scale(gain)
        .map_err(|e| FluidError::BadInput(e.to_string()))?;
    let scaled_scheds: Vec<Schedule> =
        schedules.iter().map(|s| scale_schedule(s, gain)).collect();
    let scaled_x0: Vec<f64> = x0.iter().map(|x| x * gain).collect();
    let scaled = integrate(&scaled_net, &scaled_scheds, &scaled_x0, horizon_s, FluidOptions::default())?;

    let mut dev = 0.0f64;
    for i in 0..network.n_movements() {
        let mut times = base.breakpoint_times(i);
        times.extend(scaled.breakpoint_times(i));
        times.sort_by(f64::total_cmp);
        for t in times {
            let want = gain * base.queue_at(i, t);
            let got = scaled.queue_at(i, t);
            dev = dev.max((got - want).abs() / (1.0 + want));
        }
    }
    Ok(dev)
}

/// Integrates the base system over `horizon_s` and the sped-up system over
/// `horizon_s / speedup`, and returns the maximum relative deviation from
/// the exact rescaling `z(t) = x(speedup * t) / speedup`.
///
/// Speeding up compresses every timing in the dynamics: service windows,
/// cycle times, offsets, and the link travel times (the delayed-arrival term
/// evaluates upstream departures at `speedup * t - tau`, which the sped
/// system reproduces only with delays `tau / speedup`). Initial queues are
/// divided by the factor.
pub fn check_speedup(
    network: &Network,
    schedules: &[Schedule],
    x0: &[f64],
    speedup: f64,
    horizon_s: f64,
) -> Result<f64, FluidError> {
    if !(speedup > 0.0) {
        return Err(FluidError::BadInput("speedup must be positive".into()));
    }
    let base = integrate(network, schedules, x0, horizon_s, FluidOptions::default())?;
    let sped_scheds: Vec<Schedule> =
        schedules.iter().map(|s| speed_schedule(s, speedup)).collect();
    let sped_x0: Vec<f64> = x0.iter().map(|x| x / speedup).collect();
    let mut sped_net = network.clone();
    for link in &mut sped_net.links {
        link.travel_time_s /= speedup;
    }
    let sped = integrate(
        &sped_net,
        &sped_scheds,
        &sped_x0,
        horizon_s / speedup,
        FluidOptions::default(),
    )?;

    let mut dev = 0.0f64;
    for i in 0..network.n_movements() {
        let mut times: Vec<f64> = sped.breakpoint_times(i);
        times.extend(base.breakpoint_times(i).iter().map(|t| t / speedup));
        times.sort_by(f64::total_cmp);
        for t in times {
            if t > horizon_s / speedup {
                continue;
            }
            let want = base.queue_at(i, speedup * t) / speedup;
            let got = sped.queue_at(i, t);
            dev = dev.max((got - want).abs() / (1.0 + want));
        }
    }
    Ok(dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{
        single_queue_scenario, two_intersection_scenario,
    };

    const H: f64 = 3600.0;

    /// The single-queue example: demand 10 vph, red for one hour then green
    /// at 30 vph, two-hour cycle.
    fn base_case(gain: f64, cap: Option<u32>) -> (crate::network::Network, Vec<Schedule>) {
        let scenario = single_queue_scenario(10.0 * gain, 30.0 * gain, cap, 2.0 * H, H);
        let schedules = fluid_schedules(&scenario).unwrap();
        (scenario.network, schedules)
    }

    #[test]
    fn single_queue_base_trajectory() {
        let (net, scheds) = base_case(1.0, None);
        let traj = integrate(&net, &scheds, &[0.0], 4.0 * H, FluidOptions::default()).unwrap();
        // Peak at end of red.
        assert!((traj.queue_at(0, H) - 10.0).abs() < 1e-9);
        // Drains at 20 vph, empty 1800 s into green.
        assert!((traj.queue_at(0, H + 1800.0) - 0.0).abs() < 1e-9);
        assert!((traj.queue_at(0, 0.5 * H) - 5.0).abs() < 1e-9);
        // Periodic: second cycle peak matches.
        assert!((traj.queue_at(0, 3.0 * H) - 10.0).abs() < 1e-9);
        // Average queue over one period: (1/2)(5 + 2.5) = 3.75.
        let avg = traj.average_queue(0, 0.0, 2.0 * H).unwrap();
        assert!((avg - 3.75).abs() < 1e-9);
        // No drops without capacity.
        assert_eq!(traj.dropped[0], 0.0);
    }

    #[test]
    fn single_queue_scaled_three_infinite_capacity() {
        let (net, scheds) = base_case(3.0, None);
        let traj = integrate(&net, &scheds, &[0.0], 4.0 * H, FluidOptions::default()).unwrap();
        assert!((traj.queue_at(0, H) - 30.0).abs() < 1e-9);
        // Mean service capacity is 45 vph; served equals the demand 30 vph.
        assert!((scheds[0].mean_rate_vph() - 45.0).abs() < 1e-12);
        let served = traj.departures_in(0, 0.0, 2.0 * H) / 2.0;
        assert!((served - 30.0).abs() < 1e-9);
    }

    #[test]
    fn single_queue_finite_capacity_blocks_and_throttles_throughput() {
        let (net, scheds) = base_case(3.0, Some(20));
        let traj = integrate(&net, &scheds, &[0.0], 8.0 * H, FluidOptions::default()).unwrap();
        // Queue saturates at 20 vehicles two-thirds into the red.
        assert!((traj.queue_at(0, 2.0 / 3.0 * H) - 20.0).abs() < 1e-9);
        assert!((traj.queue_at(0, H) - 20.0).abs() < 1e-9);
        // Ten vehicles dropped per period, throughput 25 vph = 5/9 of 45.
        let dropped = traj.dropped_in(0, 0.0, 2.0 * H);
        assert!((dropped - 10.0).abs() < 1e-9);
        let served = traj.departures_in(0, 0.0, 2.0 * H) / 2.0;
        assert!((served - 25.0).abs() < 1e-9);
        assert!((served / scheds[0].mean_rate_vph() - 5.0 / 9.0).abs() < 1e-9);
        // Steady periodicity across later cycles.
        let served_late = traj.departures_in(0, 4.0 * H, 6.0 * H) / 2.0;
        assert!((served_late - 25.0).abs() < 1e-9);
    }

    #[test]
    fn speedup_three_removes_blocking() {
        // Gain 3, capacity 20, cycle compressed threefold.
        let (net, scheds) = base_case(3.0, Some(20));
        let fast: Vec<Schedule> = scheds.iter().map(|s| speed_schedule(s, 3.0)).collect();
        let traj = integrate(&net, &fast, &[0.0], 4.0 * H, FluidOptions::default()).unwrap();
        // Peak is 10 vehicles, under the 20-vehicle cap: no drops.
        assert!((traj.queue_at(0, H / 3.0) - 10.0).abs() < 1e-9);
        assert_eq!(traj.dropped[0], 0.0);
        let served = traj.departures_in(0, 0.0, 2.0 * H) / 2.0;
        assert!((served - 30.0).abs() < 1e-9);
        assert!((fast[0].mean_rate_vph() - 45.0).abs() < 1e-12);
    }

    /// At demand equal to the full mean capacity, the slow cycle loses
    /// vehicles to blocking while the sped-up cycle delivers all 45 vph.
    #[test]
    fn speedup_restores_full_capacity_throughput() {
        let scenario = single_queue_scenario(45.0, 90.0, Some(20), 2.0 * H, H);
        let scheds = fluid_schedules(&scenario).unwrap();
        let slow =
            integrate(&scenario.network, &scheds, &[0.0], 8.0 * H, FluidOptions::default())
                .unwrap();
        let slow_served = slow.departures_in(0, 4.0 * H, 6.0 * H) / 2.0;
        assert!((slow_served - 32.5).abs() < 1e-9);
        assert!(slow.dropped_in(0, 4.0 * H, 6.0 * H) > 1.0);

        let fast: Vec<Schedule> = scheds.iter().map(|s| speed_schedule(s, 3.0)).collect();
        let sped =
            integrate(&scenario.network, &fast, &[0.0], 8.0 * H, FluidOptions::default())
                .unwrap();
        assert_eq!(sped.dropped[0], 0.0);
        let served = sped.departures_in(0, 4.0 * H, 6.0 * H) / 2.0;
        assert!((served - 45.0).abs() < 1e-9);
    }

    #[test]
    fn network_conservation_and_service_bounds() {
        let scenario = two_intersection_scenario();
        let net = &scenario.network;
        let scheds = fluid_schedules(&scenario).unwrap();
        let x0 = vec![0.0; net.n_movements()];
        let traj = integrate(net, &scheds, &x0, 2.0 * H, FluidOptions::default()).unwrap();
        for i in 0..net.n_movements() {
            let in_i = traj.arrivals[i];
            let out_i = traj.departures[i];
            let xt = traj.queue_at(i, 2.0 * H);
            assert!(
                (xt - (in_i - out_i)).abs() < 1e-9 * (1.0 + in_i),
                "conservation violated on movement {i}: x={xt} in={in_i} out={out_i}"
            );
            // Departure rate never exceeds the schedule rate.
            for &(t, b) in &traj.traces[i].departure_rate_ps {
                let c = scheds[i].rate_at(t) / 3600.0;
                assert!(b <= c + 1e-15, "b={b} > c={c} at t={t} on movement {i}");
            }
            // Queues stay non-negative at all breakpoints.
            for &(_, x) in &traj.traces[i].queue {
                assert!(x >= 0.0);
            }
        }
    }

    /// Delay bookkeeping: the admitted arrival rate equals the exogenous
    /// rate plus the routing-weighted upstream departure rates one link
    /// delay earlier, replayed exactly from the recorded steps.
    #[test]
    fn delayed_arrivals_replay_exactly() {
        let scenario = two_intersection_scenario();
        let net = &scenario.network;
        let scheds = fluid_schedules(&scenario).unwrap();
        let x0 = vec![0.0; net.n_movements()];
        let traj = integrate(net, &scheds, &x0, H, FluidOptions::default()).unwrap();
        for i in 0..net.n_movements() {
            for k in 0..40 {
                let t = 40.0 + k as f64 * 77.3;
                let mut expect = net.demand.rates_vph[i] / 3600.0;
                for j in 0..net.n_movements() {
                    let p = net.routing.get(j, i);
                    if p > 0.0 {
                        let tau = net.transfer_delay_s(j);
                        if t >= tau {
                            expect += p * traj.departure_rate_at(j, t - tau);
                        }
                    }
                }
                let got = traj.admitted_rate_at(i, t);
                assert!(
                    (got - expect).abs() < 1e-12,
                    "movement {i} at t={t}: admitted {got} vs replay {expect}"
                );
            }
        }
    }

    #[test]
    fn homogeneity_identity_and_threefold() {
        let scenario = two_intersection_scenario();
        let net = &scenario.network;
        let scheds = fluid_schedules(&scenario).unwrap();
        let x0 = vec![0.0; net.n_movements()];
        let dev1 = check_homogeneity(net, &scheds, &x0, 1.0, H).unwrap();
        assert_eq!(dev1, 0.0);
        let dev3 = check_homogeneity(net, &scheds, &x0, 3.0, H).unwrap();
        assert!(dev3 <= 1e-9, "deviation {dev3}");
        // Non-zero initial state as well.
        let x0: Vec<f64> = (0..net.n_movements()).map(|i| (i % 4) as f64 * 2.5).collect();
        let dev = check_homogeneity(net, &scheds, &x0, 2.0, H).unwrap();
        assert!(dev <= 1e-9, "deviation {dev}");
    }

    #[test]
    fn homogeneity_breaks_under_blocking() {
        let (net, scheds) = base_case(1.0, Some(20));
        let dev = check_homogeneity(&net, &scheds, &[0.0], 3.0, 4.0 * H).unwrap();
        assert!(dev > 0.1, "blocking must break homogeneity, got {dev}");
    }

    #[test]
    fn speedup_identity_and_rescaling() {
        let scenario = two_intersection_scenario();
        let net = &scenario.network;
        let scheds = fluid_schedules(&scenario).unwrap();
        let x0 = vec![0.0; net.n_movements()];
        assert_eq!(check_speedup(net, &scheds, &x0, 1.0, H).unwrap(), 0.0);
        let dev = check_speedup(net, &scheds, &x0, 1.5, 2.0 * H).unwrap();
        assert!(dev <= 1e-9, "deviation {dev}");
        let x0: Vec<f64> = (0..net.n_movements()).map(|i| (i % 3) as f64 * 3.0).collect();
        let dev = check_speedup(net, &scheds, &x0, 3.0, 2.0 * H).unwrap();
        assert!(dev <= 1e-9, "deviation {dev}");
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (net, scheds) = base_case(1.0, None);
        assert!(matches!(
            integrate(&net, &scheds, &[-1.0], H, FluidOptions::default()),
            Err(FluidError::BadInput(_))
        ));
        assert!(matches!(
            integrate(&net, &scheds, &[0.0], -5.0, FluidOptions::default()),
            Err(FluidError::BadInput(_))
        ));
        let explosion = integrate(
            &net,
            &scheds,
            &[0.0],
            100.0 * H,
            FluidOptions { max_events: 10 },
        );
        assert!(matches!(explosion, Err(FluidError::EventExplosion { .. })));
    }

    #[test]
    fn zero_delay_routing_is_rejected() {
        let mut scenario = two_intersection_scenario();
        let li = scenario.network.link_idx("ab").unwrap();
        scenario.network.links[li].travel_time_s = 0.0;
        let scheds = fluid_schedules(&scenario).unwrap();
        let x0 = vec![0.0; scenario.network.n_movements()];
        let err = integrate(&scenario.network, &scheds, &x0, H, FluidOptions::default());
        assert!(matches!(err, Err(FluidError::ZeroDelayRouting { .. })));
    }

    #[test]
    fn max_pressure_scenarios_are_not_integrable() {
        let mut scenario = two_intersection_scenario();
        scenario.signals[0] = crate::scenario::SignalSpec::MaxPressure(crate::scenario::MpPlan {
            cycle_s: 120.0,
            switches_per_cycle: 4,
        });
        assert!(matches!(
            fluid_schedules(&scenario),
            Err(FluidError::UnsupportedControl { .. })
        ));
    }
}
