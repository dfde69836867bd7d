//! Stochastic point-queue simulator: Poisson exogenous arrivals, vertical
//! queues discharging at deterministic saturation-flow headways during green,
//! probabilistic routing, fixed link travel times, and fixed-time or
//! max-pressure signal control.
//!
//! Identical seeds produce bit-identical event logs. Simultaneous events are
//! processed in a fixed order: exogenous arrivals, queue joins, departures,
//! phase changes, then max-pressure decisions, with ties within a kind broken
//! by entity and vehicle ids.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::network::{MovementIdx, Network};
use crate::scenario::{Scenario, SignalSpec};
use crate::signal::max_pressure_decide;

const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq)]
pub enum DesError {
    BadConfig(String),
    EventExplosion { at_time_s: f64, events: usize },
}

impl std::fmt::Display for DesError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DesError::BadConfig(msg) => write!(f, "bad simulation config: {msg}"),
            DesError::EventExplosion { at_time_s, events } => {
                write!(f, "event explosion: {events} events by t = {at_time_s} s")
            }
        }
    }
}

impl std::error::Error for DesError {}

/// Signal control applied to every intersection of the scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlMode {
    /// The scenario's fixed-time plans; every intersection must carry one.
    FixedTime,
    /// Max pressure over the scenario's phase tables with the given number
    /// of decision instants per reference cycle.
    MaxPressure { switches_per_cycle: u32 },
    /// Validation mode: each movement's service toggles between on and off
    /// with exponential holding times, matching the memoryless on/off chain.
    RandomOnOff { gamma1_per_h: f64, gamma2_per_h: f64 },
}

impl ControlMode {
    pub fn label(&self) -> String {
        match self {
            ControlMode::FixedTime => "ft".into(),
            ControlMode::MaxPressure { switches_per_cycle } => {
                format!("mp{switches_per_cycle}")
            }
            ControlMode::RandomOnOff { .. } => "onoff".into(),
        }
    }
}

/// Master seed plus replication index; all per-stream seeds derive from the
/// pair, so replications are independent while a movement's demand stream is
/// common across compared runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngConfig {
    pub master_seed: u64,
    pub replication: u64,
}

impl RngConfig {
    pub fn new(master_seed: u64, replication: u64) -> Self {
        Self { master_seed, replication }
    }

    fn stream(&self, kind: u64, entity: u64) -> ChaCha8Rng {
        let mut h = splitmix(self.master_seed ^ 0x9e37_79b9_7f4a_7c15);
        h = splitmix(h ^ self.replication.wrapping_mul(0xff51_afd7_ed55_8ccd));
        h = splitmix(h ^ kind.wrapping_mul(0xc4ce_b9fe_1a85_ec53));
        h = splitmix(h ^ entity.wrapping_add(0x1656_67b1_9e37_79f9));
        ChaCha8Rng::seed_from_u64(h)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_DEMAND: u64 = 1;
const STREAM_ROUTING: u64 = 2;
const STREAM_ONOFF: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    ExogenousArrival = 0,
    QueueJoin = 1,
    Departure = 2,
    PhaseChange = 3,
    MpDecision = 4,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::ExogenousArrival => "exogenous_arrival",
            EventKind::QueueJoin => "queue_join",
            EventKind::Departure => "departure",
            EventKind::PhaseChange => "phase_change",
            EventKind::MpDecision => "mp_decision",
        }
    }
}

/// One record of the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time_s: f64,
    pub kind: EventKind,
    pub intersection: Option<u32>,
    pub movement: Option<u32>,
    pub vehicle: Option<u64>,
    pub phase: Option<u32>,
}

/// One queue visit of a vehicle: arrival at the queue boundary, the actual
/// join (later than the arrival only when the link was full), and the
/// departure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hop {
    pub movement: u32,
    pub arrived_s: f64,
    pub joined_s: f64,
    pub departed_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRecord {
    pub id: u64,
    pub origin_link: u32,
    pub hops: Vec<Hop>,
    pub exited_s: Option<f64>,
    pub exit_link: Option<u32>,
}

/// Complete output of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub duration_s: f64,
    pub control: String,
    pub events: Vec<SimEvent>,
    pub vehicles: Vec<VehicleRecord>,
    /// Exogenous arrivals dropped at full entry links, per movement.
    pub dropped: Vec<u64>,
    /// Total exogenous arrivals offered (admitted plus dropped), per
    /// movement.
    pub offered: Vec<u64>,
    pub exited: u64,
    pub final_queued: u64,
    pub final_in_transit: u64,
    pub final_at_boundary: u64,
}

impl EventLog {
    /// Exact vehicle conservation: offered arrivals split into admitted and
    /// dropped, and every admitted vehicle is accounted for at the horizon.
    pub fn check_conservation(&self) -> Result<(), String> {
        let offered: u64 = self.offered.iter().sum();
        let dropped: u64 = self.dropped.iter().sum();
        let admitted = self.vehicles.len() as u64;
        if offered != admitted + dropped {
            return Err(format!(
                "offered {offered} != admitted {admitted} + dropped {dropped}"
            ));
        }
        let accounted =
            self.exited + self.final_queued + self.final_in_transit + self.final_at_boundary;
        if admitted != accounted {
            return Err(format!("admitted {admitted} != accounted {accounted}"));
        }
        // Cross-check against the per-vehicle records.
        let mut exited = 0u64;
        let mut in_queue = 0u64;
        let mut in_transit = 0u64;
        let mut at_boundary = 0u64;
        for v in &self.vehicles {
            if v.exited_s.is_some() {
                exited += 1;
                continue;
            }
            match v.hops.last() {
                Some(h) if !h.joined_s.is_finite() => at_boundary += 1,
                Some(h) if h.departed_s.is_none() => in_queue += 1,
                // Departed its last recorded queue, next join still pending.
                Some(_) => in_transit += 1,
                None => return Err(format!("vehicle {} has no hops", v.id)),
            }
        }
        if exited != self.exited {
            return Err(format!("vehicle records show {exited} exits, log {}", self.exited));
        }
        if in_queue != self.final_queued {
            return Err(format!(
                "vehicle records show {in_queue} queued, log {}",
                self.final_queued
            ));
        }
        if in_transit != self.final_in_transit {
            return Err(format!(
                "vehicle records show {in_transit} in transit, log {}",
                self.final_in_transit
            ));
        }
        if at_boundary != self.final_at_boundary {
            return Err(format!(
                "vehicle records show {at_boundary} at boundaries, log {}",
                self.final_at_boundary
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DesOptions {
    pub max_events: usize,
}

impl Default for DesOptions {
    fn default() -> Self {
        DesOptions { max_events: 100_000_000 }
    }
}

// ---------------------------------------------------------------------------
// Pending events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pending {
    ExoArrival { movement: u32 },
    QueueJoin { movement: u32, vehicle: u64 },
    Departure { movement: u32, generation: u32 },
    PhaseChange { intersection: u32, phase: u32 },
    OnOffSwitch { movement: u32 },
    MpDecision { intersection: u32 },
}

impl Pending {
    fn class(&self) -> u8 {
        match self {
            Pending::ExoArrival { .. } => 0,
            Pending::QueueJoin { .. } => 1,
            Pending::Departure { .. } => 2,
            Pending::PhaseChange { .. } | Pending::OnOffSwitch { .. } => 3,
            Pending::MpDecision { .. } => 4,
        }
    }

    fn entity(&self) -> u32 {
        match self {
            Pending::ExoArrival { movement }
            | Pending::QueueJoin { movement, .. }
            | Pending::Departure { movement, .. }
            | Pending::OnOffSwitch { movement } => *movement,
            Pending::PhaseChange { intersection, .. }
            | Pending::MpDecision { intersection } => *intersection,
        }
    }

    fn vehicle(&self) -> u64 {
        match self {
            Pending::QueueJoin { vehicle, .. } => *vehicle,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct HeapEntry {
    time: f64,
    class: u8,
    entity: u32,
    vehicle: u64,
    seq: u64,
    pending: Pending,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we need the earliest first.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.class.cmp(&self.class))
            .then_with(|| other.entity.cmp(&self.entity))
            .then_with(|| other.vehicle.cmp(&self.vehicle))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct FtTimeline {
    offset_s: f64,
    cycle_s: f64,
    /// (start offset within the cycle, original phase index) for phases with
    /// positive green; zero-length phases never become active.
    entries: Vec<(f64, usize)>,
}

impl FtTimeline {
    fn new(offset_s: f64, cycle_s: f64, greens: &[f64]) -> Self {
        let mut entries = Vec::new();
        let mut acc = 0.0;
        for (k, g) in greens.iter().enumerate() {
            if *g > 0.0 {
                entries.push((acc, k));
            }
            acc += g;
        }
        debug_assert!(!entries.is_empty(), "plan must have a positive green");
        FtTimeline { offset_s, cycle_s, entries }
    }

    fn phase_at(&self, t: f64) -> usize {
        let u = (t - self.offset_s).rem_euclid(self.cycle_s);
        let mut phase = self.entries.last().expect("non-empty plan").1;
        for window in self.entries.windows(2) {
            if u >= window[0].0 && u < window[1].0 {
                phase = window[0].1;
                break;
            }
        }
        phase
    }

    /// Next phase boundary strictly after `t`, with the phase it starts.
    fn next_change(&self, t: f64) -> (f64, usize) {
        let mut best = f64::INFINITY;
        let mut phase = 0usize;
        for &(s, k) in &self.entries {
            let boundary = self.offset_s + s;
            let n = ((t - boundary) / self.cycle_s).floor() + 1.0;
            let mut cand = boundary + n * self.cycle_s;
            if cand <= t {
                cand += self.cycle_s;
            }
            if cand - self.cycle_s > t {
                cand -= self.cycle_s;
            }
            if cand < best {
                best = cand;
                phase = k;
            }
        }
        (best, phase)
    }
}

struct MovementState {
    queue: VecDeque<u64>,
    served: bool,
    last_departure_s: f64,
    headway_s: f64,
    generation: u32,
    departure_pending: bool,
}

struct Engine<'a> {
    net: &'a Network,
    control: ControlMode,
    duration_s: f64,
    opts: DesOptions,
    heap: BinaryHeap<HeapEntry>,
    seq: u64,
    t: f64,
    movements: Vec<MovementState>,
    /// Current phase per intersection (usize::MAX = none yet).
    phase: Vec<usize>,
    timelines: Vec<Option<FtTimeline>>,
    mp_interval_s: Vec<f64>,
    mp_tick: Vec<u64>,
    onoff_green: Vec<bool>,
    // Link state.
    occupancy: Vec<u64>,
    capacity: Vec<Option<u64>>,
    boundary: Vec<VecDeque<(u64, u32)>>,
    mov_in_link: Vec<usize>,
    // RNG streams.
    demand_rng: Vec<Option<(ChaCha8Rng, Exp<f64>)>>,
    routing_rng: Vec<ChaCha8Rng>,
    onoff_rng: Vec<ChaCha8Rng>,
    // Vehicle bookkeeping.
    vehicles: Vec<VehicleRecord>,
    in_transit: u64,
    at_boundary: u64,
    exited: u64,
    dropped: Vec<u64>,
    offered: Vec<u64>,
    events_out: Vec<SimEvent>,
    n_events: usize,
}

/// Runs one replication and returns the complete event log.
pub fn simulate(
    scenario: &Scenario,
    control: ControlMode,
    duration_s: f64,
    rng: RngConfig,
    opts: DesOptions,
) -> Result<EventLog, DesError> {
    if !(duration_s > 0.0) {
        return Err(DesError::BadConfig("duration must be positive".into()));
    }
    let net = &scenario.network;
    let violations = net.validate();
    if !violations.is_empty() {
        return Err(DesError::BadConfig(format!(
            "network has {} violations; first: {}",
            violations.len(),
            violations[0]
        )));
    }
    if let ControlMode::RandomOnOff { gamma1_per_h, gamma2_per_h } = control {
        if !(gamma1_per_h >= 0.0 && gamma2_per_h > 0.0) {
            return Err(DesError::BadConfig("need gamma1 >= 0 and gamma2 > 0".into()));
        }
    }

    let n = net.n_movements();
    let mut timelines = Vec::with_capacity(net.intersections.len());
    let mut mp_interval = Vec::with_capacity(net.intersections.len());
    for (ipos, spec) in scenario.signals.iter().enumerate() {
        match (&control, spec) {
            (ControlMode::FixedTime, SignalSpec::FixedTime(plan)) => {
                if !plan.phase_greens_s.iter().any(|g| *g > 0.0) {
                    return Err(DesError::BadConfig(format!(
                        "intersection {} has no positive green",
                        net.intersections[ipos].id
                    )));
                }
                let greens: Vec<f64> =
                    plan.phase_greens_s.iter().map(|g| g / plan.g_speed).collect();
                timelines.push(Some(FtTimeline::new(
                    plan.offset_s / plan.g_speed,
                    plan.cycle_s / plan.g_speed,
                    &greens,
                )));
                mp_interval.push(0.0);
            }
            (ControlMode::FixedTime, SignalSpec::MaxPressure(_)) => {
                return Err(DesError::BadConfig(format!(
                    "intersection {} has no fixed-time plan",
                    net.intersections[ipos].id
                )));
            }
            (ControlMode::MaxPressure { switches_per_cycle }, spec) => {
                if net.intersections[ipos].phases.is_empty() {
                    return Err(DesError::BadConfig(format!(
                        "intersection {} has an empty phase table",
                        net.intersections[ipos].id
                    )));
                }
                let cycle = match spec {
                    SignalSpec::FixedTime(p) => p.cycle_s / p.g_speed,
                    SignalSpec::MaxPressure(p) => p.cycle_s,
                };
                timelines.push(None);
                mp_interval.push(cycle / *switches_per_cycle as f64);
            }
            (ControlMode::RandomOnOff { .. }, _) => {
                timelines.push(None);
                mp_interval.push(0.0);
            }
        }
    }

    let mov_in_link: Vec<usize> = net
        .movements
        .iter()
        .map(|m| net.link_idx(&m.from).expect("validated network"))
        .collect();
    let capacity: Vec<Option<u64>> =
        net.links.iter().map(|l| l.storage_capacity.map(|k| k as u64)).collect();

    let movements: Vec<MovementState> = net
        .movements
        .iter()
        .map(|m| MovementState {
            queue: VecDeque::new(),
            served: m.always_served,
            last_departure_s: f64::NEG_INFINITY,
            headway_s: SECONDS_PER_HOUR / m.saturation_flow_vph,
            generation: 0,
            departure_pending: false,
        })
        .collect();

    let demand_rng: Vec<Option<(ChaCha8Rng, Exp<f64>)>> = (0..n)
        .map(|i| {
            let rate = net.demand.rates_vph[i] / SECONDS_PER_HOUR;
            if rate > 0.0 {
                Some((rng.stream(STREAM_DEMAND, i as u64), Exp::new(rate).expect("rate > 0")))
            } else {
                None
            }
        })
        .collect();
    let routing_rng: Vec<ChaCha8Rng> =
        (0..n).map(|i| rng.stream(STREAM_ROUTING, i as u64)).collect();
    let onoff_rng: Vec<ChaCha8Rng> =
        (0..n).map(|i| rng.stream(STREAM_ONOFF, i as u64)).collect();

    let mut engine = Engine {
        net,
        control,
        duration_s,
        opts,
        heap: BinaryHeap::new(),
        seq: 0,
        t: 0.0,
        movements,
        phase: vec![usize::MAX; net.intersections.len()],
        timelines,
        mp_interval_s: mp_interval,
        mp_tick: vec![0; net.intersections.len()],
        onoff_green: vec![true; n],
        occupancy: vec![0; net.links.len()],
        capacity,
        boundary: vec![VecDeque::new(); net.links.len()],
        mov_in_link,
        demand_rng,
        routing_rng,
        onoff_rng,
        vehicles: Vec::new(),
        in_transit: 0,
        at_boundary: 0,
        exited: 0,
        dropped: vec![0; n],
        offered: vec![0; n],
        events_out: Vec::new(),
        n_events: 0,
    };
    engine.run()?;
    Ok(EventLog {
        duration_s,
        control: control.label(),
        events: engine.events_out,
        vehicles: engine.vehicles,
        dropped: engine.dropped,
        offered: engine.offered,
        exited: engine.exited,
        final_queued: engine.movements.iter().map(|m| m.queue.len() as u64).sum(),
        final_in_transit: engine.in_transit,
        final_at_boundary: engine.at_boundary,
    })
}

impl Engine<'_> {
    fn push(&mut self, time: f64, pending: Pending) {
        if time > self.duration_s {
            return;
        }
        self.seq += 1;
        self.heap.push(HeapEntry {
            time,
            class: pending.class(),
            entity: pending.entity(),
            vehicle: pending.vehicle(),
            seq: self.seq,
            pending,
        });
    }

    fn log(&mut self, kind: EventKind, movement: Option<u32>, vehicle: Option<u64>, phase: Option<u32>, intersection: Option<u32>) {
        self.events_out.push(SimEvent {
            time_s: self.t,
            kind,
            intersection,
            movement,
            vehicle,
            phase,
        });
    }

    fn intersection_of(&self, movement: usize) -> u32 {
        let id = &self.net.movements[movement].intersection;
        self.net
            .intersections
            .iter()
            .position(|i| &i.id == id)
            .expect("validated network") as u32
    }

    fn run(&mut self) -> Result<(), DesError> {
        // Initial signal state.
        match self.control {
            ControlMode::FixedTime => {
                for ipos in 0..self.net.intersections.len() {
                    let timeline = self.timelines[ipos].as_ref().expect("ft timeline");
                    let phase = timeline.phase_at(0.0);
                    let (t_next, next_phase) = timeline.next_change(0.0);
                    self.apply_phase(ipos, phase, false);
                    self.push(
                        t_next,
                        Pending::PhaseChange { intersection: ipos as u32, phase: next_phase as u32 },
                    );
                }
            }
            ControlMode::MaxPressure { .. } => {
                for ipos in 0..self.net.intersections.len() {
                    self.push(0.0, Pending::MpDecision { intersection: ipos as u32 });
                }
            }
            ControlMode::RandomOnOff { gamma1_per_h, .. } => {
                for mi in 0..self.net.n_movements() {
                    self.movements[mi].served = true;
                    if gamma1_per_h > 0.0 {
                        let dt = exp_draw(&mut self.onoff_rng[mi], gamma1_per_h / SECONDS_PER_HOUR);
                        self.push(dt, Pending::OnOffSwitch { movement: mi as u32 });
                    }
                }
            }
        }
        // First exogenous arrivals.
        for mi in 0..self.net.n_movements() {
            if let Some((rng, exp)) = &mut self.demand_rng[mi] {
                let dt = exp.sample(rng);
                self.push(dt, Pending::ExoArrival { movement: mi as u32 });
            }
        }

        while let Some(entry) = self.heap.pop() {
            debug_assert!(entry.time >= self.t, "event time went backwards");
            self.t = entry.time;
            self.n_events += 1;
            if self.n_events > self.opts.max_events {
                return Err(DesError::EventExplosion {
                    at_time_s: self.t,
                    events: self.n_events,
                });
            }
            match entry.pending {
                Pending::ExoArrival { movement } => self.on_exo_arrival(movement as usize),
                Pending::QueueJoin { movement, vehicle } => {
                    self.on_queue_join(movement as usize, vehicle)
                }
                Pending::Departure { movement, generation } => {
                    self.on_departure(movement as usize, generation)
                }
                Pending::PhaseChange { intersection, phase } => {
                    self.on_phase_change(intersection as usize, phase as usize)
                }
                Pending::OnOffSwitch { movement } => self.on_onoff_switch(movement as usize),
                Pending::MpDecision { intersection } => self.on_mp_decision(intersection as usize),
            }
        }
        Ok(())
    }

    fn schedule_departure(&mut self, mi: usize) {
        let m = &self.movements[mi];
        if !m.served || m.departure_pending || m.queue.is_empty() {
            return;
        }
        let t = self.t.max(m.last_departure_s + m.headway_s);
        let generation = m.generation;
        self.movements[mi].departure_pending = true;
        self.push(t, Pending::Departure { movement: mi as u32, generation });
    }

    fn start_service(&mut self, mi: usize) {
        if self.movements[mi].served {
            return;
        }
        self.movements[mi].served = true;
        self.schedule_departure(mi);
    }

    fn stop_service(&mut self, mi: usize) {
        if self.net.movements[mi].always_served || !self.movements[mi].served {
            return;
        }
        let m = &mut self.movements[mi];
        m.served = false;
        m.generation = m.generation.wrapping_add(1);
        m.departure_pending = false;
    }

    /// Switches an intersection to `phase`, starting and stopping movement
    /// service as needed.
    fn apply_phase(&mut self, ipos: usize, phase: usize, log_change: bool) {
        if self.phase[ipos] == phase {
            return;
        }
        self.phase[ipos] = phase;
        let inter = &self.net.intersections[ipos];
        let in_phase: Vec<MovementIdx> = inter.phases[phase].movements.clone();
        let owned = inter.movements.clone();
        for mi in owned {
            if self.net.movements[mi].always_served {
                continue;
            }
            if in_phase.contains(&mi) {
                self.start_service(mi);
            } else {
                self.stop_service(mi);
            }
        }
        if log_change {
            self.log(EventKind::PhaseChange, None, None, Some(phase as u32), Some(ipos as u32));
        }
    }

    fn on_exo_arrival(&mut self, mi: usize) {
        // Draw the next arrival first so the demand stream is independent of
        // admission outcomes.
        if let Some((rng, exp)) = &mut self.demand_rng[mi] {
            let dt = exp.sample(rng);
            let t_next = self.t + dt;
            self.push(t_next, Pending::ExoArrival { movement: mi as u32 });
        }
        self.offered[mi] += 1;
        let link = self.mov_in_link[mi];
        if let Some(cap) = self.capacity[link] {
            if self.occupancy[link] >= cap {
                self.dropped[mi] += 1;
                return;
            }
        }
        let vid = self.vehicles.len() as u64;
        self.vehicles.push(VehicleRecord {
            id: vid,
            origin_link: link as u32,
            hops: vec![Hop {
                movement: mi as u32,
                arrived_s: self.t,
                joined_s: self.t,
                departed_s: None,
            }],
            exited_s: None,
            exit_link: None,
        });
        self.occupancy[link] += 1;
        self.movements[mi].queue.push_back(vid);
        self.log(
            EventKind::ExogenousArrival,
            Some(mi as u32),
            Some(vid),
            None,
            Some(self.intersection_of(mi)),
        );
        self.schedule_departure(mi);
    }

    fn on_queue_join(&mut self, mi: usize, vehicle: u64) {
        self.in_transit -= 1;
        let link = self.mov_in_link[mi];
        if let Some(cap) = self.capacity[link] {
            if self.occupancy[link] >= cap {
                // Wait at the link boundary until a departure frees space.
                self.at_boundary += 1;
                self.boundary[link].push_back((vehicle, mi as u32));
                let hop = Hop {
                    movement: mi as u32,
                    arrived_s: self.t,
                    joined_s: f64::INFINITY,
                    departed_s: None,
                };
                self.vehicles[vehicle as usize].hops.push(hop);
                return;
            }
        }
        self.admit(mi, vehicle, true);
    }

    fn admit(&mut self, mi: usize, vehicle: u64, new_hop: bool) {
        let link = self.mov_in_link[mi];
        self.occupancy[link] += 1;
        self.movements[mi].queue.push_back(vehicle);
        if new_hop {
            let hop = Hop {
                movement: mi as u32,
                arrived_s: self.t,
                joined_s: self.t,
                departed_s: None,
            };
            self.vehicles[vehicle as usize].hops.push(hop);
        } else {
            let hop = self.vehicles[vehicle as usize]
                .hops
                .last_mut()
                .expect("boundary vehicle has a hop");
            hop.joined_s = self.t;
        }
        self.log(
            EventKind::QueueJoin,
            Some(mi as u32),
            Some(vehicle),
            None,
            Some(self.intersection_of(mi)),
        );
        self.schedule_departure(mi);
    }

    fn on_departure(&mut self, mi: usize, generation: u32) {
        {
            let m = &self.movements[mi];
            if m.generation != generation || !m.served {
                return; // superseded by a red phase
            }
        }
        self.movements[mi].departure_pending = false;
        let Some(vehicle) = self.movements[mi].queue.pop_front() else {
            return;
        };
        self.movements[mi].last_departure_s = self.t;
        let link = self.mov_in_link[mi];
        self.occupancy[link] -= 1;
        self.log(
            EventKind::Departure,
            Some(mi as u32),
            Some(vehicle),
            None,
            Some(self.intersection_of(mi)),
        );
        let hop = self.vehicles[vehicle as usize]
            .hops
            .last_mut()
            .expect("departing vehicle has a hop");
        hop.departed_s = Some(self.t);

        // Route the vehicle onward.
        let out_link_id = &self.net.movements[mi].to;
        let out_link = self.net.link_idx(out_link_id).expect("validated network");
        if self.net.links[out_link].is_exit {
            self.exited += 1;
            let v = &mut self.vehicles[vehicle as usize];
            v.exited_s = Some(self.t);
            v.exit_link = Some(out_link as u32);
        } else {
            let row = self.net.routing.row(mi);
            let draw: f64 = self.routing_rng[mi].random();
            let mut acc = 0.0;
            let mut dest = row.last().expect("non-exit movement routes somewhere").0;
            for &(target, p) in row {
                acc += p;
                if draw < acc {
                    dest = target;
                    break;
                }
            }
            let tau = self.net.links[out_link].travel_time_s;
            self.in_transit += 1;
            self.push(self.t + tau, Pending::QueueJoin { movement: dest as u32, vehicle });
        }

        // A departure freed one storage slot; admit the longest-waiting
        // boundary vehicle of this link.
        if let Some((v, target)) = self.boundary[link].pop_front() {
            self.at_boundary -= 1;
            self.admit(target as usize, v, false);
        }

        if !self.movements[mi].queue.is_empty() {
            self.schedule_departure(mi);
        }
    }

    fn on_phase_change(&mut self, ipos: usize, phase: usize) {
        self.apply_phase(ipos, phase, true);
        let timeline = self.timelines[ipos].as_ref().expect("ft timeline");
        let (t_next, next_phase) = timeline.next_change(self.t);
        self.push(
            t_next,
            Pending::PhaseChange { intersection: ipos as u32, phase: next_phase as u32 },
        );
    }

    fn on_onoff_switch(&mut self, mi: usize) {
        let ControlMode::RandomOnOff { gamma1_per_h, gamma2_per_h } = self.control else {
            return;
        };
        let green = self.onoff_green[mi];
        self.onoff_green[mi] = !green;
        if green {
            self.stop_service(mi);
            let dt = exp_draw(&mut self.onoff_rng[mi], gamma2_per_h / SECONDS_PER_HOUR);
            self.push(self.t + dt, Pending::OnOffSwitch { movement: mi as u32 });
        } else {
            self.start_service(mi);
            if gamma1_per_h > 0.0 {
                let dt = exp_draw(&mut self.onoff_rng[mi], gamma1_per_h / SECONDS_PER_HOUR);
                self.push(self.t + dt, Pending::OnOffSwitch { movement: mi as u32 });
            }
        }
        self.log(
            EventKind::PhaseChange,
            Some(mi as u32),
            None,
            Some(if green { 0 } else { 1 }),
            Some(self.intersection_of(mi)),
        );
    }

    fn on_mp_decision(&mut self, ipos: usize) {
        let queues: Vec<f64> =
            self.movements.iter().map(|m| m.queue.len() as f64).collect();
        let chosen = max_pressure_decide(
            &queues,
            &self.net.intersections[ipos],
            &self.net.movements,
            &self.net.routing,
        )
        .expect("non-empty phase table checked at setup");
        self.log(EventKind::MpDecision, None, None, Some(chosen as u32), Some(ipos as u32));
        self.apply_phase(ipos, chosen, true);
        self.mp_tick[ipos] += 1;
        let t_next = self.mp_tick[ipos] as f64 * self.mp_interval_s[ipos];
        self.push(t_next, Pending::MpDecision { intersection: ipos as u32 });
    }
}

fn exp_draw(rng: &mut ChaCha8Rng, rate_per_s: f64) -> f64 {
    Exp::new(rate_per_s).expect("positive rate").sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{
        single_queue_scenario, two_intersection_scenario, Scenario,
    };

    fn time_average_queue(log: &EventLog, movement: u32, from_s: f64) -> f64 {
        // Reconstruct the queue step function for one movement.
        let mut level = 0i64;
        let mut prev_t = 0.0f64;
        let mut area = 0.0f64;
        for ev in &log.events {
            let delta = match ev.kind {
                EventKind::ExogenousArrival | EventKind::QueueJoin
                    if ev.movement == Some(movement) =>
                {
                    1
                }
                EventKind::Departure if ev.movement == Some(movement) => -1,
                _ => 0,
            };
            if delta != 0 {
                let lo = prev_t.max(from_s);
                let hi = ev.time_s.max(from_s);
                area += level as f64 * (hi - lo);
                level += delta;
                prev_t = ev.time_s;
            }
        }
        area += level as f64 * (log.duration_s - prev_t.max(from_s));
        area / (log.duration_s - from_s)
    }

    #[test]
    fn zero_demand_produces_only_signal_events() {
        let mut scenario = two_intersection_scenario();
        for r in &mut scenario.network.demand.rates_vph {
            *r = 0.0;
        }
        let log = simulate(
            &scenario,
            ControlMode::FixedTime,
            600.0,
            RngConfig::new(1, 0),
            DesOptions::default(),
        )
        .unwrap();
        assert!(log.vehicles.is_empty());
        assert!(log.events.iter().all(|e| e.kind == EventKind::PhaseChange));
        assert!(!log.events.is_empty());
        log.check_conservation().unwrap();
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let scenario = two_intersection_scenario();
        let a = simulate(
            &scenario,
            ControlMode::FixedTime,
            1800.0,
            RngConfig::new(42, 3),
            DesOptions::default(),
        )
        .unwrap();
        let b = simulate(
            &scenario,
            ControlMode::FixedTime,
            1800.0,
            RngConfig::new(42, 3),
            DesOptions::default(),
        )
        .unwrap();
        assert_eq!(a, b);
        let c = simulate(
            &scenario,
            ControlMode::FixedTime,
            1800.0,
            RngConfig::new(42, 4),
            DesOptions::default(),
        )
        .unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn conservation_holds_under_all_controls() {
        let scenario = two_intersection_scenario();
        for control in [
            ControlMode::FixedTime,
            ControlMode::MaxPressure { switches_per_cycle: 4 },
            ControlMode::MaxPressure { switches_per_cycle: 6 },
            ControlMode::RandomOnOff { gamma1_per_h: 30.0, gamma2_per_h: 30.0 },
        ] {
            let log = simulate(
                &scenario,
                control,
                3600.0,
                RngConfig::new(7, 0),
                DesOptions::default(),
            )
            .unwrap();
            log.check_conservation().unwrap();
            assert!(log.exited > 0, "{control:?} moved no vehicles");
        }
    }

    #[test]
    fn departures_respect_saturation_headways() {
        let scenario = two_intersection_scenario();
        let log = simulate(
            &scenario,
            ControlMode::FixedTime,
            3600.0,
            RngConfig::new(11, 0),
            DesOptions::default(),
        )
        .unwrap();
        let n = scenario.network.n_movements();
        let mut last = vec![f64::NEG_INFINITY; n];
        for ev in &log.events {
            if ev.kind == EventKind::Departure {
                let mi = ev.movement.unwrap() as usize;
                let headway = 3600.0 / scenario.network.movements[mi].saturation_flow_vph;
                assert!(
                    ev.time_s - last[mi] >= headway - 1e-9,
                    "movement {mi}: departures {} and {} too close",
                    last[mi],
                    ev.time_s
                );
                last[mi] = ev.time_s;
            }
        }
    }

    #[test]
    fn departures_only_during_green_under_fixed_time() {
        let scenario = two_intersection_scenario();
        let schedules = crate::fluid::fluid_schedules(&scenario).unwrap();
        let log = simulate(
            &scenario,
            ControlMode::FixedTime,
            3600.0,
            RngConfig::new(13, 1),
            DesOptions::default(),
        )
        .unwrap();
        for ev in &log.events {
            if ev.kind == EventKind::Departure {
                let mi = ev.movement.unwrap() as usize;
                let m = &scenario.network.movements[mi];
                if m.always_served {
                    continue;
                }
                // The event order processes departures before phase changes
                // at equal times, so a departure exactly at the end of green
                // is legal: check the closed green interval.
                assert!(
                    schedules[mi].rate_at(ev.time_s) > 0.0
                        || schedules[mi].rate_at(ev.time_s - 1e-9) > 0.0,
                    "departure from {} at {} during red",
                    m.key(),
                    ev.time_s
                );
            }
        }
    }

    #[test]
    fn departures_match_active_phase_under_max_pressure() {
        let scenario = two_intersection_scenario();
        let log = simulate(
            &scenario,
            ControlMode::MaxPressure { switches_per_cycle: 4 },
            3600.0,
            RngConfig::new(17, 0),
            DesOptions::default(),
        )
        .unwrap();
        let net = &scenario.network;
        let mut active: Vec<Option<usize>> = vec![None; net.intersections.len()];
        let mut departures = 0usize;
        for ev in &log.events {
            match ev.kind {
                EventKind::PhaseChange => {
                    active[ev.intersection.unwrap() as usize] = Some(ev.phase.unwrap() as usize);
                }
                EventKind::Departure => {
                    departures += 1;
                    let mi = ev.movement.unwrap() as usize;
                    if net.movements[mi].always_served {
                        continue;
                    }
                    let ipos = ev.intersection.unwrap() as usize;
                    let phase = active[ipos].expect("phase set before departures");
                    assert!(
                        net.intersections[ipos].phases[phase].movements.contains(&mi),
                        "departure from {mi} outside its phase at t={}",
                        ev.time_s
                    );
                }
                _ => {}
            }
        }
        assert!(departures > 100);
    }

    /// Isolated queue with exponential on/off service compared against the
    /// chain analysis: mean queue within a cross-model tolerance of the
    /// closed form. The horizon must be long because the near-critical chain
    /// relaxes over tens of hours; deterministic headways versus exponential
    /// services keep the agreement approximate.
    #[test]
    fn onoff_queue_tracks_the_chain_closed_form() {
        let scenario = single_queue_scenario(900.0, 2000.0, None, 120.0, 60.0);
        let mut means = Vec::new();
        for rep in 0..12 {
            let log = simulate(
                &scenario,
                ControlMode::RandomOnOff { gamma1_per_h: 30.0, gamma2_per_h: 30.0 },
                100.0 * 3600.0,
                RngConfig::new(2024, rep),
                DesOptions::default(),
            )
            .unwrap();
            means.push(time_average_queue(&log, 0, 0.0));
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let expect = 159.0;
        assert!(
            (mean - expect).abs() < 0.15 * expect,
            "DES on/off mean {mean} far from closed form {expect}"
        );
    }

    #[test]
    fn capacity_defers_joins_and_drops_entry_arrivals() {
        // Tight entry link: capacity 1 vehicle, heavy demand.
        let text = r#"
[[links]]
id = "a"
travel_time = 5.0
storage_capacity = 1
entry = true

[[links]]
id = "b"
travel_time = 5.0
storage_capacity = 1

[[links]]
id = "c"
travel_time = 5.0
exit = true

[[movements]]
from = "a"
to = "b"
saturation_flow = 1800.0
intersection = "X"
turn = "through"

[[movements]]
from = "b"
to = "c"
saturation_flow = 900.0
intersection = "Y"
turn = "through"

[[routing]]
from = "a>b"
to = "b>c"
p = 1.0

[demands]
"a>b" = 1200.0

[signals.X]
type = "fixed_time"
cycle = 60.0
phases = [{ movements = ["a>b"], green = 60.0 }]

[signals.Y]
type = "fixed_time"
cycle = 60.0
phases = [{ movements = ["b>c"], green = 60.0 }]
"#;
        let scenario = Scenario::from_toml_str(text).unwrap();
        let log = simulate(
            &scenario,
            ControlMode::FixedTime,
            3600.0,
            RngConfig::new(5, 0),
            DesOptions::default(),
        )
        .unwrap();
        log.check_conservation().unwrap();
        assert!(log.dropped[0] > 0, "full entry link must drop arrivals");
        // Some vehicles waited at the boundary of link b: joined > arrived.
        let waited = log
            .vehicles
            .iter()
            .flat_map(|v| &v.hops)
            .filter(|h| h.joined_s > h.arrived_s && h.joined_s.is_finite())
            .count();
        assert!(waited > 0, "expected boundary waits on the tight link");
        // Occupancy of link b never exceeds 1: at most one vehicle queued.
        let mut occ = 0i64;
        for ev in &log.events {
            match ev.kind {
                EventKind::QueueJoin if ev.movement == Some(1) => {
                    occ += 1;
                    assert!(occ <= 1, "link capacity violated at t={}", ev.time_s);
                }
                EventKind::Departure if ev.movement == Some(1) => occ -= 1,
                _ => {}
            }
        }
    }

    /// Drop fraction at a finite always-green queue against an independent
    /// headway-recursion oracle (Poisson arrivals, deterministic service
    /// headway, admission while fewer than K vehicles are present).
    #[test]
    fn blocking_matches_independent_recursion_oracle() {
        let sat = 1800.0;
        let lambda = 0.8 * sat;
        let k = 10u32;
        let scenario = single_queue_scenario(lambda, sat, Some(k), 60.0, 0.0);
        // 0 s of red: the single phase covers the whole cycle.
        let mut des_offered = 0u64;
        let mut des_dropped = 0u64;
        for rep in 0..10 {
            let log = simulate(
                &scenario,
                ControlMode::FixedTime,
                40_000.0,
                RngConfig::new(77, rep),
                DesOptions::default(),
            )
            .unwrap();
            des_offered += log.offered[0];
            des_dropped += log.dropped[0];
        }
        let p_des = des_dropped as f64 / des_offered as f64;

        // Independent oracle: departure-time recursion with its own RNG.
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let exp = Exp::new(lambda / 3600.0).unwrap();
        let headway = 3600.0 / sat;
        let mut in_system: VecDeque<f64> = VecDeque::new(); // departure times
        let mut last_dep = f64::NEG_INFINITY;
        let mut t = 0.0;
        let (mut offered, mut dropped) = (0u64, 0u64);
        for _ in 0..2_000_000u64 {
            t += exp.sample(&mut rng);
            while let Some(&d) = in_system.front() {
                if d <= t {
                    in_system.pop_front();
                } else {
                    break;
                }
            }
            offered += 1;
            if in_system.len() as u32 >= k {
                dropped += 1;
                continue;
            }
            let dep = t.max(last_dep + headway);
            last_dep = dep;
            in_system.push_back(dep);
        }
        let p_oracle = dropped as f64 / offered as f64;

        assert!(
            (p_des - p_oracle).abs() < 0.15 * p_oracle.max(p_des) + 5e-4,
            "DES blocking {p_des} vs oracle {p_oracle}"
        );
        // With deterministic headways the blocking sits well below the
        // memoryless-service value 0.0235 at the same load.
        assert!(p_oracle < 0.0235);
    }

    #[test]
    fn unbinding_capacity_leaves_the_log_unchanged() {
        let scenario = two_intersection_scenario();
        let mut capped = scenario.clone();
        for link in &mut capped.network.links {
            link.storage_capacity = Some(1_000_000);
        }
        let a = simulate(
            &scenario,
            ControlMode::FixedTime,
            1800.0,
            RngConfig::new(23, 0),
            DesOptions::default(),
        )
        .unwrap();
        let b = simulate(
            &capped,
            ControlMode::FixedTime,
            1800.0,
            RngConfig::new(23, 0),
            DesOptions::default(),
        )
        .unwrap();
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn fixed_time_control_requires_fixed_time_plans() {
        let mut scenario = two_intersection_scenario();
        scenario.signals[0] = crate::scenario::SignalSpec::MaxPressure(crate::scenario::MpPlan {
            cycle_s: 120.0,
            switches_per_cycle: 4,
        });
        let err = simulate(
            &scenario,
            ControlMode::FixedTime,
            600.0,
            RngConfig::new(1, 0),
            DesOptions::default(),
        );
        assert!(matches!(err, Err(DesError::BadConfig(_))));
    }
}
