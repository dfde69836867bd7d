//! Scenario files: a single TOML document with sections `links`, `movements`,
//! `routing`, `demands` and `signals`. Rates are vehicles/hour, times are
//! seconds. Unknown fields are rejected.
//!
//! Also provides programmatic builders for the networks used throughout the
//! test suites: an isolated signalized queue, a small two-intersection
//! arterial, and a four-intersection grid with demand sized to a target
//! volume-capacity ratio.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::{
    DemandProfile, Intersection, Link, Movement, MovementIdx, Network, Phase, RoutingMatrix,
    TurnKind,
};

// ---------------------------------------------------------------------------
// On-disk schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    links: Vec<RawLink>,
    movements: Vec<RawMovement>,
    #[serde(default)]
    routing: Vec<RawRoute>,
    #[serde(default)]
    demands: BTreeMap<String, f64>,
    signals: BTreeMap<String, RawSignal>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    id: String,
    travel_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    storage_capacity: Option<u32>,
    #[serde(default)]
    entry: bool,
    #[serde(default)]
    exit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMovement {
    from: String,
    to: String,
    saturation_flow: f64,
    intersection: String,
    turn: TurnKind,
    #[serde(default)]
    always_served: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoute {
    from: String,
    to: String,
    p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum RawSignal {
    FixedTime {
        cycle: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        g_speed: f64,
        phases: Vec<RawFtPhase>,
    },
    MaxPressure {
        cycle: f64,
        switches_per_cycle: u32,
        phases: Vec<RawMpPhase>,
    },
}

fn one() -> f64 {
    1.0
}

#[allow(clippy::trivially_copy_pass_by_ref)]
fn is_one(v: &f64) -> bool {
    *v == 1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFtPhase {
    movements: Vec<String>,
    green: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    min_green: f64,
}

#[allow(clippy::trivially_copy_pass_by_ref)]
fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMpPhase {
    movements: Vec<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    min_green: f64,
}

// ---------------------------------------------------------------------------
// In-memory signal specification
// ---------------------------------------------------------------------------

/// Signal control of one intersection, aligned with
/// `Network::intersections` by index. Phase membership lives in the
/// intersection's phase table.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalSpec {
    FixedTime(FtPlan),
    MaxPressure(MpPlan),
}

/// Fixed-time plan for a whole intersection: phases run in table order, each
/// for its green duration, repeating with the cycle. `g_speed` divides every
/// duration and the offset, shortening the cycle while preserving ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct FtPlan {
    pub cycle_s: f64,
    pub offset_s: f64,
    pub g_speed: f64,
    /// Green duration per phase, same order as the intersection phase table.
    pub phase_greens_s: Vec<f64>,
}

impl FtPlan {
    /// Effective cycle after the speedup factor.
    pub fn effective_cycle_s(&self) -> f64 {
        self.cycle_s / self.g_speed
    }

    /// Start offset of a phase within the (unsped) cycle.
    pub fn phase_start_s(&self, phase: usize) -> f64 {
        self.offset_s + self.phase_greens_s[..phase].iter().sum::<f64>()
    }

    /// Plan with an additional speedup factor applied.
    pub fn sped_up(&self, factor: f64) -> FtPlan {
        FtPlan { g_speed: self.g_speed * factor, ..self.clone() }
    }
}

/// Max-pressure configuration: decisions every `cycle / switches_per_cycle`
/// seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct MpPlan {
    pub cycle_s: f64,
    pub switches_per_cycle: u32,
}

impl MpPlan {
    pub fn decision_interval_s(&self) -> f64 {
        self.cycle_s / self.switches_per_cycle as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub network: Network,
    pub signals: Vec<SignalSpec>,
}

#[derive(Debug)]
pub enum ScenarioError {
    Io(std::io::Error),
    Parse(String),
    Schema(String),
}

impl std::fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioError::Io(e) => write!(f, "cannot read scenario: {e}"),
            ScenarioError::Parse(e) => write!(f, "cannot parse scenario: {e}"),
            ScenarioError::Schema(e) => write!(f, "invalid scenario: {e}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

impl From<std::io::Error> for ScenarioError {
    fn from(e: std::io::Error) -> Self {
        ScenarioError::Io(e)
    }
}

fn movement_key(s: &str) -> Result<(String, String), ScenarioError> {
    match s.split_once('>') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(ScenarioError::Schema(format!(
            "movement reference '{s}' is not of the form 'from>to'"
        ))),
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario, ScenarioError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Scenario::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Scenario::from_toml_str(&text)
    }

    fn from_raw(raw: RawScenario) -> Result<Scenario, ScenarioError> {
        let links: Vec<Link> = raw
            .links
            .iter()
            .map(|l| Link {
                id: l.id.clone(),
                travel_time_s: l.travel_time,
                storage_capacity: l.storage_capacity,
                is_entry: l.entry,
                is_exit: l.exit,
            })
            .collect();
        let movements: Vec<Movement> = raw
            .movements
            .iter()
            .map(|m| Movement {
                from: m.from.clone(),
                to: m.to.clone(),
                saturation_flow_vph: m.saturation_flow,
                intersection: m.intersection.clone(),
                turn: m.turn,
                always_served: m.always_served,
            })
            .collect();

        let mut index: BTreeMap<(String, String), MovementIdx> = BTreeMap::new();
        for (i, m) in movements.iter().enumerate() {
            if index.insert((m.from.clone(), m.to.clone()), i).is_some() {
                return Err(ScenarioError::Schema(format!("duplicate movement {}", m.key())));
            }
        }
        let resolve = |key: &str| -> Result<MovementIdx, ScenarioError> {
            let (from, to) = movement_key(key)?;
            index.get(&(from, to)).copied().ok_or_else(|| {
                ScenarioError::Schema(format!("reference to undefined movement {key}"))
            })
        };

        let mut routing = RoutingMatrix::new(movements.len());
        for r in &raw.routing {
            routing.set(resolve(&r.from)?, resolve(&r.to)?, r.p);
        }
        let mut rates = vec![0.0; movements.len()];
        for (key, rate) in &raw.demands {
            rates[resolve(key)?] = *rate;
        }

        // Intersections appear in movement order; each must carry a signal.
        let mut inter_ids: Vec<String> = Vec::new();
        for m in &movements {
            if !inter_ids.contains(&m.intersection) {
                inter_ids.push(m.intersection.clone());
            }
        }
        for id in raw.signals.keys() {
            if !inter_ids.contains(id) {
                return Err(ScenarioError::Schema(format!(
                    "signal for unknown intersection {id}"
                )));
            }
        }

        let mut intersections = Vec::new();
        let mut signals = Vec::new();
        for id in &inter_ids {
            let sig = raw.signals.get(id).ok_or_else(|| {
                ScenarioError::Schema(format!("intersection {id} has no signal definition"))
            })?;
            let owned: Vec<MovementIdx> = movements
                .iter()
                .enumerate()
                .filter(|(_, m)| &m.intersection == id)
                .map(|(i, _)| i)
                .collect();
            let (phases, spec) = match sig {
                RawSignal::FixedTime { cycle, offset, g_speed, phases } => {
                    if !(*cycle > 0.0) {
                        return Err(ScenarioError::Schema(format!(
                            "intersection {id}: cycle must be positive"
                        )));
                    }
                    if !(*g_speed > 0.0) {
                        return Err(ScenarioError::Schema(format!(
                            "intersection {id}: g_speed must be positive"
                        )));
                    }
                    let greens: Vec<f64> = phases.iter().map(|p| p.green).collect();
                    let total: f64 = greens.iter().sum();
                    if (total - cycle).abs() > 1e-6 {
                        return Err(ScenarioError::Schema(format!(
                            "intersection {id}: phase greens sum to {total}, cycle is {cycle}"
                        )));
                    }
                    if greens.iter().any(|g| !(*g > 0.0)) {
                        return Err(ScenarioError::Schema(format!(
                            "intersection {id}: phase greens must be positive"
                        )));
                    }
                    let mut table = Vec::new();
                    for p in phases {
                        let mut ms = Vec::new();
                        for key in &p.movements {
                            ms.push(resolve(key)?);
                        }
                        table.push(Phase { movements: ms, min_green_s: p.min_green });
                    }
                    (
                        table,
                        SignalSpec::FixedTime(FtPlan {
                            cycle_s: *cycle,
                            offset_s: *offset,
                            g_speed: *g_speed,
                            phase_greens_s: greens,
                        }),
                    )
                }
                RawSignal::MaxPressure { cycle, switches_per_cycle, phases } => {
                    if !(*cycle > 0.0) || *switches_per_cycle == 0 {
                        return Err(ScenarioError::Schema(format!(
                            "intersection {id}: need positive cycle and switches_per_cycle"
                        )));
                    }
                    if phases.is_empty() {
                        return Err(ScenarioError::Schema(format!(
                            "intersection {id}: max-pressure control needs a phase table"
                        )));
                    }
                    let mut table = Vec::new();
                    for p in phases {
                        let mut ms = Vec::new();
                        for key in &p.movements {
                            ms.push(resolve(key)?);
                        }
                        table.push(Phase { movements: ms, min_green_s: p.min_green });
                    }
                    (
                        table,
                        SignalSpec::MaxPressure(MpPlan {
                            cycle_s: *cycle,
                            switches_per_cycle: *switches_per_cycle,
                        }),
                    )
                }
            };
            intersections.push(Intersection { id: id.clone(), movements: owned, phases });
            signals.push(spec);
        }

        let network = Network::new(
            links,
            movements,
            routing,
            DemandProfile { rates_vph: rates, gain: 1.0 },
            intersections,
        )
        .map_err(|e| ScenarioError::Schema(e.to_string()))?;
        Ok(Scenario { network, signals })
    }

    pub fn to_toml_string(&self) -> String {
        let net = &self.network;
        let links = net
            .links
            .iter()
            .map(|l| RawLink {
                id: l.id.clone(),
                travel_time: l.travel_time_s,
                storage_capacity: l.storage_capacity,
                entry: l.is_entry,
                exit: l.is_exit,
            })
            .collect();
        let movements = net
            .movements
            .iter()
            .map(|m| RawMovement {
                from: m.from.clone(),
                to: m.to.clone(),
                saturation_flow: m.saturation_flow_vph,
                intersection: m.intersection.clone(),
                turn: m.turn,
                always_served: m.always_served,
            })
            .collect();
        let mut routing = Vec::new();
        for j in 0..net.n_movements() {
            for &(i, p) in net.routing.row(j) {
                routing.push(RawRoute {
                    from: net.movements[j].key(),
                    to: net.movements[i].key(),
                    p,
                });
            }
        }
        let mut demands = BTreeMap::new();
        for (i, rate) in net.demand.rates_vph.iter().enumerate() {
            if *rate > 0.0 {
                demands.insert(net.movements[i].key(), *rate);
            }
        }
        let mut signals = BTreeMap::new();
        for (inter, spec) in net.intersections.iter().zip(&self.signals) {
            let raw = match spec {
                SignalSpec::FixedTime(plan) => RawSignal::FixedTime {
                    cycle: plan.cycle_s,
                    offset: plan.offset_s,
                    g_speed: plan.g_speed,
                    phases: inter
                        .phases
                        .iter()
                        .zip(&plan.phase_greens_s)
                        .map(|(p, g)| RawFtPhase {
                            movements: p.movements.iter().map(|&i| net.movements[i].key()).collect(),
                            green: *g,
                            min_green: p.min_green_s,
                        })
                        .collect(),
                },
                SignalSpec::MaxPressure(plan) => RawSignal::MaxPressure {
                    cycle: plan.cycle_s,
                    switches_per_cycle: plan.switches_per_cycle,
                    phases: inter
                        .phases
                        .iter()
                        .map(|p| RawMpPhase {
                            movements: p.movements.iter().map(|&i| net.movements[i].key()).collect(),
                            min_green: p.min_green_s,
                        })
                        .collect(),
                },
            };
            signals.insert(inter.id.clone(), raw);
        }
        let raw = RawScenario { links, movements, routing, demands, signals };
        toml::to_string_pretty(&raw).expect("scenario serializes")
    }

    /// Scenario with demand and saturation flows multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Result<Scenario, crate::network::NetworkError> {
        Ok(Scenario { network: self.network.scale(gain)?, signals: self.signals.clone() })
    }

    /// Scenario with every fixed-time plan sped up by `factor` (cycle, greens
    /// and offsets divided, green ratios preserved). Max-pressure plans get a
    /// proportionally shorter decision interval.
    pub fn sped_up(&self, factor: f64) -> Scenario {
        let signals = self
            .signals
            .iter()
            .map(|s| match s {
                SignalSpec::FixedTime(p) => SignalSpec::FixedTime(p.sped_up(factor)),
                SignalSpec::MaxPressure(p) => SignalSpec::MaxPressure(MpPlan {
                    cycle_s: p.cycle_s / factor,
                    switches_per_cycle: p.switches_per_cycle,
                }),
            })
            .collect();
        Scenario { network: self.network.clone(), signals }
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// Isolated signalized queue: one entry link feeding one exit link through a
/// single movement.
pub fn single_queue_network(e_vph: f64, sat_vph: f64, capacity: Option<u32>) -> Network {
    single_queue_network_with_phases(e_vph, sat_vph, capacity, false)
}

fn single_queue_network_with_phases(
    e_vph: f64,
    sat_vph: f64,
    capacity: Option<u32>,
    with_red_phase: bool,
) -> Network {
    let links = vec![
        Link {
            id: "src".into(),
            travel_time_s: 0.0,
            storage_capacity: capacity,
            is_entry: true,
            is_exit: false,
        },
        Link {
            id: "snk".into(),
            travel_time_s: 0.0,
            storage_capacity: None,
            is_entry: false,
            is_exit: true,
        },
    ];
    let movements = vec![Movement {
        from: "src".into(),
        to: "snk".into(),
        saturation_flow_vph: sat_vph,
        intersection: "X".into(),
        turn: TurnKind::Through,
        always_served: false,
    }];
    let routing = RoutingMatrix::new(1);
    let demand = DemandProfile { rates_vph: vec![e_vph], gain: 1.0 };
    let phases = if with_red_phase {
        vec![
            Phase { movements: vec![], min_green_s: 0.0 },
            Phase { movements: vec![0], min_green_s: 0.0 },
        ]
    } else {
        vec![Phase { movements: vec![0], min_green_s: 0.0 }]
    };
    let intersections = vec![Intersection { id: "X".into(), movements: vec![0], phases }];
    Network::new(links, movements, routing, demand, intersections).expect("valid builder network")
}

/// The single queue with a red-first fixed-time plan: red for `red_s`, then
/// green for `cycle_s - red_s`. A zero red duration yields an always-green
/// single-phase plan.
pub fn single_queue_scenario(
    e_vph: f64,
    sat_vph: f64,
    capacity: Option<u32>,
    cycle_s: f64,
    red_s: f64,
) -> Scenario {
    let network = single_queue_network_with_phases(e_vph, sat_vph, capacity, red_s > 0.0);
    let greens = if red_s > 0.0 { vec![red_s, cycle_s - red_s] } else { vec![cycle_s] };
    let signals = vec![SignalSpec::FixedTime(FtPlan {
        cycle_s,
        offset_s: 0.0,
        g_speed: 1.0,
        phase_greens_s: greens,
    })];
    Scenario { network, signals }
}

/// Small two-intersection arterial used by unit tests: intersections A and B
/// joined by a pair of directed links, three entries feeding each.
pub fn two_intersection_test_network() -> Network {
    two_intersection_scenario().network
}

pub fn two_intersection_scenario() -> Scenario {
    let mk_link = |id: &str, tt: f64, entry: bool, exit: bool| Link {
        id: id.into(),
        travel_time_s: tt,
        storage_capacity: None,
        is_entry: entry,
        is_exit: exit,
    };
    let links = vec![
        mk_link("w_in", 10.0, true, false),
        mk_link("w_out", 10.0, false, true),
        mk_link("na_in", 10.0, true, false),
        mk_link("na_out", 10.0, false, true),
        mk_link("ab", 30.0, false, false),
        mk_link("ba", 30.0, false, false),
        mk_link("e_in", 10.0, true, false),
        mk_link("e_out", 10.0, false, true),
        mk_link("nb_in", 10.0, true, false),
        mk_link("nb_out", 10.0, false, true),
    ];
    let mk_m = |from: &str, to: &str, inter: &str, turn: TurnKind| Movement {
        from: from.into(),
        to: to.into(),
        saturation_flow_vph: 1900.0,
        intersection: inter.into(),
        turn,
        always_served: false,
    };
    let movements = vec![
        mk_m("w_in", "ab", "A", TurnKind::Through), // 0
        mk_m("w_in", "na_out", "A", TurnKind::Left), // 1
        mk_m("ba", "w_out", "A", TurnKind::Through), // 2
        mk_m("ba", "na_out", "A", TurnKind::Right), // 3
        mk_m("na_in", "ab", "A", TurnKind::Right),  // 4
        mk_m("na_in", "w_out", "A", TurnKind::Left), // 5
        mk_m("ab", "e_out", "B", TurnKind::Through), // 6
        mk_m("ab", "nb_out", "B", TurnKind::Left),  // 7
        mk_m("e_in", "ba", "B", TurnKind::Through), // 8
        mk_m("e_in", "nb_out", "B", TurnKind::Right), // 9
        mk_m("nb_in", "e_out", "B", TurnKind::Right), // 10
        mk_m("nb_in", "ba", "B", TurnKind::Left),   // 11
    ];
    let mut routing = RoutingMatrix::new(movements.len());
    for from in [0usize, 4] {
        routing.set(from, 6, 0.7);
        routing.set(from, 7, 0.3);
    }
    for from in [8usize, 11] {
        routing.set(from, 2, 0.8);
        routing.set(from, 3, 0.2);
    }
    let mut rates = vec![0.0; movements.len()];
    rates[0] = 500.0;
    rates[1] = 100.0;
    rates[4] = 150.0;
    rates[5] = 100.0;
    rates[8] = 400.0;
    rates[9] = 80.0;
    rates[10] = 90.0;
    rates[11] = 120.0;

    let intersections = vec![
        Intersection {
            id: "A".into(),
            movements: vec![0, 1, 2, 3, 4, 5],
            phases: vec![
                Phase { movements: vec![0, 2], min_green_s: 0.0 },
                Phase { movements: vec![1, 3], min_green_s: 0.0 },
                Phase { movements: vec![4, 5], min_green_s: 0.0 },
            ],
        },
        Intersection {
            id: "B".into(),
            movements: vec![6, 7, 8, 9, 10, 11],
            phases: vec![
                Phase { movements: vec![6, 8], min_green_s: 0.0 },
                Phase { movements: vec![7, 9], min_green_s: 0.0 },
                Phase { movements: vec![10, 11], min_green_s: 0.0 },
            ],
        },
    ];
    let network = Network::new(
        links,
        movements,
        routing,
        DemandProfile { rates_vph: rates, gain: 1.0 },
        intersections,
    )
    .expect("valid builder network");
    let signals = vec![
        SignalSpec::FixedTime(FtPlan {
            cycle_s: 120.0,
            offset_s: 0.0,
            g_speed: 1.0,
            phase_greens_s: vec![60.0, 30.0, 30.0],
        }),
        SignalSpec::FixedTime(FtPlan {
            cycle_s: 120.0,
            offset_s: 30.0,
            g_speed: 1.0,
            phase_greens_s: vec![60.0, 30.0, 30.0],
        }),
    ];
    Scenario { network, signals }
}

// ---------------------------------------------------------------------------
// 2x2 grid builder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub cycle_s: f64,
    pub through_green_s: f64,
    pub left_green_s: f64,
    pub saturation_flow_vph: f64,
    pub link_travel_s: f64,
    /// Target max volume-capacity ratio over movements at gain 1.
    pub target_vc: f64,
    /// Relative demand weight of east-west vs north-south entries.
    pub ew_weight: f64,
    pub ns_weight: f64,
    /// Turn fractions (through, left, right); must sum to 1.
    pub turn_split: (f64, f64, f64),
    pub rights_always_served: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            cycle_s: 120.0,
            through_green_s: 40.0,
            left_green_s: 20.0,
            saturation_flow_vph: 1900.0,
            link_travel_s: 30.0,
            target_vc: 0.8,
            ew_weight: 1.8,
            ns_weight: 0.35,
            turn_split: (0.75, 0.10, 0.15),
            rights_always_served: true,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    fn all() -> [Dir; 4] {
        [Dir::N, Dir::E, Dir::S, Dir::W]
    }
    fn opposite(self) -> Dir {
        match self {
            Dir::N => Dir::S,
            Dir::S => Dir::N,
            Dir::E => Dir::W,
            Dir::W => Dir::E,
        }
    }
    /// Right turn for a vehicle heading in `self`.
    fn right(self) -> Dir {
        match self {
            Dir::N => Dir::E,
            Dir::E => Dir::S,
            Dir::S => Dir::W,
            Dir::W => Dir::N,
        }
    }
    fn left(self) -> Dir {
        self.right().opposite()
    }
    fn tag(self) -> &'static str {
        match self {
            Dir::N => "n",
            Dir::E => "e",
            Dir::S => "s",
            Dir::W => "w",
        }
    }
}

/// Four signalized intersections on a 2x2 grid with eight entry links.
/// Exogenous demand is solved against the routing matrix so that the most
/// loaded movement sits at `target_vc` under fixed-time control.
pub fn grid_2x2(cfg: &GridConfig) -> Scenario {
    let inters = ["i11", "i12", "i21", "i22"];
    // Neighbor of intersection `idx` in direction d, if any.
    let neighbor = |idx: usize, d: Dir| -> Option<usize> {
        match (idx, d) {
            (0, Dir::E) => Some(1),
            (0, Dir::S) => Some(2),
            (1, Dir::W) => Some(0),
            (1, Dir::S) => Some(3),
            (2, Dir::N) => Some(0),
            (2, Dir::E) => Some(3),
            (3, Dir::N) => Some(1),
            (3, Dir::W) => Some(2),
            _ => None,
        }
    };

    let mut links: Vec<Link> = Vec::new();
    // Incoming link id at intersection idx from side d, and outgoing on side d.
    let in_id = |idx: usize, d: Dir| -> String {
        match neighbor(idx, d) {
            Some(n) => format!("{}_{}", inters[n], inters[idx]),
            None => format!("in_{}_{}", inters[idx], d.tag()),
        }
    };
    let out_id = |idx: usize, d: Dir| -> String {
        match neighbor(idx, d) {
            Some(n) => format!("{}_{}", inters[idx], inters[n]),
            None => format!("out_{}_{}", inters[idx], d.tag()),
        }
    };
    let mk_link = |id: String, entry: bool, exit: bool| Link {
        id,
        travel_time_s: cfg.link_travel_s,
        storage_capacity: None,
        is_entry: entry,
        is_exit: exit,
    };
    for idx in 0..4 {
        for d in Dir::all() {
            match neighbor(idx, d) {
                Some(_) => {
                    // Created once, from the upstream side.
                    let id = out_id(idx, d);
                    if !links.iter().any(|l| l.id == id) {
                        links.push(mk_link(id, false, false));
                    }
                }
                None => {
                    links.push(mk_link(in_id(idx, d), true, false));
                    links.push(mk_link(out_id(idx, d), false, true));
                }
            }
        }
    }

    let mut movements: Vec<Movement> = Vec::new();
    for idx in 0..4 {
        for approach in Dir::all() {
            let heading = approach.opposite();
            let from = in_id(idx, approach);
            for (turn, to_dir) in [
                (TurnKind::Through, heading),
                (TurnKind::Left, heading.left()),
                (TurnKind::Right, heading.right()),
            ] {
                movements.push(Movement {
                    from: from.clone(),
                    to: out_id(idx, to_dir),
                    saturation_flow_vph: cfg.saturation_flow_vph,
                    intersection: inters[idx].into(),
                    turn,
                    always_served: cfg.rights_always_served && turn == TurnKind::Right,
                });
            }
        }
    }

    let find = |from: &str, to: &str| -> MovementIdx {
        movements
            .iter()
            .position(|m| m.from == from && m.to == to)
            .expect("grid movement exists")
    };
    let (p_t, p_l, p_r) = cfg.turn_split;
    let mut routing = RoutingMatrix::new(movements.len());
    for (j, m) in movements.iter().enumerate() {
        let to_exit = m.to.starts_with("out_");
        if to_exit {
            continue;
        }
        // Vehicles landing on an internal link split by turn at the next
        // intersection.
        let targets: Vec<(MovementIdx, f64)> = movements
            .iter()
            .enumerate()
            .filter(|(_, t)| t.from == m.to)
            .map(|(i, t)| {
                let p = match t.turn {
                    TurnKind::Through => p_t,
                    TurnKind::Left => p_l,
                    TurnKind::Right => p_r,
                };
                (i, p)
            })
            .collect();
        let total: f64 = targets.iter().map(|(_, p)| p).sum();
        for (i, p) in targets {
            routing.set(j, i, p / total);
        }
    }

    // Demand: every entry approach feeds its three movements by turn split.
    let mut rates = vec![0.0; movements.len()];
    for idx in 0..4 {
        for approach in Dir::all() {
            if neighbor(idx, approach).is_some() {
                continue;
            }
            let weight = match approach {
                Dir::E | Dir::W => cfg.ew_weight,
                Dir::N | Dir::S => cfg.ns_weight,
            };
            let heading = approach.opposite();
            let from = in_id(idx, approach);
            for (turn_p, to_dir) in
                [(p_t, heading), (p_l, heading.left()), (p_r, heading.right())]
            {
                rates[find(&from, &out_id(idx, to_dir))] = weight * turn_p;
            }
        }
    }

    // Phase tables: EW through+right, EW left, NS through+right, NS left.
    let mut intersections = Vec::new();
    let mut signals = Vec::new();
    for idx in 0..4 {
        let owned: Vec<MovementIdx> = movements
            .iter()
            .enumerate()
            .filter(|(_, m)| m.intersection == inters[idx])
            .map(|(i, _)| i)
            .collect();
        let phase = |approaches: [Dir; 2], turns: &[TurnKind]| -> Phase {
            let ms = owned
                .iter()
                .copied()
                .filter(|&mi| {
                    let m = &movements[mi];
                    approaches.iter().any(|&a| m.from == in_id(idx, a))
                        && turns.contains(&m.turn)
                })
                .collect();
            Phase { movements: ms, min_green_s: 0.0 }
        };
        let phases = vec![
            phase([Dir::E, Dir::W], &[TurnKind::Through, TurnKind::Right]),
            phase([Dir::E, Dir::W], &[TurnKind::Left]),
            phase([Dir::N, Dir::S], &[TurnKind::Through, TurnKind::Right]),
            phase([Dir::N, Dir::S], &[TurnKind::Left]),
        ];
        intersections.push(Intersection { id: inters[idx].into(), movements: owned, phases });
        signals.push(SignalSpec::FixedTime(FtPlan {
            cycle_s: cfg.cycle_s,
            offset_s: 0.0,
            g_speed: 1.0,
            phase_greens_s: vec![
                cfg.through_green_s,
                cfg.left_green_s,
                cfg.through_green_s,
                cfg.left_green_s,
            ],
        }));
    }

    let mut network = Network::new(
        links,
        movements,
        routing,
        DemandProfile { rates_vph: rates, gain: 1.0 },
        intersections,
    )
    .expect("valid grid network");

    // Size demand to the target VC ratio by solving the flow balance
    // f = e + R^T f and rescaling e.
    let flows = equilibrium_flows(&network);
    let mut max_vc = 0.0f64;
    for (i, m) in network.movements.iter().enumerate() {
        let ratio = green_ratio_for(&network, &signals, i);
        let vc = flows[i] / (m.saturation_flow_vph * ratio);
        max_vc = max_vc.max(vc);
    }
    let scale = cfg.target_vc / max_vc;
    for e in &mut network.demand.rates_vph {
        *e *= scale;
    }

    Scenario { network, signals }
}

/// Expected per-movement flow under the routing matrix: the fixed point of
/// f = e + R^T f, by iteration (the spectral radius is below one because all
/// traffic eventually exits).
pub fn equilibrium_flows(network: &Network) -> Vec<f64> {
    let n = network.n_movements();
    let e = &network.demand.rates_vph;
    let mut f = e.clone();
    for _ in 0..500 {
        let mut next = e.clone();
        for j in 0..n {
            for &(i, p) in network.routing.row(j) {
                next[i] += f[j] * p;
            }
        }
        let delta: f64 =
            f.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        f = next;
        if delta < 1e-12 {
            break;
        }
    }
    f
}

fn green_ratio_for(network: &Network, signals: &[SignalSpec], movement: MovementIdx) -> f64 {
    if network.movements[movement].always_served {
        return 1.0;
    }
    let inter_pos = network
        .intersections
        .iter()
        .position(|i| i.id == network.movements[movement].intersection)
        .expect("movement belongs to an intersection");
    let inter = &network.intersections[inter_pos];
    match &signals[inter_pos] {
        SignalSpec::FixedTime(plan) => {
            let green: f64 = inter
                .phases
                .iter()
                .zip(&plan.phase_greens_s)
                .filter(|(p, _)| p.movements.contains(&movement))
                .map(|(_, g)| g)
                .sum();
            green / plan.cycle_s
        }
        SignalSpec::MaxPressure(_) => 0.5,
    }
}

/// Randomized arterial of two to four intersections with entries at both
/// ends and on every north approach: randomized greens, offsets, travel
/// times, routing splits and demands, all queues uncapped. Used by the
/// scaling-property checks, which hold regardless of stability.
pub fn random_arterial(seed: u64) -> Scenario {
    use rand::Rng as _;
    use rand::SeedableRng as _;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
    let k = 2 + (seed % 3) as usize;

    let mut links: Vec<Link> = Vec::new();
    let mut link = |id: String, tt: f64, entry: bool, exit: bool, links: &mut Vec<Link>| {
        links.push(Link {
            id,
            travel_time_s: tt,
            storage_capacity: None,
            is_entry: entry,
            is_exit: exit,
        });
    };
    let tt = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(15.0..45.0);
    link("w_in".into(), tt(&mut rng), true, false, &mut links);
    link("w_out".into(), tt(&mut rng), false, true, &mut links);
    link("e_in".into(), tt(&mut rng), true, false, &mut links);
    link("e_out".into(), tt(&mut rng), false, true, &mut links);
    for i in 0..k {
        link(format!("n{i}_in"), tt(&mut rng), true, false, &mut links);
        link(format!("s{i}_out"), tt(&mut rng), false, true, &mut links);
        if i + 1 < k {
            link(format!("f{i}"), tt(&mut rng), false, false, &mut links);
            link(format!("b{i}"), tt(&mut rng), false, false, &mut links);
        }
    }

    let eb_in = |i: usize| if i == 0 { "w_in".to_string() } else { format!("f{}", i - 1) };
    let eb_out = |i: usize| if i + 1 == k { "e_out".to_string() } else { format!("f{i}") };
    let wb_in = |i: usize| if i + 1 == k { "e_in".to_string() } else { format!("b{i}") };
    let wb_out = |i: usize| if i == 0 { "w_out".to_string() } else { format!("b{}", i - 1) };

    let mut movements: Vec<Movement> = Vec::new();
    let mut sat = || -> f64 { 1500.0 + 800.0 * rng.random::<f64>() };
    for i in 0..k {
        let inter = format!("I{i}");
        let mut m = |from: String, to: String, turn: TurnKind, sat: f64| {
            movements.push(Movement {
                from,
                to,
                saturation_flow_vph: sat,
                intersection: inter.clone(),
                turn,
                always_served: false,
            });
        };
        m(eb_in(i), eb_out(i), TurnKind::Through, sat());
        m(eb_in(i), format!("s{i}_out"), TurnKind::Right, sat());
        m(wb_in(i), wb_out(i), TurnKind::Through, sat());
        m(wb_in(i), format!("s{i}_out"), TurnKind::Left, sat());
        m(format!("n{i}_in"), eb_out(i), TurnKind::Left, sat());
        m(format!("n{i}_in"), wb_out(i), TurnKind::Right, sat());
    }

    let mut routing = RoutingMatrix::new(movements.len());
    for j in 0..movements.len() {
        let to = movements[j].to.clone();
        if to.starts_with("f") || to.starts_with("b") {
            let targets: Vec<MovementIdx> = movements
                .iter()
                .enumerate()
                .filter(|(_, m)| m.from == to)
                .map(|(i, _)| i)
                .collect();
            let p_through = 0.5 + 0.4 * rng.random::<f64>();
            // Two targets per internal link: the through and the turn.
            for &i in &targets {
                let p = if movements[i].turn == TurnKind::Through {
                    p_through
                } else {
                    (1.0 - p_through) / (targets.len() as f64 - 1.0)
                };
                routing.set(j, i, p);
            }
        }
    }

    let mut rates = vec![0.0; movements.len()];
    for (i, m) in movements.iter().enumerate() {
        let entry = m.from == "w_in" || m.from == "e_in" || m.from.starts_with("n");
        if entry {
            rates[i] = rng.random_range(50.0..400.0);
        }
    }

    let mut intersections = Vec::new();
    let mut signals = Vec::new();
    for i in 0..k {
        let owned: Vec<MovementIdx> = movements
            .iter()
            .enumerate()
            .filter(|(_, m)| m.intersection == format!("I{i}"))
            .map(|(idx, _)| idx)
            .collect();
        // Arterial phase and side-street phase.
        let arterial: Vec<MovementIdx> = owned
            .iter()
            .copied()
            .filter(|&mi| !movements[mi].from.starts_with("n"))
            .collect();
        let side: Vec<MovementIdx> = owned
            .iter()
            .copied()
            .filter(|&mi| movements[mi].from.starts_with("n"))
            .collect();
        let g0 = rng.random_range(30.0..70.0f64);
        let g1 = rng.random_range(20.0..50.0f64);
        let cycle = g0 + g1;
        let offset = rng.random_range(0.0..cycle);
        intersections.push(Intersection {
            id: format!("I{i}"),
            movements: owned,
            phases: vec![
                Phase { movements: arterial, min_green_s: 0.0 },
                Phase { movements: side, min_green_s: 0.0 },
            ],
        });
        signals.push(SignalSpec::FixedTime(FtPlan {
            cycle_s: cycle,
            offset_s: offset,
            g_speed: 1.0,
            phase_greens_s: vec![g0, g1],
        }));
    }

    let network = Network::new(
        links,
        movements,
        routing,
        DemandProfile { rates_vph: rates, gain: 1.0 },
        intersections,
    )
    .expect("valid random arterial");
    Scenario { network, signals }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_arterials_are_well_formed() {
        for seed in 0..8 {
            let scenario = random_arterial(seed);
            let violations = scenario.network.validate();
            assert!(violations.is_empty(), "seed {seed}: {violations:?}");
        }
    }

    #[test]
    fn two_intersection_scenario_round_trips_through_toml() {
        let scenario = two_intersection_scenario();
        let text = scenario.to_toml_string();
        let parsed = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(parsed.network, scenario.network);
        assert_eq!(parsed.signals, scenario.signals);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let scenario = two_intersection_scenario();
        let mut text = scenario.to_toml_string();
        text.push_str("\n[[links]]\nid = \"zz\"\ntravel_time = 1.0\nbogus_field = 3\n");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(_)), "got {err:?}");
    }

    #[test]
    fn undefined_movement_reference_is_rejected() {
        let text = r#"
[[links]]
id = "a"
travel_time = 1.0
entry = true

[[links]]
id = "b"
travel_time = 1.0
exit = true

[[movements]]
from = "a"
to = "b"
saturation_flow = 1800.0
intersection = "X"
turn = "through"

[demands]
"a>zz" = 100.0

[signals.X]
type = "fixed_time"
cycle = 60.0
phases = [{ movements = ["a>b"], green = 60.0 }]
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("undefined movement"), "{err}");
    }

    #[test]
    fn greens_must_fill_the_cycle() {
        let text = r#"
[[links]]
id = "a"
travel_time = 1.0
entry = true

[[links]]
id = "b"
travel_time = 1.0
exit = true

[[movements]]
from = "a"
to = "b"
saturation_flow = 1800.0
intersection = "X"
turn = "through"

[signals.X]
type = "fixed_time"
cycle = 60.0
phases = [{ movements = ["a>b"], green = 40.0 }]
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("sum to"), "{err}");
    }

    #[test]
    fn missing_signal_definition_is_rejected() {
        let text = r#"
[[links]]
id = "a"
travel_time = 1.0
entry = true

[[links]]
id = "b"
travel_time = 1.0
exit = true

[[movements]]
from = "a"
to = "b"
saturation_flow = 1800.0
intersection = "X"
turn = "through"

[signals]
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("no signal definition"), "{err}");
    }

    #[test]
    fn grid_is_well_formed_and_hits_target_vc() {
        let cfg = GridConfig::default();
        let scenario = grid_2x2(&cfg);
        let violations = scenario.network.validate();
        assert!(violations.is_empty(), "{violations:?}");
        assert_eq!(scenario.network.intersections.len(), 4);
        assert_eq!(
            scenario.network.links.iter().filter(|l| l.is_entry).count(),
            8,
            "grid must have eight entry links"
        );
        assert_eq!(scenario.network.n_movements(), 48);

        let flows = equilibrium_flows(&scenario.network);
        let max_vc = scenario
            .network
            .movements
            .iter()
            .enumerate()
            .map(|(i, m)| {
                flows[i]
                    / (m.saturation_flow_vph
                        * green_ratio_for(&scenario.network, &scenario.signals, i))
            })
            .fold(0.0f64, f64::max);
        assert!((max_vc - cfg.target_vc).abs() < 1e-9, "max VC = {max_vc}");
    }

    #[test]
    fn grid_round_trips_through_toml() {
        let scenario = grid_2x2(&GridConfig::default());
        let parsed = Scenario::from_toml_str(&scenario.to_toml_string()).unwrap();
        assert_eq!(parsed.network, scenario.network);
        assert_eq!(parsed.signals, scenario.signals);
    }

    #[test]
    fn speedup_divides_cycle_and_preserves_ratios() {
        let scenario = two_intersection_scenario();
        let sped = scenario.sped_up(2.0);
        match (&scenario.signals[0], &sped.signals[0]) {
            (SignalSpec::FixedTime(a), SignalSpec::FixedTime(b)) => {
                assert_eq!(b.g_speed, 2.0 * a.g_speed);
                assert_eq!(a.effective_cycle_s(), 2.0 * b.effective_cycle_s());
            }
            _ => panic!("expected fixed time"),
        }
    }
}
