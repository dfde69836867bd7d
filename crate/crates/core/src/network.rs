//! Road-network data model shared by the fluid and discrete-event simulators:
//! links, turn movements (queues), the routing matrix, and demand profiles.
//!
//! Networks are immutable after construction and safe to share across
//! concurrent simulation runs. Movements are indexed densely in file order;
//! all simulators and tie-breaks use that index.

use std::collections::{HashMap, HashSet, VecDeque};

/// Tolerance on routing-row sums.
pub const ROUTING_ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: String,
    /// Fixed traversal time of the link, seconds.
    pub travel_time_s: f64,
    /// Maximum number of vehicles the link can store, if finite.
    pub storage_capacity: Option<u32>,
    /// Receives exogenous demand.
    pub is_entry: bool,
    /// Vehicles departing onto this link leave the network.
    pub is_exit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    Through,
    Left,
    Right,
}

/// A turn movement: the queue of vehicles on link `from` waiting to enter
/// link `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct Movement {
    pub from: String,
    pub to: String,
    pub saturation_flow_vph: f64,
    pub intersection: String,
    pub turn: TurnKind,
    /// Served at saturation flow regardless of signal state (right turn on
    /// red).
    pub always_served: bool,
}

impl Movement {
    pub fn key(&self) -> String {
        format!("{}>{}", self.from, self.to)
    }
}

/// Dense movement index into `Network::movements`.
pub type MovementIdx = usize;
pub type LinkIdx = usize;

/// Sparse row-stochastic routing between movements. Probabilities are stored
/// per source movement in destination-index order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingMatrix {
    rows: Vec<Vec<(MovementIdx, f64)>>,
}

impl RoutingMatrix {
    pub fn new(n_movements: usize) -> Self {
        Self { rows: vec![Vec::new(); n_movements] }
    }

    pub fn set(&mut self, from: MovementIdx, to: MovementIdx, p: f64) {
        let row = &mut self.rows[from];
        match row.iter_mut().find(|(idx, _)| *idx == to) {
            Some(entry) => entry.1 = p,
            None => {
                row.push((to, p));
                row.sort_by_key(|(idx, _)| *idx);
            }
        }
    }

    pub fn row(&self, from: MovementIdx) -> &[(MovementIdx, f64)] {
        &self.rows[from]
    }

    pub fn get(&self, from: MovementIdx, to: MovementIdx) -> f64 {
        self.rows[from]
            .iter()
            .find(|(idx, _)| *idx == to)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    pub fn row_sum(&self, from: MovementIdx) -> f64 {
        self.rows[from].iter().map(|(_, p)| p).sum()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Constant exogenous arrival rates per movement plus the gain already
/// applied to this network.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProfile {
    /// vph per movement, indexed like `Network::movements`.
    pub rates_vph: Vec<f64>,
    /// Cumulative scale factor applied via `Network::scale`.
    pub gain: f64,
}

/// An intersection owns a set of movements and the phase table used by the
/// signal controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct Intersection {
    pub id: String,
    pub movements: Vec<MovementIdx>,
    pub phases: Vec<Phase>,
}

/// A set of movements that may safely run together.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub movements: Vec<MovementIdx>,
    pub min_green_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub links: Vec<Link>,
    pub movements: Vec<Movement>,
    pub routing: RoutingMatrix,
    pub demand: DemandProfile,
    pub intersections: Vec<Intersection>,
    link_index: HashMap<String, LinkIdx>,
    movement_index: HashMap<(String, String), MovementIdx>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkError {
    DuplicateLink(String),
    DuplicateMovement(String),
    NonPositiveGain(f64),
}

impl std::fmt::Display for NetworkError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NetworkError::DuplicateLink(id) => write!(f, "duplicate link id {id}"),
            NetworkError::DuplicateMovement(key) => write!(f, "duplicate movement {key}"),
            NetworkError::NonPositiveGain(g) => write!(f, "gain must be positive, got {g}"),
        }
    }
}

impl std::error::Error for NetworkError {}

/// One broken invariant, naming the entity and the rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

impl Network {
    pub fn new(
        links: Vec<Link>,
        movements: Vec<Movement>,
        routing: RoutingMatrix,
        demand: DemandProfile,
        intersections: Vec<Intersection>,
    ) -> Result<Self, NetworkError> {
        let mut link_index = HashMap::new();
        for (i, link) in links.iter().enumerate() {
            if link_index.insert(link.id.clone(), i).is_some() {
                return Err(NetworkError::DuplicateLink(link.id.clone()));
            }
        }
        let mut movement_index = HashMap::new();
        for (i, m) in movements.iter().enumerate() {
            if movement_index.insert((m.from.clone(), m.to.clone()), i).is_some() {
                return Err(NetworkError::DuplicateMovement(m.key()));
            }
        }
        Ok(Self { links, movements, routing, demand, intersections, link_index, movement_index })
    }

    pub fn link_idx(&self, id: &str) -> Option<LinkIdx> {
        self.link_index.get(id).copied()
    }

    pub fn movement_idx(&self, from: &str, to: &str) -> Option<MovementIdx> {
        self.movement_index.get(&(from.to_string(), to.to_string())).copied()
    }

    pub fn n_movements(&self) -> usize {
        self.movements.len()
    }

    /// The delay a vehicle leaving movement `j` experiences before joining a
    /// queue on j's outgoing link: the travel time of that link.
    pub fn transfer_delay_s(&self, j: MovementIdx) -> f64 {
        match self.link_idx(&self.movements[j].to) {
            Some(l) => self.links[l].travel_time_s,
            None => 0.0,
        }
    }

    /// Movements whose incoming link is `link`.
    pub fn movements_on_link(&self, link: LinkIdx) -> Vec<MovementIdx> {
        let id = &self.links[link].id;
        self.movements
            .iter()
            .enumerate()
            .filter(|(_, m)| &m.from == id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Returns one record per broken invariant; an empty list means the
    /// network is well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let v = |entity: &str, rule: &str| Violation { entity: entity.into(), rule: rule.into() };

        for link in &self.links {
            if !(link.travel_time_s >= 0.0) {
                out.push(v(&format!("link {}", link.id), "travel_time must be >= 0"));
            }
            if let Some(k) = link.storage_capacity {
                if k < 1 {
                    out.push(v(&format!("link {}", link.id), "storage_capacity must be >= 1"));
                }
            }
        }

        for (i, m) in self.movements.iter().enumerate() {
            let name = format!("movement {}", m.key());
            if !(m.saturation_flow_vph > 0.0) {
                out.push(v(&name, "saturation_flow must be > 0"));
            }
            let from = self.link_idx(&m.from);
            let to = self.link_idx(&m.to);
            if from.is_none() {
                out.push(v(&name, "dangling link: incoming link does not exist"));
            }
            if to.is_none() {
                out.push(v(&name, "dangling link: outgoing link does not exist"));
            }
            if self.demand.rates_vph[i] > 0.0 {
                if let Some(l) = from {
                    if !self.links[l].is_entry {
                        out.push(v(&name, "exogenous demand on a non-entry link"));
                    }
                }
            }
            if self.demand.rates_vph[i] < 0.0 {
                out.push(v(&name, "exogenous demand must be >= 0"));
            }
        }

        for (j, m) in self.movements.iter().enumerate() {
            let name = format!("movement {}", m.key());
            let goes_to_exit =
                self.link_idx(&m.to).map(|l| self.links[l].is_exit).unwrap_or(false);
            let sum = self.routing.row_sum(j);
            if goes_to_exit {
                if sum > ROUTING_ROW_TOL {
                    out.push(v(&name, "routing out of an exit-bound movement"));
                }
            } else if (sum - 1.0).abs() > ROUTING_ROW_TOL {
                if sum < 1.0 {
                    out.push(v(&name, &format!("routing row underflow: sums to {sum}")));
                } else {
                    out.push(v(&name, &format!("routing row overflow: sums to {sum}")));
                }
            }
            for &(i, p) in self.routing.row(j) {
                if !(0.0..=1.0).contains(&p) {
                    out.push(v(&name, &format!("routing probability {p} outside [0, 1]")));
                }
                // Link compatibility: j's outgoing link must be i's incoming.
                if self.movements[i].from != m.to {
                    out.push(v(
                        &name,
                        &format!("routes to link-incompatible movement {}", self.movements[i].key()),
                    ));
                }
            }
        }

        let mut seen = HashSet::new();
        for inter in &self.intersections {
            let name = format!("intersection {}", inter.id);
            if !seen.insert(&inter.id) {
                out.push(v(&name, "duplicate intersection id"));
            }
            let mut phase_sets: Vec<Vec<MovementIdx>> = Vec::new();
            for phase in &inter.phases {
                let mut sorted = phase.movements.clone();
                sorted.sort_unstable();
                if phase_sets.contains(&sorted) {
                    out.push(v(&name, "duplicate phase"));
                }
                phase_sets.push(sorted);
                for &mi in &phase.movements {
                    if !inter.movements.contains(&mi) {
                        out.push(v(&name, "phase references a movement of another intersection"));
                    }
                }
                if phase.min_green_s < 0.0 {
                    out.push(v(&name, "min_green must be >= 0"));
                }
            }
            for &mi in &inter.movements {
                let covered = inter.phases.iter().any(|p| p.movements.contains(&mi))
                    || self.movements[mi].always_served;
                if !covered {
                    out.push(v(
                        &format!("movement {}", self.movements[mi].key()),
                        "not covered by any phase of its intersection",
                    ));
                }
            }
        }

        out.extend(self.reachability_violations());
        out
    }

    /// Every movement must be reachable from an entry link and must reach an
    /// exit link through positive-probability routing.
    fn reachability_violations(&self) -> Vec<Violation> {
        let n = self.n_movements();
        let mut reachable = vec![false; n];
        let mut frontier: VecDeque<MovementIdx> = VecDeque::new();
        for (i, m) in self.movements.iter().enumerate() {
            let entry = self.link_idx(&m.from).map(|l| self.links[l].is_entry).unwrap_or(false);
            if entry {
                reachable[i] = true;
                frontier.push_back(i);
            }
        }
        while let Some(j) = frontier.pop_front() {
            for &(i, p) in self.routing.row(j) {
                if p > 0.0 && !reachable[i] {
                    reachable[i] = true;
                    frontier.push_back(i);
                }
            }
        }

        let mut reaches_exit = vec![false; n];
        for (i, m) in self.movements.iter().enumerate() {
            if self.link_idx(&m.to).map(|l| self.links[l].is_exit).unwrap_or(false) {
                reaches_exit[i] = true;
            }
        }
        // Reverse closure over positive routing edges.
        let mut changed = true;
        while changed {
            changed = false;
            for j in 0..n {
                if reaches_exit[j] {
                    continue;
                }
                if self.routing.row(j).iter().any(|&(i, p)| p > 0.0 && reaches_exit[i]) {
                    reaches_exit[j] = true;
                    changed = true;
                }
            }
        }

        let mut out = Vec::new();
        for i in 0..n {
            let name = format!("movement {}", self.movements[i].key());
            if !reachable[i] {
                out.push(Violation {
                    entity: name.clone(),
                    rule: "unreachable from any entry link".into(),
                });
            }
            if !reaches_exit[i] {
                out.push(Violation { entity: name, rule: "cannot reach any exit link".into() });
            }
        }
        out
    }

    /// Copy of the network with every saturation flow and every exogenous
    /// demand multiplied by `gain`. Routing, travel times, storage capacities
    /// and phase tables are unchanged.
    pub fn scale(&self, gain: f64) -> Result<Network, NetworkError> {
        if !(gain > 0.0) {
            return Err(NetworkError::NonPositiveGain(gain));
        }
        let mut scaled = self.clone();
        for m in &mut scaled.movements {
            m.saturation_flow_vph *= gain;
        }
        for e in &mut scaled.demand.rates_vph {
            *e *= gain;
        }
        scaled.demand.gain = self.demand.gain * gain;
        Ok(scaled)
    }

    pub fn total_demand_vph(&self) -> f64 {
        self.demand.rates_vph.iter().sum()
    }
}
