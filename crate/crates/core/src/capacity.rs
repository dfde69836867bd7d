//! Intersection capacity arithmetic, platoon headway gains, and empirical
//! saturation-flow estimation from stop-bar detector traces.

/// One lane group feeding an intersection: `N` lanes at base saturation rate
/// `s0`, corrected by an adjustment factor and served for a fraction of the
/// cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneGroupSpec {
    pub lanes: u32,
    /// Base saturation rate per lane, vph.
    pub base_rate_vph: f64,
    /// Multiplicative adjustment factor for geometry/traffic composition.
    pub adjustment: f64,
    /// Effective green ratio g/T in (0, 1].
    pub green_ratio: f64,
}

impl LaneGroupSpec {
    pub fn saturation_flow_vph(&self) -> f64 {
        self.lanes as f64 * self.base_rate_vph * self.adjustment
    }
}

/// Headway parameters for a mixed platoon of connected and regular vehicles.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadwaySpec {
    /// Headway achieved between two consecutive connected vehicles, seconds.
    pub h_low_s: f64,
    /// Headway when either vehicle of a pair is regular, seconds.
    pub h_high_s: f64,
    /// Ordered vehicle labels for the platoon crossing the stop bar.
    pub labels: Vec<VehicleKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehicleKind {
    Connected,
    Regular,
}

impl VehicleKind {
    /// Parses a compact label string such as "CRCCRCCCCCCC".
    pub fn parse_labels(s: &str) -> Result<Vec<VehicleKind>, CapacityError> {
        s.chars()
            .map(|c| match c {
                'C' | 'c' => Ok(VehicleKind::Connected),
                'R' | 'r' => Ok(VehicleKind::Regular),
                other => Err(CapacityError::BadLabel(other)),
            })
            .collect()
    }
}

/// Times at which successive vehicles cross the stop bar within one green
/// phase, measured from the start of green. Strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrace {
    entry_times_s: Vec<f64>,
}

impl DetectorTrace {
    pub fn new(entry_times_s: Vec<f64>) -> Result<Self, CapacityError> {
        if entry_times_s.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(CapacityError::BadTrace(
                "entry times must be finite and positive".into(),
            ));
        }
        if entry_times_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CapacityError::BadTrace(
                "entry times must be strictly increasing".into(),
            ));
        }
        Ok(Self { entry_times_s })
    }

    pub fn len(&self) -> usize {
        self.entry_times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_times_s.is_empty()
    }

    pub fn entry_times_s(&self) -> &[f64] {
        &self.entry_times_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CapacityError {
    BadLabel(char),
    BadTrace(String),
    TooFewVehicles,
    TraceTooShort { have: usize, want: usize },
    NonPositiveHeadway,
}

impl std::fmt::Display for CapacityError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CapacityError::BadLabel(c) => write!(f, "unknown vehicle label '{c}' (use C or R)"),
            CapacityError::BadTrace(msg) => write!(f, "bad detector trace: {msg}"),
            CapacityError::TooFewVehicles => {
                write!(f, "at least two vehicles are needed to form a headway")
            }
            CapacityError::TraceTooShort { have, want } => {
                write!(f, "trace has {have} entries but {want} were requested")
            }
            CapacityError::NonPositiveHeadway => write!(f, "headway must be positive"),
        }
    }
}

impl std::error::Error for CapacityError {}

/// Intersection capacity as the sum over lane groups of saturation flow times
/// effective green ratio.
pub fn intersection_capacity_vph(groups: &[LaneGroupSpec]) -> f64 {
    groups
        .iter()
        .map(|g| g.saturation_flow_vph() * g.green_ratio)
        .sum()
}

/// Result of a mixed-platoon headway computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlatoonGain {
    /// Mean headway over the n-1 vehicle pairs, seconds.
    pub mean_headway_s: f64,
    /// Saturation-flow gain relative to an all-regular platoon.
    pub gain: f64,
    /// Number of pairs that achieved the connected headway.
    pub low_pairs: usize,
    /// Number of pairs at the regular headway.
    pub high_pairs: usize,
}

/// Average headway and gain for a platoon with the given vehicle mix.
///
/// A pair of consecutive vehicles achieves the short headway only when both
/// are connected; any pair involving a regular vehicle falls back to the
/// regular headway. The gain is measured against the all-regular headway.
pub fn platoon_gain(spec: &HeadwaySpec) -> Result<PlatoonGain, CapacityError> {
    if !(spec.h_low_s > 0.0 && spec.h_high_s >= spec.h_low_s) {
        return Err(CapacityError::NonPositiveHeadway);
    }
    if spec.labels.len() < 2 {
        return Err(CapacityError::TooFewVehicles);
    }
    let mut low = 0usize;
    let mut high = 0usize;
    for pair in spec.labels.windows(2) {
        if pair[0] == VehicleKind::Connected && pair[1] == VehicleKind::Connected {
            low += 1;
        } else {
            high += 1;
        }
    }
    let n_pairs = (low + high) as f64;
    let mean = (high as f64 * spec.h_high_s + low as f64 * spec.h_low_s) / n_pairs;
    Ok(PlatoonGain {
        mean_headway_s: mean,
        gain: spec.h_high_s / mean,
        low_pairs: low,
        high_pairs: high,
    })
}

/// Saturation flow implied by a uniform headway.
pub fn headway_to_satflow_vph(headway_s: f64) -> Result<f64, CapacityError> {
    if !(headway_s > 0.0) {
        return Err(CapacityError::NonPositiveHeadway);
    }
    Ok(3600.0 / headway_s)
}

/// Empirical saturation flow from the first `n` stop-bar entries of a trace:
/// n vehicles divided by the n-th entry time.
pub fn empirical_satflow_vph(trace: &DetectorTrace, n: usize) -> Result<f64, CapacityError> {
    if n == 0 {
        return Err(CapacityError::TraceTooShort { have: trace.len(), want: 1 });
    }
    if trace.len() < n {
        return Err(CapacityError::TraceTooShort { have: trace.len(), want: n });
    }
    let t_n = trace.entry_times_s[n - 1];
    Ok(3600.0 * n as f64 / t_n)
}
