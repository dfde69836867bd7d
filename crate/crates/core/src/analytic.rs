//! Closed-form single-queue calculators: M/M/1 delay, the M/M/1/K stationary
//! distribution, and an on/off (green/red) memoryless queue solved exactly by
//! renewal-reward cycle analysis, with a continuous-time Monte-Carlo oracle.
//!
//! All rates are per hour and all delays are in hours internally; callers
//! convert to seconds for reporting.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative margin used when enforcing strict stability. Inputs at or beyond
/// `bound * (1 - MARGIN)` are rejected because the closed forms blow up there.
const STABILITY_MARGIN: f64 = 1e-12;

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticError {
    /// Arrival rate at or above the effective service rate.
    Unstable { lambda_vph: f64, capacity_vph: f64 },
    BadParams(String),
    /// The renewal-reward linear system was singular; cannot happen for
    /// stable inputs and indicates a bug.
    Internal(String),
}

impl std::fmt::Display for AnalyticError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnalyticError::Unstable { lambda_vph, capacity_vph } => write!(
                f,
                "unstable queue: arrival rate {lambda_vph} vph is not below capacity {capacity_vph} vph"
            ),
            AnalyticError::BadParams(msg) => write!(f, "bad parameters: {msg}"),
            AnalyticError::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl std::error::Error for AnalyticError {}

fn require_stable(lambda: f64, capacity: f64) -> Result<(), AnalyticError> {
    if lambda < capacity * (1.0 - STABILITY_MARGIN) {
        Ok(())
    } else {
        Err(AnalyticError::Unstable { lambda_vph: lambda, capacity_vph: capacity })
    }
}

// ---------------------------------------------------------------------------
// M/M/1
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mm1Params {
    pub lambda_vph: f64,
    pub mu_vph: f64,
}

impl Mm1Params {
    pub fn new(lambda_vph: f64, mu_vph: f64) -> Result<Self, AnalyticError> {
        if !(lambda_vph >= 0.0 && mu_vph > 0.0) {
            return Err(AnalyticError::BadParams("need lambda >= 0 and mu > 0".into()));
        }
        Ok(Self { lambda_vph, mu_vph })
    }

    pub fn load(&self) -> f64 {
        self.lambda_vph / self.mu_vph
    }
}

/// Mean time in queue for a stable M/M/1 queue, hours.
pub fn mm1_delay_h(p: Mm1Params) -> Result<f64, AnalyticError> {
    require_stable(p.lambda_vph, p.mu_vph)?;
    let rho = p.load();
    Ok(rho / (1.0 - rho) / p.mu_vph)
}

// ---------------------------------------------------------------------------
// M/M/1/K
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mm1kParams {
    pub lambda_vph: f64,
    pub mu_vph: f64,
    pub capacity: u32,
}

impl Mm1kParams {
    pub fn new(lambda_vph: f64, mu_vph: f64, capacity: u32) -> Result<Self, AnalyticError> {
        if !(lambda_vph >= 0.0 && mu_vph > 0.0) {
            return Err(AnalyticError::BadParams("need lambda >= 0 and mu > 0".into()));
        }
        if capacity < 1 {
            return Err(AnalyticError::BadParams("capacity K must be >= 1".into()));
        }
        Ok(Self { lambda_vph, mu_vph, capacity })
    }

    pub fn load(&self) -> f64 {
        self.lambda_vph / self.mu_vph
    }
}

/// Stationary distribution pi_0..pi_K. The load-one case takes the uniform
/// limit rather than evaluating the indeterminate formula.
pub fn mm1k_distribution(p: Mm1kParams) -> Vec<f64> {
    let k = p.capacity as usize;
    let rho = p.load();
    if rho == 1.0 {
        return vec![1.0 / (k as f64 + 1.0); k + 1];
    }
    let norm = (1.0 - rho) / (1.0 - rho.powi(k as i32 + 1));
    (0..=k).map(|i| rho.powi(i as i32) * norm).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mm1kMetrics {
    pub mean_queue: f64,
    pub blocking_probability: f64,
    /// Admitted throughput lambda * (1 - pi_K), vph.
    pub effective_throughput_vph: f64,
    /// Mean delay by Little's law, hours. Undefined when lambda = 0.
    pub mean_delay_h: Option<f64>,
}

/// Mean queue, blocking, effective throughput and Little's-law delay.
pub fn mm1k_metrics(p: Mm1kParams) -> Mm1kMetrics {
    let k = p.capacity as f64;
    let rho = p.load();
    let mean_queue = if rho == 1.0 {
        k / 2.0
    } else {
        let ki = p.capacity as i32;
        rho * (1.0 - (k + 1.0) * rho.powi(ki) + k * rho.powi(ki + 1))
            / ((1.0 - rho) * (1.0 - rho.powi(ki + 1)))
    };
    let pi_k = *mm1k_distribution(p).last().expect("distribution is non-empty");
    let lambda_e = p.lambda_vph * (1.0 - pi_k);
    let mean_delay_h = if lambda_e > 0.0 { Some(mean_queue / lambda_e) } else { None };
    Mm1kMetrics {
        mean_queue,
        blocking_probability: pi_k,
        effective_throughput_vph: lambda_e,
        mean_delay_h,
    }
}

// ---------------------------------------------------------------------------
// On/off memoryless queue (renewal-reward analysis)
// ---------------------------------------------------------------------------

/// Parameters of the two-dimensional chain: Poisson arrivals, service at the
/// saturation rate while the light is on, and exponential on/off switching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnOffQueueParams {
    pub lambda_vph: f64,
    pub mu_vph: f64,
    /// green -> red switching rate, per hour.
    pub gamma1_per_h: f64,
    /// red -> green switching rate, per hour.
    pub gamma2_per_h: f64,
}

impl OnOffQueueParams {
    pub fn new(
        lambda_vph: f64,
        mu_vph: f64,
        gamma1_per_h: f64,
        gamma2_per_h: f64,
    ) -> Result<Self, AnalyticError> {
        if !(lambda_vph >= 0.0 && mu_vph > 0.0 && gamma1_per_h >= 0.0 && gamma2_per_h > 0.0) {
            return Err(AnalyticError::BadParams(
                "need lambda, gamma1 >= 0 and mu, gamma2 > 0".into(),
            ));
        }
        Ok(Self { lambda_vph, mu_vph, gamma1_per_h, gamma2_per_h })
    }

    /// Long-run fraction of time the light is on.
    pub fn green_fraction(&self) -> f64 {
        self.gamma2_per_h / (self.gamma1_per_h + self.gamma2_per_h)
    }

    /// Effective service rate, the stability boundary for lambda.
    pub fn capacity_vph(&self) -> f64 {
        self.green_fraction() * self.mu_vph
    }

    /// Scaled copy: lambda and mu multiplied by `gain`, both switching rates
    /// by `speedup` (which divides the mean cycle time).
    pub fn scaled(&self, gain: f64, speedup: f64) -> Self {
        Self {
            lambda_vph: self.lambda_vph * gain,
            mu_vph: self.mu_vph * gain,
            gamma1_per_h: self.gamma1_per_h * speedup,
            gamma2_per_h: self.gamma2_per_h * speedup,
        }
    }
}

/// Full solution of the renewal cycle analysis: the expected cycle duration,
/// the expected reward (queue-length integral) per cycle, the intermediate
/// left-passage unknowns, and the derived means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RrrSolution {
    /// Expected renewal-cycle duration, hours.
    pub cycle_h: f64,
    /// Expected reward accumulated per cycle, vehicle-hours.
    pub reward: f64,
    /// Expected time to move one level left from a green state.
    pub t_left_green: f64,
    /// Expected time to reach green from a red state at the same level.
    pub t_left_red: f64,
    /// Expected reward over a left passage from a green state at level 1.
    pub r_left_green: f64,
    /// Expected reward from level 0 red back to green.
    pub r_left_red: f64,
    /// Mean queue length R/T, vehicles.
    pub mean_queue: f64,
    /// Mean delay R/(lambda T), hours. Undefined when lambda = 0.
    pub mean_delay_h: Option<f64>,
}

/// Solves a 3x3 linear system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3], AnalyticError> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-300 {
            return Err(AnalyticError::Internal("singular 3x3 system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in (row + 1)..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Solves the two 3x3 renewal-reward systems for the on/off queue.
///
/// The time unknowns are the cycle duration T, the one-level left-passage
/// time from a green state, and the red-to-green passage time; the level
/// homogeneity of the chain closes the system. The reward system reuses the
/// time solution through the identities tying rewards one level up to the
/// passage times.
pub fn rrr_solve(p: OnOffQueueParams) -> Result<RrrSolution, AnalyticError> {
    require_stable(p.lambda_vph, p.capacity_vph())?;
    let (la, mu, g1, g2) = (p.lambda_vph, p.mu_vph, p.gamma1_per_h, p.gamma2_per_h);

    // Unknowns [T, Tg, Tr]:
    //   (la+g1) T  - la Tg      - g1 Tr = 1
    //              (mu-la) Tg   - g1 Tr = 1
    //             - la Tg       + g2 Tr = 1
    let times = solve3(
        [
            [la + g1, -la, -g1],
            [0.0, mu - la, -g1],
            [0.0, -la, g2],
        ],
        [1.0, 1.0, 1.0],
    )?;
    let [cycle, t_g, t_r] = times;

    // Unknowns [R, Rg, Rr]:
    //   (la+g1) R  - la Rg      - g1 Rr = 0
    //              (mu-la) Rg   - g1 Rr = 1 + la Tg + g1 Tr
    //             - la Rg       + g2 Rr = la Tr
    let rewards = solve3(
        [
            [la + g1, -la, -g1],
            [0.0, mu - la, -g1],
            [0.0, -la, g2],
        ],
        [0.0, 1.0 + la * t_g + g1 * t_r, la * t_r],
    )?;
    let [reward, r_g, r_r] = rewards;

    if !(cycle > 0.0) || reward < 0.0 {
        return Err(AnalyticError::Internal(format!(
            "renewal solution out of range: T={cycle}, R={reward}"
        )));
    }
    let mean_queue = reward / cycle;
    let mean_delay_h = if la > 0.0 { Some(mean_queue / la) } else { None };
    Ok(RrrSolution {
        cycle_h: cycle,
        reward,
        t_left_green: t_g,
        t_left_red: t_r,
        r_left_green: r_g,
        r_left_red: r_r,
        mean_queue,
        mean_delay_h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnOffMeans {
    pub mean_queue: f64,
    pub mean_delay_h: Option<f64>,
}

/// Closed-form mean queue and delay of the on/off queue.
pub fn onoff_closed_form(p: OnOffQueueParams) -> Result<OnOffMeans, AnalyticError> {
    require_stable(p.lambda_vph, p.capacity_vph())?;
    let (la, mu, g1, g2) = (p.lambda_vph, p.mu_vph, p.gamma1_per_h, p.gamma2_per_h);
    let gsum = g1 + g2;
    let denom = g2 * mu - la * gsum;
    let mean_queue = (la * g1 * g1 + 2.0 * la * g1 * g2 + la * g1 * mu + la * g2 * g2)
        / (gsum * denom);
    let mean_delay_h = if la > 0.0 {
        Some((g1 + g2 + g1 * mu / gsum) / denom)
    } else {
        None
    };
    Ok(OnOffMeans { mean_queue, mean_delay_h })
}

// ---------------------------------------------------------------------------
// Monte-Carlo oracle for the on/off chain
// ---------------------------------------------------------------------------

/// Time-average estimates with batch-means confidence intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean_queue: f64,
    pub mean_delay_h: Option<f64>,
    pub batches: usize,
    /// Per-batch time-averaged queue lengths.
    pub batch_means: Vec<f64>,
}

impl MonteCarloEstimate {
    /// Half-width of the batch-means confidence interval on the mean queue at
    /// the given confidence level (e.g. 0.99).
    pub fn queue_half_width(&self, confidence: f64) -> f64 {
        let n = self.batch_means.len();
        if n < 2 {
            return f64::INFINITY;
        }
        let mean = self.mean_queue;
        let var = self
            .batch_means
            .iter()
            .map(|m| (m - mean) * (m - mean))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let t = student_t_quantile(1.0 - (1.0 - confidence) / 2.0, (n - 1) as f64);
        t * (var / n as f64).sqrt()
    }

    pub fn queue_interval(&self, confidence: f64) -> (f64, f64) {
        let hw = self.queue_half_width(confidence);
        (self.mean_queue - hw, self.mean_queue + hw)
    }
}

fn student_t_quantile(p: f64, dof: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    StudentsT::new(0.0, 1.0, dof)
        .expect("valid t distribution")
        .inverse_cdf(p)
}

/// Simulates the continuous-time on/off chain by exponential event sampling
/// and returns the time-averaged queue length over the horizon, split into
/// `batches` batches for the confidence interval. The delay estimate follows
/// from Little's law with the offered rate (the queue never blocks).
pub fn onoff_montecarlo(
    p: OnOffQueueParams,
    horizon_h: f64,
    batches: usize,
    seed: u64,
) -> Result<MonteCarloEstimate, AnalyticError> {
    require_stable(p.lambda_vph, p.capacity_vph())?;
    if !(horizon_h > 0.0) || batches < 2 {
        return Err(AnalyticError::BadParams("need horizon > 0 and batches >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (la, mu, g1, g2) = (p.lambda_vph, p.mu_vph, p.gamma1_per_h, p.gamma2_per_h);

    let mut t = 0.0f64;
    let mut queue = 0u64;
    let mut green = true;
    let batch_len = horizon_h / batches as f64;
    let mut batch_means = Vec::with_capacity(batches);
    let mut batch_end = batch_len;
    let mut area = 0.0f64; // queue-time integral within the current batch

    while t < horizon_h {
        let serve = if green && queue > 0 { mu } else { 0.0 };
        let switch = if green { g1 } else { g2 };
        let total = la + serve + switch;
        // With lambda = 0 and no service pending the only event is a switch;
        // gamma2 > 0 guarantees total > 0 in red, and green states with
        // total = 0 (lambda = gamma1 = 0, empty queue) never change again.
        if total <= 0.0 {
            break;
        }
        let u: f64 = rng.random::<f64>();
        let dt = -(1.0 - u).ln() / total;
        let mut t_next = t + dt;
        if t_next > horizon_h {
            t_next = horizon_h;
        }
        // Close out any batch boundaries crossed by this holding interval.
        while batch_end <= t_next && batch_means.len() < batches {
            area += queue as f64 * (batch_end - t);
            batch_means.push(area / batch_len);
            area = 0.0;
            t = batch_end;
            batch_end += batch_len;
        }
        area += queue as f64 * (t_next - t);
        t = t_next;
        if t >= horizon_h {
            break;
        }
        let draw: f64 = rng.random::<f64>() * total;
        if draw < la {
            queue += 1;
        } else if draw < la + serve {
            queue -= 1;
        } else {
            green = !green;
        }
    }
    while batch_means.len() < batches {
        area += queue as f64 * (batch_end.min(horizon_h) - t);
        batch_means.push(area / batch_len);
        area = 0.0;
        t = batch_end.min(horizon_h);
        batch_end += batch_len;
    }

    let mean_queue = batch_means.iter().sum::<f64>() / batches as f64;
    let mean_delay_h = if la > 0.0 { Some(mean_queue / la) } else { None };
    Ok(MonteCarloEstimate { mean_queue, mean_delay_h, batches, batch_means })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: OnOffQueueParams = OnOffQueueParams {
        lambda_vph: 900.0,
        mu_vph: 2000.0,
        gamma1_per_h: 30.0,
        gamma2_per_h: 30.0,
    };

    #[test]
    fn mm1_delay_matches_direct_substitution() {
        let p = Mm1Params::new(0.0, 2000.0).unwrap();
        assert_eq!(mm1_delay_h(p).unwrap(), 0.0);

        let p = Mm1Params::new(900.0, 2000.0).unwrap();
        let d = mm1_delay_h(p).unwrap();
        assert!((d - 4.0909090909e-4).abs() < 1e-12);
        assert!((d * SECONDS_PER_HOUR - 1.47).abs() < 0.01);
    }

    #[test]
    fn mm1_delay_scales_inversely_with_gain() {
        let base = mm1_delay_h(Mm1Params::new(900.0, 2000.0).unwrap()).unwrap();
        for gain in [1.5, 2.0, 3.0] {
            let scaled =
                mm1_delay_h(Mm1Params::new(900.0 * gain, 2000.0 * gain).unwrap()).unwrap();
            assert!((scaled - base / gain).abs() < 1e-15);
        }
    }

    #[test]
    fn mm1_rejects_unstable_and_boundary_inputs() {
        assert!(matches!(
            mm1_delay_h(Mm1Params::new(2000.0, 2000.0).unwrap()),
            Err(AnalyticError::Unstable { .. })
        ));
        assert!(mm1_delay_h(Mm1Params::new(2000.0 * (1.0 - 1e-14), 2000.0).unwrap()).is_err());
        assert!(mm1_delay_h(Mm1Params::new(1999.0, 2000.0).unwrap()).is_ok());
    }

    #[test]
    fn mm1k_distribution_sums_to_one() {
        for (lambda, mu, k) in [
            (800.0, 1000.0, 10u32),
            (1000.0, 1000.0, 4),
            (10.0, 1000.0, 3),
            (3000.0, 1000.0, 7),
            (0.0, 1000.0, 5),
        ] {
            let dist = mm1k_distribution(Mm1kParams::new(lambda, mu, k).unwrap());
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "lambda={lambda} K={k} sum={sum}");
            assert_eq!(dist.len(), k as usize + 1);
        }
    }

    #[test]
    fn load_one_gives_uniform_distribution() {
        let dist = mm1k_distribution(Mm1kParams::new(1000.0, 1000.0, 4).unwrap());
        for pi in dist {
            assert!((pi - 0.2).abs() < 1e-15);
        }
        let m = mm1k_metrics(Mm1kParams::new(1000.0, 1000.0, 4).unwrap());
        assert!((m.mean_queue - 2.0).abs() < 1e-12);
    }

    #[test]
    fn blocking_probability_at_vc_08_k10() {
        let p = Mm1kParams::new(800.0, 1000.0, 10).unwrap();
        let dist = mm1k_distribution(p);
        let pi_k = dist[10];
        // Direct normalized power sum as the independent route.
        let rho: f64 = 0.8;
        let direct = rho.powi(10) / (0..=10).map(|i| rho.powi(i)).sum::<f64>();
        assert!((pi_k - direct).abs() < 1e-12);
        assert!((pi_k - 0.02349).abs() < 5e-6);
    }

    #[test]
    fn blocking_is_invariant_under_common_scaling() {
        let base = mm1k_metrics(Mm1kParams::new(800.0, 1000.0, 10).unwrap());
        for gain in [1.5, 2.0, 3.0] {
            let scaled =
                mm1k_metrics(Mm1kParams::new(800.0 * gain, 1000.0 * gain, 10).unwrap());
            assert!((scaled.blocking_probability - base.blocking_probability).abs() < 1e-14);
            assert!(
                (scaled.effective_throughput_vph - gain * base.effective_throughput_vph).abs()
                    < 1e-9
            );
            let (db, ds) = (base.mean_delay_h.unwrap(), scaled.mean_delay_h.unwrap());
            assert!((ds - db / gain).abs() < 1e-15);
        }
    }

    #[test]
    fn mm1k_mean_queue_matches_direct_sum() {
        for (lambda, k) in [(800.0, 10u32), (500.0, 4), (1200.0, 6), (999.0, 20)] {
            let p = Mm1kParams::new(lambda, 1000.0, k).unwrap();
            let metrics = mm1k_metrics(p);
            let direct: f64 = mm1k_distribution(p)
                .iter()
                .enumerate()
                .map(|(i, pi)| i as f64 * pi)
                .sum();
            assert!(
                (metrics.mean_queue - direct).abs() < 1e-9 * direct.max(1.0),
                "lambda={lambda} K={k}: {} vs {direct}",
                metrics.mean_queue
            );
        }
    }

    #[test]
    fn mm1k_limits() {
        // Vanishing load: empty queue, no blocking.
        let m = mm1k_metrics(Mm1kParams::new(1e-6, 1000.0, 10).unwrap());
        assert!(m.mean_queue < 1e-8);
        assert!((m.effective_throughput_vph - 1e-6).abs() < 1e-12);
        // Large K at rho = 0.5 approaches the M/M/1 mean rho/(1-rho) = 1.
        let m = mm1k_metrics(Mm1kParams::new(500.0, 1000.0, 60).unwrap());
        assert!((m.mean_queue - 1.0).abs() < 1e-12);
        // Zero arrivals: delay undefined, queue empty.
        let m = mm1k_metrics(Mm1kParams::new(0.0, 1000.0, 5).unwrap());
        assert_eq!(m.mean_queue, 0.0);
        assert_eq!(m.mean_delay_h, None);
    }

    #[test]
    fn rrr_base_case_gives_159_vehicles() {
        let sol = rrr_solve(BASE).unwrap();
        assert!((sol.mean_queue - 159.0).abs() < 1e-9);
        let d = sol.mean_delay_h.unwrap();
        assert!((d - 159.0 / 900.0).abs() < 1e-12);
        assert!((d * SECONDS_PER_HOUR - 636.0).abs() < 1e-6);
        // Intermediate unknowns from hand elimination of the two systems.
        assert!((sol.t_left_green - 0.01).abs() < 1e-12);
        assert!((sol.t_left_red - 1.0 / 3.0).abs() < 1e-12);
        assert!((sol.cycle_h - 20.0 / 930.0).abs() < 1e-12);
        assert!((sol.r_left_green - 1.6).abs() < 1e-12);
        assert!((sol.r_left_red - 58.0).abs() < 1e-12);
        assert!((sol.reward - 3180.0 / 930.0).abs() < 1e-12);
    }

    #[test]
    fn rrr_with_never_red_reduces_to_mm1() {
        let p = OnOffQueueParams::new(900.0, 2000.0, 0.0, 30.0).unwrap();
        let sol = rrr_solve(p).unwrap();
        assert!((sol.mean_queue - 900.0 / 1100.0).abs() < 1e-12);
        let cf = onoff_closed_form(p).unwrap();
        assert!((cf.mean_queue - 900.0 / 1100.0).abs() < 1e-12);
    }

    #[test]
    fn rrr_rejects_unstable_inputs() {
        // Capacity is 1000 vph at the base switching rates.
        let p = OnOffQueueParams::new(1000.0, 2000.0, 30.0, 30.0).unwrap();
        assert!(matches!(rrr_solve(p), Err(AnalyticError::Unstable { .. })));
        assert!(matches!(onoff_closed_form(p), Err(AnalyticError::Unstable { .. })));
    }

    #[test]
    fn queue_diverges_near_the_stability_boundary() {
        let near = OnOffQueueParams::new(999.9999, 2000.0, 30.0, 30.0).unwrap();
        assert!(onoff_closed_form(near).unwrap().mean_queue > 1e5);
    }

    /// The linear-system route and the closed form agree across a randomized
    /// sweep of the stability region.
    #[test]
    fn rrr_agrees_with_closed_form_across_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let mu = rng.random_range(500.0..4000.0);
            let g1 = rng.random_range(0.0..80.0);
            let g2 = rng.random_range(5.0..80.0);
            let cap = mu * g2 / (g1 + g2);
            let lambda = rng.random_range(0.0..0.95) * cap;
            let p = OnOffQueueParams::new(lambda, mu, g1, g2).unwrap();
            let a = rrr_solve(p).unwrap().mean_queue;
            let b = onoff_closed_form(p).unwrap().mean_queue;
            assert!(
                (a - b).abs() <= 1e-9 * b.abs().max(1.0),
                "mismatch at {p:?}: {a} vs {b}"
            );
        }
    }

    /// The paper-family delay formula: scaling rates by the gain and switching
    /// by the speedup gives D = (60 g + 1000 Gamma) / (g * 30 * 200 * Gamma)
    /// for the (2000, 900, 30, 30) base family.
    #[test]
    fn scaled_family_delay_formula() {
        for gain in [1.0, 1.5, 2.0, 2.5, 3.0] {
            for speedup in [1.0, 1.5, 2.0, 3.0] {
                let p = BASE.scaled(gain, speedup);
                let d = onoff_closed_form(p).unwrap().mean_delay_h.unwrap();
                let expected = (60.0 * speedup + 1000.0 * gain)
                    / (speedup * 30.0 * 200.0 * gain);
                assert!(
                    (d - expected).abs() < 1e-12 * expected,
                    "gain={gain} speedup={speedup}"
                );
                // Little's law ties the two closed forms together exactly.
                let n = onoff_closed_form(p).unwrap().mean_queue;
                assert!((n - p.lambda_vph * d).abs() < 1e-9 * n);
            }
        }
    }

    #[test]
    fn delay_nearly_flat_in_gain_and_decreasing_in_speedup() {
        let delays: Vec<f64> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&g| onoff_closed_form(BASE.scaled(g, 1.0)).unwrap().mean_delay_h.unwrap())
            .collect();
        for d in &delays {
            assert!(*d >= 0.167 && *d <= 0.177, "delay {d} outside expected band");
        }
        let spread = (delays.iter().cloned().fold(f64::MIN, f64::max)
            - delays.iter().cloned().fold(f64::MAX, f64::min))
            / delays.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.06);

        let mut prev = f64::INFINITY;
        for speedup in [1.0, 1.5, 2.0, 3.0] {
            let d = onoff_closed_form(BASE.scaled(1.0, speedup)).unwrap().mean_delay_h.unwrap();
            assert!(d < prev, "delay must decrease with speedup");
            prev = d;
        }
    }

    #[test]
    fn montecarlo_never_red_matches_mm1_mean() {
        let p = OnOffQueueParams::new(900.0, 2000.0, 0.0, 30.0).unwrap();
        let est = onoff_montecarlo(p, 2000.0, 20, 42).unwrap();
        let truth = 9.0 / 11.0;
        let (lo, hi) = est.queue_interval(0.99);
        assert!(lo <= truth && truth <= hi, "CI [{lo}, {hi}] misses {truth}");
    }

    #[test]
    fn montecarlo_base_case_brackets_closed_form() {
        let est = onoff_montecarlo(BASE, 10_000.0, 20, 3).unwrap();
        let (lo, hi) = est.queue_interval(0.99);
        assert!(lo <= 159.0 && 159.0 <= hi, "CI [{lo}, {hi}] misses 159");
        let d = est.mean_delay_h.unwrap();
        assert!((d - est.mean_queue / 900.0).abs() < 1e-12);
    }

    #[test]
    fn montecarlo_no_arrivals_is_exactly_empty() {
        let p = OnOffQueueParams::new(0.0, 2000.0, 30.0, 30.0).unwrap();
        let est = onoff_montecarlo(p, 100.0, 10, 1).unwrap();
        assert_eq!(est.mean_queue, 0.0);
        assert_eq!(est.mean_delay_h, None);
    }

    #[test]
    fn montecarlo_is_deterministic_per_seed() {
        let a = onoff_montecarlo(BASE, 50.0, 10, 9).unwrap();
        let b = onoff_montecarlo(BASE, 50.0, 10, 9).unwrap();
        assert_eq!(a.batch_means, b.batch_means);
        let c = onoff_montecarlo(BASE, 50.0, 10, 10).unwrap();
        assert_ne!(a.batch_means, c.batch_means);
    }
}
