use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use trafficq_core::analytic::{
    mm1_delay_h, mm1k_distribution, mm1k_metrics, onoff_closed_form, onoff_montecarlo,
    rrr_solve, Mm1Params, Mm1kParams, OnOffQueueParams, SECONDS_PER_HOUR,
};
use trafficq_core::capacity::{
    empirical_satflow_vph, headway_to_satflow_vph, intersection_capacity_vph, platoon_gain,
    DetectorTrace, HeadwaySpec, LaneGroupSpec, VehicleKind,
};
use trafficq_core::des::{simulate, ControlMode, DesOptions, RngConfig};
use trafficq_core::experiment::{
    report_from_dir, run_experiment, scenario_hash, write_event_csv, write_vehicle_csv,
    Backend, ExperimentGrid, ExperimentOptions,
};
use trafficq_core::fluid::{
    check_homogeneity, check_speedup, fluid_schedules, integrate, speed_schedule, FluidOptions,
};
use trafficq_core::metrics::summarize;
use trafficq_core::scenario::Scenario;

#[derive(Parser)]
#[command(name = "trafficq", version, about = "Queueing-network traffic toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form queue calculators.
    Analytic(AnalyticArgs),
    /// Fluid network integrator.
    #[command(subcommand)]
    Fluid(FluidCmd),
    /// Stochastic discrete-event simulation.
    Simulate(SimulateArgs),
    /// Capacity and platoon-headway arithmetic.
    #[command(subcommand)]
    Capacity(CapacityCmd),
    /// Gain-sweep experiment grids.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

// ---------------------------------------------------------------------------
// analytic
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, ValueEnum)]
enum AnalyticModel {
    Mm1,
    Mm1k,
    Onoff,
}

#[derive(Args)]
struct AnalyticArgs {
    #[arg(value_enum)]
    model: AnalyticModel,
    /// Arrival rate, vph.
    #[arg(long)]
    lambda: f64,
    /// Service (saturation) rate, vph.
    #[arg(long)]
    mu: f64,
    /// Queue capacity (M/M/1/K only).
    #[arg(long)]
    k: Option<u32>,
    /// Green-to-red switching rate, per hour (on/off only).
    #[arg(long)]
    gamma1: Option<f64>,
    /// Red-to-green switching rate, per hour (on/off only).
    #[arg(long)]
    gamma2: Option<f64>,
    /// Common multiplier on lambda and mu.
    #[arg(long, default_value_t = 1.0)]
    gain: f64,
    /// Multiplier on the switching rates (divides the mean cycle).
    #[arg(long, default_value_t = 1.0)]
    speedup: f64,
    /// Emit a CSV sweep over gains and speedups instead of one report.
    #[arg(long)]
    sweep: bool,
    /// Gains for --sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,1.5,2,2.5,3")]
    gains: Vec<f64>,
    /// Speedups for --sweep.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    speedups: Vec<f64>,
    /// Also run the Monte-Carlo oracle for this many hours (on/off only).
    #[arg(long)]
    mc_horizon: Option<f64>,
    #[arg(long, default_value_t = 1)]
    mc_seed: u64,
}

fn cmd_analytic(args: &AnalyticArgs) -> Result<()> {
    match args.model {
        AnalyticModel::Mm1 => {
            if args.sweep {
                println!("gain,lambda_vph,mu_vph,delay_s");
                for &g in &args.gains {
                    let p = Mm1Params::new(args.lambda * g, args.mu * g)?;
                    let d = mm1_delay_h(p)?;
                    println!("{g},{},{},{}", p.lambda_vph, p.mu_vph, d * SECONDS_PER_HOUR);
                }
                return Ok(());
            }
            let p = Mm1Params::new(args.lambda * args.gain, args.mu * args.gain)?;
            let d = mm1_delay_h(p)?;
            println!("lambda_vph={}", p.lambda_vph);
            println!("mu_vph={}", p.mu_vph);
            println!("rho={}", p.load());
            println!("delay_h={d}");
            println!("delay_s={}", d * SECONDS_PER_HOUR);
        }
        AnalyticModel::Mm1k => {
            let k = args.k.context("--k is required for mm1k")?;
            if args.sweep {
                println!("gain,lambda_vph,mu_vph,k,blocking,mean_queue,throughput_vph,delay_s");
                for &g in &args.gains {
                    let p = Mm1kParams::new(args.lambda * g, args.mu * g, k)?;
                    let m = mm1k_metrics(p);
                    println!(
                        "{g},{},{},{k},{},{},{},{}",
                        p.lambda_vph,
                        p.mu_vph,
                        m.blocking_probability,
                        m.mean_queue,
                        m.effective_throughput_vph,
                        m.mean_delay_h.map(|d| d * SECONDS_PER_HOUR).unwrap_or(f64::NAN)
                    );
                }
                return Ok(());
            }
            let p = Mm1kParams::new(args.lambda * args.gain, args.mu * args.gain, k)?;
            let m = mm1k_metrics(p);
            let dist = mm1k_distribution(p);
            println!("lambda_vph={}", p.lambda_vph);
            println!("mu_vph={}", p.mu_vph);
            println!("k={k}");
            println!("rho={}", p.load());
            println!("blocking={}", m.blocking_probability);
            println!("mean_queue={}", m.mean_queue);
            println!("throughput_vph={}", m.effective_throughput_vph);
            match m.mean_delay_h {
                Some(d) => {
                    println!("delay_h={d}");
                    println!("delay_s={}", d * SECONDS_PER_HOUR);
                }
                None => println!("delay_h=undefined"),
            }
            println!(
                "pi={}",
                dist.iter().map(|p| format!("{p:.6}")).collect::<Vec<_>>().join(",")
            );
        }
        AnalyticModel::Onoff => {
            let g1 = args.gamma1.context("--gamma1 is required for onoff")?;
            let g2 = args.gamma2.context("--gamma2 is required for onoff")?;
            let base = OnOffQueueParams::new(args.lambda, args.mu, g1, g2)?;
            if args.sweep {
                println!("gain,speedup,lambda_vph,mu_vph,gamma1,gamma2,mean_queue,delay_s");
                for &g in &args.gains {
                    for &s in &args.speedups {
                        let p = base.scaled(g, s);
                        let cf = onoff_closed_form(p)?;
                        println!(
                            "{g},{s},{},{},{},{},{},{}",
                            p.lambda_vph,
                            p.mu_vph,
                            p.gamma1_per_h,
                            p.gamma2_per_h,
                            cf.mean_queue,
                            cf.mean_delay_h.map(|d| d * SECONDS_PER_HOUR).unwrap_or(f64::NAN)
                        );
                    }
                }
                return Ok(());
            }
            let p = base.scaled(args.gain, args.speedup);
            let sol = rrr_solve(p)?;
            let cf = onoff_closed_form(p)?;
            println!("lambda_vph={}", p.lambda_vph);
            println!("mu_vph={}", p.mu_vph);
            println!("gamma1_per_h={}", p.gamma1_per_h);
            println!("gamma2_per_h={}", p.gamma2_per_h);
            println!("capacity_vph={}", p.capacity_vph());
            println!("green_fraction={}", p.green_fraction());
            println!("cycle_h={}", sol.cycle_h);
            println!("reward_veh_h={}", sol.reward);
            println!("mean_queue={}", sol.mean_queue);
            println!("mean_queue_closed_form={}", cf.mean_queue);
            match sol.mean_delay_h {
                Some(d) => {
                    println!("delay_h={d}");
                    println!("delay_s={}", d * SECONDS_PER_HOUR);
                }
                None => println!("delay_h=undefined"),
            }
            if let Some(h) = args.mc_horizon {
                let est = onoff_montecarlo(p, h, 20, args.mc_seed)?;
                let hw = est.queue_half_width(0.99);
                println!("mc_mean_queue={}", est.mean_queue);
                println!("mc_ci99_half_width={hw}");
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fluid
// ---------------------------------------------------------------------------

#[derive(Subcommand)]
enum FluidCmd {
    /// Integrate a scenario and write the queue-trajectory CSV.
    Run(FluidRunArgs),
    /// Verify the scaling identities on a scenario.
    #[command(subcommand)]
    Check(FluidCheckCmd),
}

#[derive(Args)]
struct FluidRunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Horizon, seconds.
    #[arg(long)]
    horizon: f64,
    /// Scale demand and saturation flows by this factor.
    #[arg(long, default_value_t = 1.0)]
    gain: f64,
    /// Compress all fixed-time plans by this factor.
    #[arg(long, default_value_t = 1.0)]
    speedup: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum FluidCheckCmd {
    /// Max deviation of the gain-scaled run from gain * x(t).
    Homogeneity(FluidCheckArgs),
    /// Max deviation of the sped-up run from x(speedup * t) / speedup.
    Speedup(FluidCheckArgs),
}

#[derive(Args)]
struct FluidCheckArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    horizon: f64,
    /// Gain (homogeneity) or speedup factor.
    #[arg(long, default_value_t = 2.0)]
    factor: f64,
}

fn cmd_fluid(cmd: &FluidCmd) -> Result<()> {
    match cmd {
        FluidCmd::Run(args) => {
            let scenario = Scenario::load(&args.scenario)?;
            let violations = scenario.network.validate();
            if !violations.is_empty() {
                for v in &violations {
                    eprintln!("violation: {v}");
                }
                bail!("scenario has {} violations", violations.len());
            }
            let scaled = scenario.scaled(args.gain)?;
            let mut schedules = fluid_schedules(&scaled)?;
            if args.speedup != 1.0 {
                schedules = schedules.iter().map(|s| speed_schedule(s, args.speedup)).collect();
            }
            let x0 = vec![0.0; scaled.network.n_movements()];
            let traj =
                integrate(&scaled.network, &schedules, &x0, args.horizon, FluidOptions::default())?;
            let mut out = csv::Writer::from_path(&args.out)?;
            out.write_record(["movement_id", "t", "x"])?;
            for mi in 0..scaled.network.n_movements() {
                let key = scaled.network.movements[mi].key();
                for (t, x) in &traj.traces[mi].queue {
                    out.write_record([key.clone(), t.to_string(), x.to_string()])?;
                }
            }
            out.flush()?;
            let total_dropped: f64 = traj.dropped.iter().sum();
            println!("events={}", traj.events);
            println!("dropped_vehicles={total_dropped}");
            println!("wrote {}", args.out.display());
        }
        FluidCmd::Check(check) => {
            let (args, is_homogeneity) = match check {
                FluidCheckCmd::Homogeneity(a) => (a, true),
                FluidCheckCmd::Speedup(a) => (a, false),
            };
            let scenario = Scenario::load(&args.scenario)?;
            let schedules = fluid_schedules(&scenario)?;
            let x0 = vec![0.0; scenario.network.n_movements()];
            let dev = if is_homogeneity {
                check_homogeneity(&scenario.network, &schedules, &x0, args.factor, args.horizon)?
            } else {
                check_speedup(&scenario.network, &schedules, &x0, args.factor, args.horizon)?
            };
            println!("factor={}", args.factor);
            println!("max_relative_deviation={dev}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, ValueEnum)]
enum ControlArg {
    Ft,
    Mp4,
    Mp6,
}

impl From<ControlArg> for ControlMode {
    fn from(c: ControlArg) -> ControlMode {
        match c {
            ControlArg::Ft => ControlMode::FixedTime,
            ControlArg::Mp4 => ControlMode::MaxPressure { switches_per_cycle: 4 },
            ControlArg::Mp6 => ControlMode::MaxPressure { switches_per_cycle: 6 },
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    control: ControlArg,
    #[arg(long, default_value_t = 1.0)]
    gain: f64,
    /// Duration, seconds.
    #[arg(long)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    replications: u64,
    /// Metrics exclude this initial interval, seconds.
    #[arg(long, default_value_t = 600.0)]
    warmup: f64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let scenario = Scenario::load(&args.scenario)?;
    let scaled = scenario.scaled(args.gain)?;
    std::fs::create_dir_all(&args.out)?;
    let control: ControlMode = args.control.into();
    let n = scaled.network.n_movements();
    let mut total_queue_sum = 0.0;
    for rep in 0..args.replications {
        let log = simulate(
            &scaled,
            control,
            args.duration,
            RngConfig::new(args.seed, rep),
            DesOptions::default(),
        )?;
        log.check_conservation().map_err(|e| anyhow::anyhow!("conservation: {e}"))?;
        let ev = std::fs::File::create(args.out.join(format!("rep{rep}_events.csv")))?;
        write_event_csv(&log, &scaled, std::io::BufWriter::new(ev))?;
        let vr = std::fs::File::create(args.out.join(format!("rep{rep}_vehicles.csv")))?;
        write_vehicle_csv(&log, &scaled, std::io::BufWriter::new(vr))?;
        let summary = summarize(&log, n, args.warmup.min(args.duration * 0.5))?;
        println!(
            "rep={rep} vehicles={} exited={} dropped={} mean_total_queue={:.3} mean_delay_s={}",
            log.vehicles.len(),
            log.exited,
            log.dropped.iter().sum::<u64>(),
            summary.total_mean_queue,
            summary
                .mean_delay_s
                .map(|d| format!("{d:.2}"))
                .unwrap_or_else(|| "n/a".into()),
        );
        total_queue_sum += summary.total_mean_queue;
    }
    println!("mean_total_queue_over_reps={:.3}", total_queue_sum / args.replications as f64);
    println!("wrote logs to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// capacity
// ---------------------------------------------------------------------------

#[derive(Subcommand)]
enum CapacityCmd {
    /// Sum of saturation flow times green ratio over lane groups.
    Eq1 {
        /// TOML file with [[groups]] entries: lanes, base_rate, adjustment,
        /// green_ratio.
        #[arg(long)]
        groups: PathBuf,
    },
    /// Mixed-platoon average headway and gain.
    Gain {
        /// Vehicle labels, e.g. CRCCRCCCCCCC (C connected, R regular).
        #[arg(long)]
        labels: String,
        #[arg(long)]
        hlow: f64,
        #[arg(long)]
        hhigh: f64,
    },
    /// Empirical saturation flow from a stop-bar trace.
    Satflow {
        /// Text file with one entry time (seconds after green start) per
        /// line.
        #[arg(long)]
        trace: PathBuf,
        /// Number of leading vehicles to use.
        #[arg(long)]
        n: usize,
    },
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupsFile {
    groups: Vec<GroupEntry>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupEntry {
    lanes: u32,
    base_rate: f64,
    #[serde(default = "default_adjustment")]
    adjustment: f64,
    green_ratio: f64,
}

fn default_adjustment() -> f64 {
    1.0
}

fn cmd_capacity(cmd: &CapacityCmd) -> Result<()> {
    match cmd {
        CapacityCmd::Eq1 { groups } => {
            let text = std::fs::read_to_string(groups)?;
            let parsed: GroupsFile = toml::from_str(&text)?;
            let specs: Vec<LaneGroupSpec> = parsed
                .groups
                .iter()
                .map(|g| LaneGroupSpec {
                    lanes: g.lanes,
                    base_rate_vph: g.base_rate,
                    adjustment: g.adjustment,
                    green_ratio: g.green_ratio,
                })
                .collect();
            println!("groups={}", specs.len());
            println!("capacity_vph={}", intersection_capacity_vph(&specs));
        }
        CapacityCmd::Gain { labels, hlow, hhigh } => {
            let spec = HeadwaySpec {
                h_low_s: *hlow,
                h_high_s: *hhigh,
                labels: VehicleKind::parse_labels(labels)?,
            };
            let out = platoon_gain(&spec)?;
            println!("vehicles={}", spec.labels.len());
            println!("low_pairs={}", out.low_pairs);
            println!("high_pairs={}", out.high_pairs);
            println!("mean_headway_s={}", out.mean_headway_s);
            println!("gain={}", out.gain);
            println!("satflow_vph={}", headway_to_satflow_vph(out.mean_headway_s)?);
        }
        CapacityCmd::Satflow { trace, n } => {
            let text = std::fs::read_to_string(trace)?;
            let times: Vec<f64> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| l.parse::<f64>().with_context(|| format!("bad entry time '{l}'")))
                .collect::<Result<_>>()?;
            let trace = DetectorTrace::new(times)?;
            let s = empirical_satflow_vph(&trace, *n)?;
            println!("n={n}");
            println!("t_n_s={}", trace.entry_times_s()[n - 1]);
            println!("headway_s={}", trace.entry_times_s()[n - 1] / *n as f64);
            println!("satflow_vph={s}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Run the gain x control grid and persist summaries and reports.
    Run(ExperimentRunArgs),
    /// Rebuild reports from a persisted result directory.
    Report(ExperimentReportArgs),
}

#[derive(Args)]
struct ExperimentRunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,1.5,2,2.5,3")]
    gains: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "ft,mp4,mp6")]
    controls: Vec<String>,
    #[arg(long, default_value_t = 20)]
    reps: u64,
    #[arg(long, default_value_t = 10800.0)]
    duration: f64,
    #[arg(long, default_value_t = 600.0)]
    warmup: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// des (stochastic) or fluid (deterministic, fixed-time only).
    #[arg(long, default_value = "des")]
    backend: String,
    /// Also persist raw per-replication event and vehicle CSVs.
    #[arg(long)]
    save_logs: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentReportArgs {
    #[arg(long = "in")]
    in_dir: PathBuf,
    /// Tables to print: queues, ratios, delays.
    #[arg(long, value_delimiter = ',', default_value = "ratios,delays")]
    tables: Vec<String>,
    #[arg(long, default_value = "csv")]
    format: String,
}

fn parse_control(s: &str) -> Result<ControlMode> {
    Ok(match s {
        "ft" => ControlMode::FixedTime,
        "mp4" => ControlMode::MaxPressure { switches_per_cycle: 4 },
        "mp6" => ControlMode::MaxPressure { switches_per_cycle: 6 },
        other => bail!("unknown control '{other}' (use ft, mp4 or mp6)"),
    })
}

fn cmd_experiment(cmd: &ExperimentCmd) -> Result<()> {
    match cmd {
        ExperimentCmd::Run(args) => {
            let scenario = Scenario::load(&args.scenario)?;
            let controls: Vec<ControlMode> =
                args.controls.iter().map(|c| parse_control(c)).collect::<Result<_>>()?;
            let backend = match args.backend.as_str() {
                "des" => Backend::Des,
                "fluid" => Backend::Fluid,
                other => bail!("unknown backend '{other}'"),
            };
            let grid = ExperimentGrid {
                gains: args.gains.clone(),
                controls,
                replications: args.reps,
                master_seed: args.seed,
                duration_s: args.duration,
                warmup_s: args.warmup,
            };
            let opts = ExperimentOptions {
                backend,
                out_dir: Some(args.out.clone()),
                save_logs: args.save_logs,
            };
            println!("scenario_sha256={}", scenario_hash(&scenario));
            let report = run_experiment(&scenario, &grid, &opts)?;
            for cell in &report.cells {
                match (&cell.summary, &cell.error) {
                    (Some(s), _) => println!(
                        "gain={} control={} mean_total_queue={:.2} delay_s={}",
                        s.gain,
                        s.control,
                        s.mean_total_queue,
                        s.mean_delay_s
                            .map(|d| format!("{d:.2}"))
                            .unwrap_or_else(|| "n/a".into())
                    ),
                    (None, Some(e)) => {
                        println!("gain={} control={} FAILED: {e}", cell.gain, cell.control)
                    }
                    (None, None) => unreachable!("cell without summary or error"),
                }
            }
            if let Some(ratios) = &report.ratios {
                for (g, r) in &ratios.mp4_over_mp6 {
                    println!("gain={g} mp4_over_mp6={r:.3}");
                }
            }
            println!("wrote results to {}", args.out.display());
        }
        ExperimentCmd::Report(args) => {
            if args.format != "csv" {
                bail!("only --format csv is supported");
            }
            report_from_dir(&args.in_dir)?;
            for table in &args.tables {
                let file = match table.as_str() {
                    "queues" => "queues.csv",
                    "ratios" => "ratios.csv",
                    "delays" => "delays.csv",
                    other => bail!("unknown table '{other}' (use queues, ratios, delays)"),
                };
                let path = args.in_dir.join(file);
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                println!("# {file}");
                print!("{text}");
                println!();
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Analytic(args) => cmd_analytic(args),
        Command::Fluid(cmd) => cmd_fluid(cmd),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Capacity(cmd) => cmd_capacity(cmd),
        Command::Experiment(cmd) => cmd_experiment(cmd),
    }
}
