//! `abp`: command-line frontend for the attractive-particle large-deviation
//! toolkit.
//!
//! Subcommands cover the full pipeline: `optimal` builds the sticky-cluster
//! optimal deviation, `rate`/`mom`/`lyapunov` evaluate the functionals,
//! `shape` builds and evolves terminal shapes with their shocks, `duality`
//! cross-checks the Legendre pair, `simulate` runs the seeded Monte Carlo
//! harness, and `replay` re-executes a recorded manifest and verifies that
//! every output digest matches.
//!
//! Exit codes: 0 ok, 2 validation failure, 3 tolerance breach, 4 internal.

mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use abp_core::cluster::{optimal_deviation, ClusteringDeviation};
use abp_core::rate::{lyapunov_exponent, mom_breakdown, rateq_clustering, rateq_optimal};
use abp_core::sde::{mc_clustering_experiment, simulate, ParticleState, SimConfig};
use abp_core::shape::{duality_check, invert_gradient, shock_fan, ShapeFunction};

use io::{inject_config, sha256_hex, Manifest, OutputSink};

const SUBCOMMANDS: &[&str] = &[
    "optimal", "shape", "duality", "simulate", "rate", "mom", "lyapunov", "replay",
];

#[derive(Parser, Debug)]
#[command(
    name = "abp",
    version,
    about = "Sticky-cluster large deviations toolkit"
)]
struct Cli {
    /// Directory for all output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the optimal deviation for the 1-to-n endpoint condition.
    Optimal(OptimalArgs),
    /// Build a terminal shape, evolve it backward, and track its shocks.
    Shape(ShapeArgs),
    /// Cross-check the Legendre duality between the two rate functions.
    Duality(DualityArgs),
    /// Run the seeded Monte Carlo particle simulation.
    Simulate(SimulateArgs),
    /// Evaluate the rate functional of a deviation JSON file.
    Rate(FunctionalArgs),
    /// Evaluate the moment functional of a deviation JSON file.
    Mom(FunctionalArgs),
    /// Evaluate the moment Lyapunov exponent for an endpoint problem.
    Lyapunov(EndpointArgs),
    /// Re-run a recorded manifest and verify the output digests.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct EndpointArgs {
    /// Cluster start positions, comma separated, strictly increasing.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    x: Vec<f64>,
    /// Cluster masses, comma separated, positive.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    m: Vec<f64>,
    /// Common terminal point.
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    xi: f64,
    /// Time horizon.
    #[arg(long, required = true)]
    t: f64,
}

#[derive(Args, Debug)]
struct OptimalArgs {
    #[command(flatten)]
    endpoint: EndpointArgs,
    /// Rows in the trajectory CSV.
    #[arg(long, default_value_t = 201)]
    samples: usize,
}

#[derive(Args, Debug)]
struct ShapeArgs {
    /// Terminal time of the shape.
    #[arg(long, required = true)]
    t: f64,
    /// Node positions, comma separated, strictly increasing.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    x: Vec<f64>,
    /// Node values (above the parabola). Exactly one of --h / --m.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        conflicts_with = "m"
    )]
    h: Option<Vec<f64>>,
    /// Gradient components; node values are recovered by inversion.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    m: Option<Vec<f64>>,
    /// Rows in the sampled shape CSV.
    #[arg(long, default_value_t = 201, alias = "sample")]
    samples: usize,
    /// Intermediate times to evolve the shape to (backward Hopf-Lax).
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct DualityArgs {
    #[arg(long, required = true)]
    t: f64,
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    x: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    m: Vec<f64>,
    /// Maximum tolerated |L_clusters - L_legendre|.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scale parameter N (particle count at unit mass).
    #[arg(long, required = true)]
    n: usize,
    /// Scale parameter T.
    #[arg(long = "t-scale", required = true)]
    t_scale: f64,
    /// Micro time step; defaults to 1e-3/N.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    /// 1 = standard noise, 0 = deterministic drift flow.
    #[arg(long = "noise-scale", default_value_t = 1.0)]
    noise_scale: f64,
    /// Reference cluster start positions.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "0"
    )]
    x: Vec<f64>,
    /// Reference cluster masses.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "1"
    )]
    m: Vec<f64>,
    /// Reference terminal point.
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    xi: f64,
    /// Macroscopic horizon.
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    /// Snapshot count for the trajectory CSV.
    #[arg(long, default_value_t = 33)]
    snapshots: usize,
}

#[derive(Args, Debug)]
struct FunctionalArgs {
    /// Path to a deviation JSON file.
    #[arg(long, required = true)]
    deviation: PathBuf,
    /// Time interval `a,b`; defaults to the full horizon.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    interval: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Path to a `<command>_manifest.json` written by a previous run.
    #[arg(long, required = true)]
    manifest: PathBuf,
}

enum CliError {
    Validation(String),
    Tolerance(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Tolerance(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Tolerance(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<abp_core::Error> for CliError {
    fn from(e: abp_core::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match inject_config(argv, SUBCOMMANDS) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let tail: Vec<String> = argv[1..].to_vec();
    match dispatch(cli, &tail) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

fn dispatch(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    match cli.command {
        Command::Optimal(args) => cmd_optimal(&cli.out_dir, args, argv),
        Command::Shape(args) => cmd_shape(&cli.out_dir, args, argv),
        Command::Duality(args) => cmd_duality(&cli.out_dir, args, argv),
        Command::Simulate(args) => cmd_simulate(&cli.out_dir, args, argv),
        Command::Rate(args) => cmd_functional(&cli.out_dir, args, argv, Functional::Rate),
        Command::Mom(args) => cmd_functional(&cli.out_dir, args, argv, Functional::Mom),
        Command::Lyapunov(args) => cmd_lyapunov(&cli.out_dir, args, argv),
        Command::Replay(args) => cmd_replay(&cli.out_dir, args),
    }
}

#[derive(Serialize)]
struct OptimalSummary {
    rateq: f64,
    l_she: f64,
    drifts: Vec<f64>,
    branch_velocities: Vec<f64>,
}

fn trajectory_header(n: usize) -> Vec<String> {
    let mut h = vec!["s".to_string()];
    h.extend((1..=n).map(|c| format!("x_{c}")));
    h
}

fn cmd_optimal(
    out_dir: &std::path::Path,
    args: OptimalArgs,
    argv: &[String],
) -> Result<(), CliError> {
    let e = &args.endpoint;
    let opt = optimal_deviation(&e.x, &e.m, e.xi, e.t)?;
    let rateq = rateq_optimal(&opt.tree, &e.m, e.t, &opt.drifts)?;
    let l_she = lyapunov_exponent(e.xi, e.t, &e.x, &e.m)?;
    let mut sink = OutputSink::new(out_dir)?;
    sink.write_json("deviation.json", &opt.deviation)?;
    sink.write_json("merge_tree.json", &opt.tree)?;
    sink.write_csv(
        "trajectories.csv",
        &trajectory_header(e.m.len()),
        &opt.deviation.sample_rows(args.samples),
    )?;
    sink.write_json(
        "optimal_summary.json",
        &OptimalSummary {
            rateq,
            l_she,
            drifts: opt.drifts.clone(),
            branch_velocities: opt.branch_velocities.clone(),
        },
    )?;
    sink.finish("optimal", argv, vec![])?;
    println!("rateq = {}", io::format_float(rateq));
    println!("l_she = {}", io::format_float(l_she));
    Ok(())
}

#[derive(Serialize)]
struct ShapeSummary {
    t: f64,
    h: Vec<f64>,
    i_kpz: f64,
    gradient: Vec<f64>,
    concave: bool,
}

fn cmd_shape(out_dir: &std::path::Path, args: ShapeArgs, argv: &[String]) -> Result<(), CliError> {
    let hs: Vec<f64> = match (&args.h, &args.m) {
        (Some(h), None) => h.clone(),
        (None, Some(m)) => invert_gradient(args.t, &args.x, m)?,
        _ => {
            return Err(CliError::Validation(
                "exactly one of --h or --m is required".to_string(),
            ))
        }
    };
    let shape = ShapeFunction::build(args.t, &args.x, &hs)?;
    let concave = shape.is_concave();
    let mut sink = OutputSink::new(out_dir)?;
    sink.write_json("shape.json", &shape)?;
    let (lo, hi) = shape.support_hint();
    let margin = 0.25 * (hi - lo).abs().max(1.0);
    let rows: Vec<Vec<f64>> = shape
        .sample_rows(lo - margin, hi + margin, args.samples)
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    sink.write_csv(
        "shape.csv",
        &["x".to_string(), "h".to_string(), "u".to_string()],
        &rows,
    )?;
    if concave {
        let fan = shock_fan(args.t, &args.x, &hs)?;
        sink.write_csv(
            "shocks.csv",
            &{
                let mut h = vec!["s".to_string()];
                h.extend(fan.shocks.iter().map(|s| format!("shock_{}", s.node + 1)));
                h
            },
            &fan.sample_rows(args.samples),
        )?;
        for (k, &t_mid) in args.times.iter().flatten().enumerate() {
            if !t_mid.is_finite() || t_mid <= 0.0 || t_mid >= args.t {
                return Err(CliError::Validation(format!(
                    "intermediate time {t_mid} outside (0, {})",
                    args.t
                )));
            }
            let evolved = shape.hopf_lax_evolve(args.t - t_mid)?;
            sink.write_json(&format!("shape_at_{k}.json"), &evolved)?;
        }
    }
    let summary = ShapeSummary {
        t: args.t,
        h: hs.clone(),
        i_kpz: shape.i_kpz(),
        gradient: shape.gradient(),
        concave,
    };
    sink.write_json("shape_summary.json", &summary)?;
    sink.finish("shape", argv, vec![])?;
    println!("i_kpz = {}", io::format_float(summary.i_kpz));
    Ok(())
}

#[derive(Serialize)]
struct DualitySummary {
    l_from_clusters: f64,
    l_from_legendre: f64,
    residual: f64,
    tol: f64,
}

fn cmd_duality(
    out_dir: &std::path::Path,
    args: DualityArgs,
    argv: &[String],
) -> Result<(), CliError> {
    let report = duality_check(args.t, &args.x, &args.m)?;
    let summary = DualitySummary {
        l_from_clusters: report.l_from_clusters,
        l_from_legendre: report.l_from_legendre,
        residual: report.residual(),
        tol: args.tol,
    };
    let mut sink = OutputSink::new(out_dir)?;
    sink.write_json("duality.json", &summary)?;
    sink.finish("duality", argv, vec![])?;
    println!(
        "l_from_clusters = {}",
        io::format_float(summary.l_from_clusters)
    );
    println!(
        "l_from_legendre = {}",
        io::format_float(summary.l_from_legendre)
    );
    println!("residual = {}", io::format_float(summary.residual));
    if summary.residual > args.tol {
        return Err(CliError::Tolerance(format!(
            "duality residual {} exceeds tolerance {}",
            summary.residual, args.tol
        )));
    }
    Ok(())
}

enum Functional {
    Rate,
    Mom,
}

fn read_deviation(path: &std::path::Path) -> Result<ClusteringDeviation, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("invalid deviation JSON: {e}")))
}

fn parse_interval(
    dev: &ClusteringDeviation,
    interval: &Option<Vec<f64>>,
) -> Result<(f64, f64), CliError> {
    match interval {
        None => Ok((0.0, dev.horizon())),
        Some(v) if v.len() == 2 => Ok((v[0], v[1])),
        Some(_) => Err(CliError::Validation(
            "--interval expects exactly two values a,b".to_string(),
        )),
    }
}

/// Wire form `{total, breakdown}` of a functional evaluation.
#[derive(Serialize)]
struct FunctionalSummary<T: Serialize> {
    total: f64,
    breakdown: T,
}

fn cmd_functional(
    out_dir: &std::path::Path,
    args: FunctionalArgs,
    argv: &[String],
    which: Functional,
) -> Result<(), CliError> {
    let dev = read_deviation(&args.deviation)?;
    let interval = parse_interval(&dev, &args.interval)?;
    let mut sink = OutputSink::new(out_dir)?;
    let (name, total) = match which {
        Functional::Rate => {
            let breakdown = rateq_clustering(&dev, interval)?;
            let total = breakdown.total;
            sink.write_json("rate.json", &FunctionalSummary { total, breakdown })?;
            ("rate", total)
        }
        Functional::Mom => {
            let breakdown = mom_breakdown(&dev, interval)?;
            let total = breakdown.total;
            sink.write_json("mom.json", &FunctionalSummary { total, breakdown })?;
            ("mom", total)
        }
    };
    sink.finish(name, argv, vec![])?;
    println!("total = {}", io::format_float(total));
    Ok(())
}

fn cmd_lyapunov(
    out_dir: &std::path::Path,
    args: EndpointArgs,
    argv: &[String],
) -> Result<(), CliError> {
    let opt = optimal_deviation(&args.x, &args.m, args.xi, args.t)?;
    let breakdown = mom_breakdown(&opt.deviation, (0.0, args.t))?;
    let total = breakdown.total;
    let mut sink = OutputSink::new(out_dir)?;
    sink.write_json("lyapunov.json", &FunctionalSummary { total, breakdown })?;
    sink.finish("lyapunov", argv, vec![])?;
    println!("l_she = {}", io::format_float(total));
    Ok(())
}

fn cmd_simulate(
    out_dir: &std::path::Path,
    args: SimulateArgs,
    argv: &[String],
) -> Result<(), CliError> {
    let dt = args.dt.unwrap_or(1e-3 / args.n as f64);
    let config = SimConfig {
        dt,
        seed: args.seed,
        noise_scale: args.noise_scale,
    };
    let report = mc_clustering_experiment(
        args.replicas,
        args.n,
        args.t_scale,
        &args.x,
        &args.m,
        args.xi,
        args.t,
        &config,
    )?;
    // A reference trajectory with the base seed for plotting.
    let total: f64 = args.m.iter().sum();
    let unit: Vec<f64> = args.m.iter().map(|m| m / total).collect();
    let assignment = abp_core::sde::assign_clusters(args.n, &unit);
    let nt = args.n as f64 * args.t_scale;
    let initial = ParticleState::new(
        assignment.iter().map(|&c| args.x[c] * nt).collect(),
        args.n,
        args.t_scale,
    )?;
    let horizon_micro = args.t * args.t_scale;
    let times: Vec<f64> = (0..args.snapshots.max(2))
        .map(|k| horizon_micro * k as f64 / (args.snapshots.max(2) - 1) as f64)
        .collect();
    let snaps = simulate(&initial, &config, horizon_micro, &times)?;
    let rows: Vec<Vec<f64>> = snaps
        .iter()
        .map(|s| {
            let mut row = Vec::with_capacity(s.positions.len() + 1);
            row.push(s.micro_time);
            row.extend_from_slice(&s.positions);
            row
        })
        .collect();
    let mut header = vec!["t".to_string()];
    header.extend((1..=args.n).map(|i| format!("X_{i}")));
    let mut sink = OutputSink::new(out_dir)?;
    sink.write_csv("trajectory.csv", &header, &rows)?;
    sink.write_json("report.json", &report)?;
    let seeds: Vec<u64> = report.replicas.iter().map(|r| r.seed).collect();
    sink.finish("simulate", argv, seeds)?;
    println!(
        "replicas = {}, median scaled spread = {}",
        report.replicas.len(),
        io::format_float(report.spread_quantiles.median)
    );
    Ok(())
}

fn cmd_replay(out_dir: &std::path::Path, args: ReplayArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.manifest).map_err(|e| {
        CliError::Validation(format!("cannot read {}: {e}", args.manifest.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad manifest: {e}")))?;
    let mut argv: Vec<String> = vec!["abp".to_string()];
    argv.extend(manifest.argv.iter().cloned());
    let mut cli = Cli::try_parse_from(&argv)
        .map_err(|e| CliError::Validation(format!("manifest argv does not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Validation(
            "refusing to replay a replay manifest".to_string(),
        ));
    }
    cli.out_dir = out_dir.to_path_buf();
    dispatch(cli, &manifest.argv)?;
    let mut mismatches = Vec::new();
    for (name, digest) in &manifest.outputs {
        let bytes = std::fs::read(out_dir.join(name))?;
        let got = sha256_hex(&bytes);
        if got != *digest {
            mismatches.push(name.clone());
        }
    }
    if mismatches.is_empty() {
        println!(
            "replay verified: {} outputs identical",
            manifest.outputs.len()
        );
        Ok(())
    } else {
        Err(CliError::Tolerance(format!(
            "replay digests differ for: {}",
            mismatches.join(", ")
        )))
    }
}
