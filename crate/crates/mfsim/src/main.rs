//! CLI entry point. Every subcommand validates its full parameter set
//! before touching the filesystem, writes plain CSV plus a run manifest,
//! and is byte-deterministic for a fixed config and seed.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mfsim::config::RawConfig;
use mfsim::experiments::run_experiment;
use mfsim::report::{persist_report, write_csv, write_manifest, RunManifest, Table};
use serde::Serialize;
use std::fs;
use std::path::PathBuf;

use meanfield::droplet::simulate_droplet;
use meanfield::dual::{duality_check, simulate_collision_free_dual, simulate_dual, DualInit};
use meanfield::forward::{simulate_forward, RecordSchedule};
use meanfield::malthus::malthus_summary;
use meanfield::model::{AtomicMeasure, ModelParams, SeedSpec};
use meanfield::mv::{entrance_law_construct, mv_ensemble_simulate, uu_integrate, UUState};

#[derive(Parser)]
#[command(
    name = "mfsim",
    version,
    about = "Simulators and experiments for a two-type mean-field site system",
    after_help = "Replica fan-out honors RAYON_NUM_THREADS; output is identical at any thread count."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Site-dynamics rates. All four are always required; there are no
/// built-in parameter defaults anywhere in this binary.
#[derive(Args, Serialize)]
struct RateArgs {
    /// Exchange rate with the empirical mean
    #[arg(long)]
    c: f64,
    /// Selection rate
    #[arg(long)]
    s: f64,
    /// Resampling-noise rate
    #[arg(long)]
    d: f64,
    /// Total mutation input (per-site rate is m/N)
    #[arg(long)]
    m: f64,
}

impl RateArgs {
    fn params(&self, n_sites: usize) -> Result<ModelParams> {
        ModelParams::new(self.c, self.s, self.d, self.m, n_sites).context("invalid rates")
    }
}

#[derive(Args, Serialize)]
struct ForwardArgs {
    #[command(flatten)]
    rates: RateArgs,
    /// Number of sites
    #[arg(long)]
    n: usize,
    #[arg(long)]
    t_end: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    record_every: f64,
    /// Also write per-site snapshots at record times
    #[arg(long)]
    snapshots: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DualArgs {
    #[command(flatten)]
    rates: RateArgs,
    /// Number of sites (ignored under --collision-free geography)
    #[arg(long)]
    n: usize,
    /// Initially occupied sites
    #[arg(long)]
    sites: usize,
    /// Particles per initially occupied site
    #[arg(long)]
    particles_per_site: u64,
    #[arg(long)]
    t_end: f64,
    #[arg(long, default_value_t = 0.25)]
    record_every: f64,
    /// Unbounded geography: every migrant founds a fresh site
    #[arg(long)]
    collision_free: bool,
    /// Record age/size tables at every record time
    #[arg(long)]
    age_size: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DualityArgs {
    #[command(flatten)]
    rates: RateArgs,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    sites: usize,
    #[arg(long)]
    particles_per_site: u64,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional output directory for the check table
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct MalthusArgs {
    /// Exchange rate with the empirical mean
    #[arg(long)]
    c: f64,
    /// Selection rate
    #[arg(long)]
    s: f64,
    /// Resampling-noise rate
    #[arg(long)]
    d: f64,
    /// Site-size truncation of the solver
    #[arg(long, default_value_t = 192)]
    j_max: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Args, Serialize)]
struct MvArgs {
    #[command(flatten)]
    rates: RateArgs,
    /// Ensemble size of the self-consistent system
    #[arg(long)]
    ensemble: usize,
    /// Common initial value of every member
    #[arg(long)]
    theta0: f64,
    #[arg(long)]
    t_end: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EntranceArgs {
    #[command(flatten)]
    rates: RateArgs,
    #[arg(long)]
    ensemble: usize,
    #[arg(long)]
    dt: f64,
    /// Comma-separated crossing levels in (0,1)
    #[arg(long)]
    levels: String,
    #[arg(long)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct UuArgs {
    /// Exchange rate with the empirical mean
    #[arg(long)]
    c: f64,
    /// Selection rate
    #[arg(long)]
    s: f64,
    /// Resampling-noise rate
    #[arg(long)]
    d: f64,
    /// Initial mean-mass value u(0)
    #[arg(long)]
    u0: f64,
    #[arg(long, default_value_t = 256)]
    j_max: usize,
    #[arg(long)]
    t_end: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DropletArgs {
    #[command(flatten)]
    rates: RateArgs,
    #[arg(long, visible_alias = "T")]
    t_end: f64,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    record_every: f64,
    /// Comma-separated times at which to dump atom snapshots
    #[arg(long)]
    snap_at: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ExperimentArgs {
    /// One of: emergence, fixation, dual-profile, growth
    name: String,
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Forward site-system trajectory
    SimulateForward(ForwardArgs),
    /// Coalescing-branching dual trajectory
    SimulateDual(DualArgs),
    /// Two-sided Monte Carlo check of the duality identity
    DualityCheck(DualityArgs),
    /// Growth constant and stable size distribution of the dual
    Malthus(MalthusArgs),
    /// Self-consistent ensemble of the limiting single-site dynamics
    MvEnsemble(MvArgs),
    /// Level-crossing curves of the limiting mean, recentred per level
    EntranceLaw(EntranceArgs),
    /// Deterministic mean/size-distribution flow
    UuIntegrate(UuArgs),
    /// Sparse-mass droplet process
    Droplet(DropletArgs),
    /// Config-driven experiment; writes tables and a findings report
    Experiment(ExperimentArgs),
}

fn parse_level_list(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for piece in text.split(',') {
        let v: f64 = piece
            .trim()
            .parse()
            .with_context(|| format!("bad list entry {piece:?}"))?;
        out.push(v);
    }
    if out.is_empty() {
        bail!("empty list");
    }
    Ok(out)
}

fn cmd_simulate_forward(args: &ForwardArgs) -> Result<()> {
    let params = args.rates.params(args.n)?;
    let record = RecordSchedule::new(args.record_every, args.snapshots)?;
    let seed = SeedSpec::new(args.seed, 0, "cli/forward");
    let traj = simulate_forward(&params, args.t_end, args.dt, &seed, &record)?;

    fs::create_dir_all(&args.out)?;
    let mut table = Table::new("trajectory", &["t", "mean_mass", "total_mass"]);
    for ((t, mean), total) in traj.times.iter().zip(&traj.mean_mass).zip(&traj.total_mass) {
        table.push(vec![*t, *mean, *total]);
    }
    write_csv(&args.out.join("trajectory.csv"), &table.header, &table.rows)?;
    if let Some(snaps) = &traj.snapshots {
        let mut sites = Table::new("snapshots", &["t", "site", "x2"]);
        for config in snaps {
            for (i, &x) in config.x2.iter().enumerate() {
                sites.push(vec![config.time, i as f64, x]);
            }
        }
        write_csv(&args.out.join("snapshots.csv"), &sites.header, &sites.rows)?;
    }
    write_manifest(&args.out, &RunManifest::new("simulate-forward", args, args.seed)?)?;
    println!(
        "simulate-forward: {} record points, final mean mass {}",
        traj.times.len(),
        traj.mean_mass.last().unwrap()
    );
    Ok(())
}

fn cmd_simulate_dual(args: &DualArgs) -> Result<()> {
    let params = args.rates.params(args.n)?;
    let init = DualInit::new(args.particles_per_site, args.sites)?;
    let seed = SeedSpec::new(args.seed, 0, "cli/dual");
    let (traj, _) = if args.collision_free {
        simulate_collision_free_dual(&init, &params, args.t_end, args.record_every, args.age_size, &seed)?
    } else {
        simulate_dual(&init, &params, args.t_end, args.record_every, args.age_size, &seed)?
    };

    fs::create_dir_all(&args.out)?;
    let mut counts = Table::new(
        "counts",
        &["t", "particles", "occupied_sites", "occupation_integral"],
    );
    for i in 0..traj.times.len() {
        counts.push(vec![
            traj.times[i],
            traj.pi[i] as f64,
            traj.k[i] as f64,
            traj.occupation_integral[i],
        ]);
    }
    write_csv(&args.out.join("counts.csv"), &counts.header, &counts.rows)?;
    if let Some(records) = &traj.age_size {
        let mut freq = Table::new("age_size", &["t", "size", "frequency"]);
        for rec in records {
            for (j, &p) in rec.size_freq.iter().enumerate() {
                if p > 0.0 {
                    freq.push(vec![rec.time, (j + 1) as f64, p]);
                }
            }
        }
        write_csv(&args.out.join("age_size.csv"), &freq.header, &freq.rows)?;
    }
    write_manifest(&args.out, &RunManifest::new("simulate-dual", args, args.seed)?)?;
    println!(
        "simulate-dual: final particles {}, occupied sites {}",
        traj.pi.last().unwrap(),
        traj.k.last().unwrap()
    );
    Ok(())
}

fn cmd_duality_check(args: &DualityArgs) -> Result<()> {
    let params = args.rates.params(args.n)?;
    let init = DualInit::new(args.particles_per_site, args.sites)?;
    let seed = SeedSpec::new(args.seed, 0, "cli/duality");
    let check = duality_check(&params, &init, args.t, args.dt, args.reps, &seed)?;
    let z = (check.lhs - check.rhs).abs() / check.combined_se;
    println!(
        "duality-check: forward {} (se {}) dual {} (se {}) | z = {}",
        check.lhs, check.lhs_se, check.rhs, check.rhs_se, z
    );
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let mut table = Table::new(
            "duality",
            &["forward", "forward_se", "dual", "dual_se", "combined_se", "z"],
        );
        table.push(vec![
            check.lhs,
            check.lhs_se,
            check.rhs,
            check.rhs_se,
            check.combined_se,
            z,
        ]);
        write_csv(&out.join("duality.csv"), &table.header, &table.rows)?;
        write_manifest(out, &RunManifest::new("duality-check", args, args.seed)?)?;
    }
    Ok(())
}

fn cmd_malthus(args: &MalthusArgs) -> Result<()> {
    // The mutation rate plays no role in the dual growth problem, so it is
    // not a parameter here.
    let params = ModelParams::new(args.c, args.s, args.d, 0.0, 1).context("invalid rates")?;
    let summary = malthus_summary(&params, args.j_max, args.tol)?;
    println!("alpha = {}", summary.alpha);
    println!("alpha_renewal = {}", summary.alpha_renewal);
    println!("cross_method_gap = {}", summary.cross_method_gap);
    println!("gamma = {}", summary.gamma);
    println!("B = {}", summary.big_b);
    println!("b = {}", summary.b());
    println!("mean_stable_size = {}", summary.u_infty.mean_size());
    Ok(())
}

fn cmd_mv_ensemble(args: &MvArgs) -> Result<()> {
    let params = args.rates.params(1)?;
    let seed = SeedSpec::new(args.seed, 0, "cli/mv-ensemble");
    let (curve, state) =
        mv_ensemble_simulate(&params, args.ensemble, args.theta0, args.t_end, args.dt, &seed)?;

    fs::create_dir_all(&args.out)?;
    let mut mean = Table::new("mean_curve", &["t", "mean"]);
    for (t, v) in curve.times.iter().zip(&curve.values) {
        mean.push(vec![*t, *v]);
    }
    write_csv(&args.out.join("mean_curve.csv"), &mean.header, &mean.rows)?;
    let mut members = Table::new("members", &["member", "value"]);
    for (i, &v) in state.members.iter().enumerate() {
        members.push(vec![i as f64, v]);
    }
    write_csv(&args.out.join("members.csv"), &members.header, &members.rows)?;
    write_manifest(&args.out, &RunManifest::new("mv-ensemble", args, args.seed)?)?;
    println!(
        "mv-ensemble: final mean {} over {} members",
        state.mean, args.ensemble
    );
    Ok(())
}

fn cmd_entrance_law(args: &EntranceArgs) -> Result<()> {
    let params = args.rates.params(1)?;
    let levels = parse_level_list(&args.levels).context("--levels")?;
    let summary = malthus_summary(&params, 192, 1e-8)?;
    let seed = SeedSpec::new(args.seed, 0, "cli/entrance");
    let curves = entrance_law_construct(
        &params,
        summary.alpha,
        args.ensemble,
        args.dt,
        &levels,
        args.horizon,
        &seed,
    )?;

    fs::create_dir_all(&args.out)?;
    let mut crossings = Table::new("crossings", &["level", "crossing_time"]);
    let mut recentred = Table::new("curves", &["level", "t_rel", "mean"]);
    let mut scaled = Table::new("scaled_negative", &["level", "t_rel", "scaled_mean"]);
    for c in &curves {
        crossings.push(vec![c.level, c.crossing_time]);
        for (t, v) in c.curve.times.iter().zip(&c.curve.values) {
            recentred.push(vec![c.level, *t, *v]);
        }
        for &(t, v) in &c.scaled_negative {
            scaled.push(vec![c.level, t, v]);
        }
    }
    for t in [&crossings, &recentred, &scaled] {
        write_csv(&args.out.join(format!("{}.csv", t.name)), &t.header, &t.rows)?;
    }
    write_manifest(&args.out, &RunManifest::new("entrance-law", args, args.seed)?)?;
    println!(
        "entrance-law: alpha = {}, {} levels",
        summary.alpha,
        curves.len()
    );
    Ok(())
}

fn cmd_uu_integrate(args: &UuArgs) -> Result<()> {
    let params = ModelParams::new(args.c, args.s, args.d, 0.0, 1).context("invalid rates")?;
    let mut big_u = vec![0.0; args.j_max];
    big_u[0] = 1.0;
    let init = UUState::new(args.u0, big_u)?;
    let traj = uu_integrate(&init, &params, args.j_max, args.t_end, args.tol)?;

    fs::create_dir_all(&args.out)?;
    let mut table = Table::new("flow", &["t", "u", "alpha_t", "gamma_t", "size_mass"]);
    for (t, state) in traj.times.iter().zip(&traj.states) {
        table.push(vec![
            *t,
            state.u,
            state.alpha(params.c),
            state.gamma(params.c),
            state.total(),
        ]);
    }
    write_csv(&args.out.join("flow.csv"), &table.header, &table.rows)?;
    write_manifest(&args.out, &RunManifest::new("uu-integrate", args, 0)?)?;
    println!(
        "uu-integrate: u({}) = {}",
        args.t_end,
        traj.terminal().u
    );
    Ok(())
}

fn cmd_droplet(args: &DropletArgs) -> Result<()> {
    let params = args.rates.params(1)?;
    let snap_times = match &args.snap_at {
        Some(text) => parse_level_list(text).context("--snap-at")?,
        None => Vec::new(),
    };
    let record = meanfield::forward::RecordSchedule::new(args.record_every, !snap_times.is_empty())?;
    if args.reps == 0 {
        bail!("--reps must be positive");
    }

    use rayon::prelude::*;
    let trajs: Vec<_> = (0..args.reps)
        .into_par_iter()
        .map(|i| {
            let seed = SeedSpec::new(args.seed, i as u64, "cli/droplet");
            simulate_droplet(
                &params,
                args.t_end,
                args.eps,
                args.dt,
                &seed,
                &AtomicMeasure::empty(),
                &record,
            )
        })
        .collect::<Result<_, _>>()?;

    fs::create_dir_all(&args.out)?;
    let mut mass = Table::new("total_mass", &["replica", "t", "mass"]);
    for (r, traj) in trajs.iter().enumerate() {
        for (t, v) in traj.times.iter().zip(&traj.total_mass) {
            mass.push(vec![r as f64, *t, *v]);
        }
    }
    write_csv(&args.out.join("total_mass.csv"), &mass.header, &mass.rows)?;
    if !snap_times.is_empty() {
        let mut snap = Table::new("snapshots", &["replica", "t", "location", "mass"]);
        for (r, traj) in trajs.iter().enumerate() {
            let snaps = traj.snapshots.as_ref().expect("snapshots were recorded");
            for &want in &snap_times {
                // Nearest recorded time; recording grid is the resolution.
                let mut best = 0;
                let mut gap = f64::INFINITY;
                for (idx, &t) in traj.times.iter().enumerate() {
                    if (t - want).abs() < gap {
                        gap = (t - want).abs();
                        best = idx;
                    }
                }
                for &(loc, x) in snaps[best].atoms() {
                    snap.push(vec![r as f64, traj.times[best], loc, x]);
                }
            }
        }
        write_csv(&args.out.join("snapshots.csv"), &snap.header, &snap.rows)?;
    }
    write_manifest(&args.out, &RunManifest::new("droplet", args, args.seed)?)?;
    let final_mean: f64 =
        trajs.iter().map(|t| t.total_mass.last().unwrap()).sum::<f64>() / args.reps as f64;
    println!(
        "droplet: {} replicas, mean final mass {}",
        args.reps, final_mean
    );
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let cfg = RawConfig::from_path(&args.config)?;
    let report = run_experiment(&args.name, &cfg)?;
    let dir = PathBuf::from(&cfg.output.dir).join(&args.name);
    let manifest = RunManifest::new(&format!("experiment {}", args.name), &cfg, cfg.seeds.master)?;
    let written = persist_report(&dir, &manifest, &report)?;
    for f in &report.findings {
        println!("[{}] {}", report.name, f.line());
    }
    for note in &report.notes {
        println!("[{}] note: {note}", report.name);
    }
    println!(
        "[{}] {} files under {}",
        report.name,
        written.len(),
        dir.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::SimulateForward(a) => cmd_simulate_forward(a),
        Cmd::SimulateDual(a) => cmd_simulate_dual(a),
        Cmd::DualityCheck(a) => cmd_duality_check(a),
        Cmd::Malthus(a) => cmd_malthus(a),
        Cmd::MvEnsemble(a) => cmd_mv_ensemble(a),
        Cmd::EntranceLaw(a) => cmd_entrance_law(a),
        Cmd::UuIntegrate(a) => cmd_uu_integrate(a),
        Cmd::Droplet(a) => cmd_droplet(a),
        Cmd::Experiment(a) => cmd_experiment(a),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
