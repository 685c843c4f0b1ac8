//! `fv`: command-line front end for the particle-system library.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fv_core::field::CoefficientField;
use fv_core::genealogy;
use fv_core::harness::{self, ExperimentConfig, ExperimentKind};
use fv_core::limits;
use fv_core::measures::DiscreteMeasure;
use fv_core::particles::{
    init_system, run_field, EventLog, EventRecord, InitColours, InitPositions, PathStore,
};
use fv_core::spectral::{derived_scalars, principal_eigentriple};

#[derive(Parser)]
#[command(name = "fv", version, about = "Fleming-Viot particle system toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the principal eigenproblem of a coefficient field.
    Eigen {
        /// Coefficient field JSON; defaults to the built-in cosine toy field.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid size.
        #[arg(long, default_value_t = 1024)]
        n: usize,
        /// Output JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the N-particle system and dump events/snapshots/summary.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 5.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma-separated snapshot times.
        #[arg(long)]
        snapshots: Option<String>,
        /// Also dump the full path grid (needed by `fv spine`).
        #[arg(long)]
        store_paths: bool,
        /// Keep running past the horizon until one colour fixes.
        #[arg(long)]
        until_fixation: bool,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct the spine of a stored run.
    Spine {
        /// Directory produced by `fv run --store-paths`.
        #[arg(long)]
        run: PathBuf,
        /// Horizon up to which the spine is materialized.
        #[arg(long = "T")]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wright-Fisher fixation replicates.
    Wf {
        #[arg(long, default_value_t = 2)]
        n_types: usize,
        #[arg(long, default_value_t = 1.0)]
        theta: f64,
        /// Comma-separated initial frequencies (uniform when omitted).
        #[arg(long)]
        p0: Option<String>,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distance between two atomic measures stored as CSV.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// "w1" or "wa".
        #[arg(long, default_value = "w1")]
        metric: String,
    },
    /// Run a named end-to-end experiment.
    Experiment {
        /// One of: eigen-toy, right-efn, qsd, death-rate, theta-variance,
        /// fixation-law, spine-marginal, skeleton-rate, neff-compare,
        /// metrics-selftest.
        #[arg(long)]
        name: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Worker cap from FV_THREADS (replicate farms are serial below the cap).
fn thread_cap() -> Result<usize> {
    match std::env::var("FV_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => {
            let n: usize = v
                .parse()
                .with_context(|| format!("FV_THREADS = {v:?} is not a number"))?;
            if n == 0 {
                bail!("FV_THREADS must be at least 1");
            }
            Ok(n)
        }
    }
}

fn load_field(config: &Option<PathBuf>) -> Result<CoefficientField> {
    match config {
        None => Ok(CoefficientField::toy()),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(CoefficientField::from_json(&text)?)
        }
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {t:?}"))
        })
        .collect()
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_eigen(config: &Option<PathBuf>, n: usize, out: &Option<PathBuf>) -> Result<()> {
    let field = load_field(config)?;
    let triple = principal_eigentriple(&field, n)?;
    let derived = derived_scalars(&triple, &field);
    let doc = serde_json::json!({
        "grid": triple.grid,
        "pi_weights": triple.pi_weights,
        "lambda": triple.lambda,
        "phi_values": triple.phi_values,
        "theta": derived.theta,
        "n_eff_ratio": derived.n_eff_ratio,
    });
    write_or_print(out, &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config: &Option<PathBuf>,
    n: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
    snapshots: &Option<String>,
    store_paths: bool,
    until_fixation: bool,
    out: &Path,
) -> Result<()> {
    let field = load_field(config)?;
    let mut snap_times = match snapshots {
        Some(s) => parse_f64_list(s)?,
        None => Vec::new(),
    };
    snap_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fs::create_dir_all(out)?;
    let mut state = init_system(
        &field,
        n,
        &InitPositions::Uniform,
        InitColours::Labels,
        dt,
        seed,
    )?;
    let result = run_field(&mut state, &field, horizon, &snap_times, store_paths)?;
    let mut log = result.log;
    if until_fixation {
        while state.fixation.is_none() {
            let next = state.time + 25.0;
            if next > horizon + 1e6 {
                bail!("no fixation within {} time units past the horizon", 1e6);
            }
            log.append(run_field(&mut state, &field, next, &[], false)?.log);
        }
    }

    let mut events = String::from("time,victim,target\n");
    for e in &log.events {
        events.push_str(&format!("{},{},{}\n", e.time, e.victim, e.target));
    }
    fs::write(out.join("events.csv"), events)?;

    for (requested, snap) in snap_times.iter().zip(&result.snapshots) {
        let mut csv = String::from("index,");
        csv.push_str(
            &(0..field.dim)
                .map(|c| format!("x{c}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        csv.push_str(",colour\n");
        for i in 0..n {
            let coords = (0..field.dim)
                .map(|c| snap.positions[i * field.dim + c].to_string())
                .collect::<Vec<_>>()
                .join(",");
            csv.push_str(&format!("{i},{coords},{}\n", snap.colours[i]));
        }
        // name by the requested time; the capture sits on the nearest
        // grid point.
        fs::write(out.join(format!("snapshot_{requested}.csv")), csv)?;
    }

    if let Some(paths) = &result.paths {
        let meta = serde_json::json!({
            "t0": paths.t0, "dt": paths.dt, "n": paths.n, "dim": paths.dim,
        });
        fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        let mut csv = String::new();
        for step in 0..paths.n_steps() {
            let row: Vec<String> = paths
                .flat_row(step)
                .iter()
                .map(|v| v.to_string())
                .collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        fs::write(out.join("paths.csv"), csv)?;
    }

    let summary = serde_json::json!({
        "n": n,
        "seed": seed,
        "horizon": horizon,
        "j": log.jump_statistic(horizon),
        "fixation_time": state.fixation.map(|(t, _)| t),
        "fixed_colour": state.fixation.map(|(_, c)| c),
    });
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn load_run(dir: &Path) -> Result<(EventLog, Arc<PathStore>)> {
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("meta.json")).with_context(|| {
            format!(
                "reading {}/meta.json (was the run stored with --store-paths?)",
                dir.display()
            )
        })?)?;
    let n = meta["n"].as_u64().context("meta.json: n")? as usize;
    let dim = meta["dim"].as_u64().context("meta.json: dim")? as usize;
    let t0 = meta["t0"].as_f64().context("meta.json: t0")?;
    let dt = meta["dt"].as_f64().context("meta.json: dt")?;
    let mut data = Vec::new();
    for line in fs::read_to_string(dir.join("paths.csv"))?.lines() {
        data.extend(parse_f64_list(line)?);
    }
    let paths = PathStore::from_flat(t0, dt, n, dim, data)?;
    let mut events = Vec::new();
    for (k, line) in fs::read_to_string(dir.join("events.csv"))?.lines().enumerate() {
        if k == 0 {
            continue; // header
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            bail!("events.csv line {}: expected time,victim,target", k + 1);
        }
        events.push(EventRecord {
            time: cols[0].parse()?,
            victim: cols[1].parse()?,
            target: cols[2].parse()?,
        });
    }
    Ok((EventLog { events, n }, Arc::new(paths)))
}

fn cmd_spine(run: &Path, t: f64, out: &Path) -> Result<()> {
    let (log, paths) = load_run(run)?;
    let sp = genealogy::spine(&log, &paths, t)?;
    let mut csv = String::from("time,slot,");
    csv.push_str(
        &(0..sp.dim)
            .map(|c| format!("x{c}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    csv.push('\n');
    for k in 0..sp.n_points() {
        let coords = sp
            .point(k)
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        csv.push_str(&format!("{},{},{coords}\n", sp.time(k), sp.slots[k]));
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, csv)?;
    Ok(())
}

fn cmd_wf(
    n_types: usize,
    theta: f64,
    p0: &Option<String>,
    dt: f64,
    replicates: usize,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    let p0 = match p0 {
        Some(s) => parse_f64_list(s)?,
        None => vec![1.0 / n_types as f64; n_types],
    };
    if p0.len() != n_types {
        bail!("--p0 lists {} frequencies for {n_types} types", p0.len());
    }
    let runs = limits::wf_fixation_study(&p0, theta, dt, replicates, seed)?;
    let mut csv = String::from("replicate,tau,fixed_index\n");
    for (r, (tau, idx)) in runs.iter().enumerate() {
        csv.push_str(&format!("{r},{tau},{idx}\n"));
    }
    write_or_print(out, &csv)
}

fn load_measure(path: &Path) -> Result<DiscreteMeasure<Vec<f64>>> {
    let mut atoms = Vec::new();
    for line in fs::read_to_string(path)?.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        // tolerate a header row of column names.
        if line.split(',').next().unwrap().parse::<f64>().is_err() {
            continue;
        }
        let mut vals = parse_f64_list(line)?;
        let mass = vals.pop().context("need point columns plus a mass column")?;
        atoms.push((vals, mass));
    }
    Ok(DiscreteMeasure::new(atoms)?)
}

fn cmd_metrics(a: &Path, b: &Path, metric: &str) -> Result<()> {
    let mu = load_measure(a)?;
    let nu = load_measure(b)?;
    let value = match metric {
        "w1" => mu.wasserstein1(&nu)?,
        "wa" => mu.weak_atomic(&nu)?,
        other => bail!("unknown metric {other:?} (use w1 or wa)"),
    };
    println!("{value}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_experiment(
    name: &str,
    config: &Option<PathBuf>,
    n: Option<usize>,
    replicates: Option<usize>,
    horizon: Option<f64>,
    dt: Option<f64>,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    let kind = ExperimentKind::parse(name)?;
    let mut cfg = ExperimentConfig::defaults(kind);
    cfg.field = match config {
        Some(_) => Some(load_field(config)?),
        None => None,
    };
    if let Some(n) = n {
        cfg.n = n;
    }
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if let Some(h) = horizon {
        cfg.horizon = h;
    }
    if let Some(dt) = dt {
        cfg.dt = dt;
    }
    cfg.seed = seed;
    cfg.out = out.clone();
    let report = harness::run_experiment(&cfg)?;
    for s in &report.stats {
        println!(
            "{}: observed={} oracle={} tolerance={} {}",
            s.name,
            s.observed,
            s.oracle,
            s.tolerance,
            if s.pass { "PASS" } else { "FAIL" }
        );
    }
    let failing: Vec<&str> = report
        .stats
        .iter()
        .filter(|s| !s.pass)
        .map(|s| s.name.as_str())
        .collect();
    if !failing.is_empty() {
        bail!("tolerance failure: {}", failing.join(", "));
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let _workers = thread_cap()?;
    match &cli.cmd {
        Cmd::Eigen { config, n, out } => cmd_eigen(config, *n, out),
        Cmd::Run {
            config,
            n,
            horizon,
            dt,
            seed,
            snapshots,
            store_paths,
            until_fixation,
            out,
        } => cmd_run(
            config,
            *n,
            *horizon,
            *dt,
            *seed,
            snapshots,
            *store_paths,
            *until_fixation,
            out,
        ),
        Cmd::Spine { run, t, out } => cmd_spine(run, *t, out),
        Cmd::Wf {
            n_types,
            theta,
            p0,
            dt,
            replicates,
            seed,
            out,
        } => cmd_wf(*n_types, *theta, p0, *dt, *replicates, *seed, out),
        Cmd::Metrics { a, b, metric } => cmd_metrics(a, b, metric),
        Cmd::Experiment {
            name,
            config,
            n,
            replicates,
            horizon,
            dt,
            seed,
            out,
        } => cmd_experiment(name, config, *n, *replicates, *horizon, *dt, *seed, out),
    }
}
