//! Experiment orchestration: named end-to-end studies with oracle values,
//! tolerances, JSON reports, CSV data, and deterministic SVG plots.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::genealogy;
use crate::limits;
use crate::measures::DiscreteMeasure;
use crate::particles::{
    self, init_system, run_field, ColourId, InitColours, InitPositions, SystemState,
};
use crate::rng::{substream, StreamKind};
use crate::spectral::{derived_scalars, principal_eigentriple, EigenTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    EigenToy,
    RightEfn,
    Qsd,
    DeathRate,
    ThetaVariance,
    FixationLaw,
    SpineMarginal,
    SkeletonRate,
    NeffCompare,
    MetricsSelftest,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        ExperimentKind::EigenToy,
        ExperimentKind::RightEfn,
        ExperimentKind::Qsd,
        ExperimentKind::DeathRate,
        ExperimentKind::ThetaVariance,
        ExperimentKind::FixationLaw,
        ExperimentKind::SpineMarginal,
        ExperimentKind::SkeletonRate,
        ExperimentKind::NeffCompare,
        ExperimentKind::MetricsSelftest,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidConfig(format!("unknown experiment {s:?}")))
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).unwrap();
        write!(f, "{}", v.as_str().unwrap())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Defaults to the cosine toy field when absent.
    #[serde(default)]
    pub field: Option<CoefficientField>,
    pub n: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub replicates: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults per experiment.
    pub fn defaults(kind: ExperimentKind) -> Self {
        use ExperimentKind::*;
        let (n, horizon, replicates) = match kind {
            EigenToy => (1024, 0.0, 1),
            RightEfn => (20_000, 5.0, 1),
            Qsd => (10_000, 10.0, 1),
            DeathRate => (10_000, 5.0, 1),
            ThetaVariance => (500, 0.02, 100),
            FixationLaw => (100, 0.0, 200),
            SpineMarginal => (300, 4.0, 20),
            SkeletonRate => (300, 4.0, 10),
            NeffCompare => (400, 0.05, 120),
            MetricsSelftest => (2, 0.0, 1),
        };
        ExperimentConfig {
            experiment: kind,
            field: None,
            n,
            horizon,
            dt: 1e-3,
            seed: 1,
            replicates,
            out: None,
        }
    }

    pub fn resolved_field(&self) -> CoefficientField {
        self.field.clone().unwrap_or_else(CoefficientField::toy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig("need N >= 2".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        self.resolved_field().validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    pub observed: f64,
    pub oracle: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Statistic {
    pub fn abs(name: &str, observed: f64, oracle: f64, tolerance: f64) -> Self {
        Statistic {
            name: name.to_string(),
            observed,
            oracle,
            tolerance,
            pass: (observed - oracle).abs() <= tolerance,
        }
    }

    pub fn rel(name: &str, observed: f64, oracle: f64, rel_tol: f64) -> Self {
        Statistic {
            name: name.to_string(),
            observed,
            oracle,
            tolerance: rel_tol * oracle.abs(),
            pass: (observed - oracle).abs() <= rel_tol * oracle.abs(),
        }
    }

    /// One-sided: observed must not exceed the bound.
    pub fn upper(name: &str, observed: f64, bound: f64) -> Self {
        Statistic {
            name: name.to_string(),
            observed,
            oracle: bound,
            tolerance: bound,
            pass: observed <= bound,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub stats: Vec<Statistic>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<Series>,
}

impl Report {
    fn new(config: &ExperimentConfig, stats: Vec<Statistic>, series: Vec<Series>) -> Report {
        Report {
            experiment: config.experiment.to_string(),
            version: format!("fv-core {}", env!("CARGO_PKG_VERSION")),
            config: config.clone(),
            pass: stats.iter().all(|s| s.pass),
            stats,
            series,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        let mut csv = String::from("name,observed,oracle,tolerance,pass\n");
        for s in &self.stats {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                s.name, s.observed, s.oracle, s.tolerance, s.pass
            ));
        }
        fs::write(dir.join("stats.csv"), csv)?;
        if !self.series.is_empty() {
            fs::write(dir.join("plot.svg"), emit_plot(&self.series, &self.experiment))?;
        }
        Ok(())
    }
}

/// Deterministic SVG: fixed viewport, axes, one polyline per series.
pub fn emit_plot(series: &[Series], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 48.0;
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().cloned()).collect();
    let (x0, x1, y0, y1) = if all.is_empty() {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        let xs: Vec<f64> = all.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = all.iter().map(|p| p.1).collect();
        let lo = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (x0, mut x1, y0, mut y1) = (lo(&xs), hi(&xs), lo(&ys), hi(&ys));
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y1 = y0 + 1.0;
        }
        (x0, x1, y0, y1)
    };
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.3}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        W / 2.0
    );
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{:.3}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M,
        H - M
    ));
    for (k, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.3},{:.3}", px(x), py(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            colours[k % colours.len()],
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"12\" fill=\"{}\">{}</text>\n",
            W - M - 120.0,
            M + 16.0 * (k as f64 + 1.0),
            colours[k % colours.len()],
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Draw from the discrete left-eigenmeasure, jittered inside the grid cell.
pub fn sample_from_pi<R: Rng>(triple: &EigenTriple, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let h = triple.h();
    let n = triple.grid.len();
    for (i, &w) in triple.pi_weights.iter().enumerate() {
        acc += w;
        if u <= acc || i == n - 1 {
            let half = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let lo = (triple.grid[i] - 0.5 * h * half).max(triple.grid[0]);
            let hi = (triple.grid[i] + 0.5 * h * half).min(triple.grid[n - 1]);
            return rng.gen_range(lo..hi);
        }
    }
    unreachable!()
}

/// Continue an existing run until colour fixation, in horizon chunks.
pub fn run_to_fixation(
    state: &mut SystemState,
    field: &CoefficientField,
    chunk: f64,
    t_max: f64,
) -> Result<(f64, ColourId)> {
    loop {
        if let Some(fixed) = state.fixation {
            return Ok(fixed);
        }
        if state.time >= t_max {
            return Err(Error::Unfixed { horizon: state.time });
        }
        run_field(state, field, (state.time + chunk).min(t_max), &[], false)?;
    }
}

// ---------------------------------------------------------------------------
// experiment kernels (also reused by the acceptance suite)
// ---------------------------------------------------------------------------

/// Spectral solve on the cosine toy field; returns the triple plus the
/// eigenvalue error against 2 and the shape error against 2 + cos(pi x).
pub fn eigen_toy(n: usize) -> Result<(EigenTriple, f64, f64)> {
    let field = CoefficientField::toy();
    let triple = principal_eigentriple(&field, n)?;
    let lambda_err = (triple.lambda - 2.0).abs();
    // compare shapes with matched normalization at the sup.
    let reference: Vec<f64> = triple
        .grid
        .iter()
        .map(|&x| 2.0 + (std::f64::consts::PI * x).cos())
        .collect();
    let scale = triple.phi_values[0] / reference[0];
    let sup_err = triple
        .phi_values
        .iter()
        .zip(&reference)
        .map(|(p, r)| (p - r * scale).abs())
        .fold(0.0, f64::max);
    Ok((triple, lambda_err, sup_err))
}

/// Colour-mass representation study: particles started on the 21-atom grid
/// with colour = position; after `horizon` the colour masses should align
/// with phi at the atoms, normalized to total mass one.
pub fn right_efn(
    n_particles: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    let field = CoefficientField::toy();
    let triple = principal_eigentriple(&field, 1024)?;
    let mut state = init_system(
        &field,
        n_particles,
        &InitPositions::GridAtoms(20),
        InitColours::Positions,
        dt,
        seed,
    )?;
    run_field(&mut state, &field, horizon, &[], false)?;
    let mut counts = vec![0usize; state.table.len()];
    for &c in &state.colours {
        counts[c as usize] += 1;
    }
    let atom_x = |id: usize| -> f64 {
        match state.table.payload(id as u32) {
            particles::ColourPayload::Point(p) => p[0],
            _ => unreachable!(),
        }
    };
    let phi_total: f64 = (0..state.table.len())
        .map(|id| triple.phi_at(atom_x(id)))
        .sum();
    let mut rows: Vec<(f64, f64, f64)> = (0..state.table.len())
        .map(|id| {
            let x = atom_x(id);
            (
                x,
                counts[id] as f64 / n_particles as f64,
                triple.phi_at(x) / phi_total,
            )
        })
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(rows)
}

/// L1 distance between the binned particle positions at `horizon` and the
/// spectral left eigenmeasure.
pub fn qsd_l1(
    field: &CoefficientField,
    triple: &EigenTriple,
    n_particles: usize,
    horizon: f64,
    dt: f64,
    bins: usize,
    seed: u64,
) -> Result<f64> {
    let mut state = init_system(
        field,
        n_particles,
        &InitPositions::Uniform,
        InitColours::Labels,
        dt,
        seed,
    )?;
    run_field(&mut state, field, horizon, &[], false)?;
    let lo = field.bounds.lo[0];
    let hi = field.bounds.hi[0];
    let mut hist = vec![0.0; bins];
    for i in 0..state.n {
        let x = state.position(i)[0];
        let b = (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        hist[b] += 1.0 / n_particles as f64;
    }
    let mut target = vec![0.0; bins];
    for (i, &w) in triple.pi_weights.iter().enumerate() {
        let b = (((triple.grid[i] - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        target[b] += w;
    }
    Ok(hist
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Jump statistic increment J_{t1} - J_{t0} of a single run.
pub fn death_rate(
    field: &CoefficientField,
    n_particles: usize,
    t0: f64,
    t1: f64,
    dt: f64,
    seed: u64,
) -> Result<f64> {
    let mut state = init_system(
        field,
        n_particles,
        &InitPositions::Uniform,
        InitColours::Labels,
        dt,
        seed,
    )?;
    let out = run_field(&mut state, field, t1, &[], false)?;
    Ok(out.log.jump_statistic(t1) - out.log.jump_statistic(t0))
}

/// Replicated variance of the tilted two-colour mass at the diffusive time
/// s (i.e. horizon s * N), against the Wright-Fisher moment prediction
/// with rate Theta.
pub fn theta_variance(
    field: &CoefficientField,
    triple: &EigenTriple,
    n_particles: usize,
    replicates: usize,
    s: f64,
    dt: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let horizon = s * n_particles as f64;
    let theta = derived_scalars(triple, field).theta;
    let set0: BTreeSet<ColourId> = [0u32].into();
    let mut sq_sum = 0.0;
    let mut het_sum = 0.0;
    for r in 0..replicates {
        let rep_seed = seed.wrapping_add(1 + r as u64);
        let mut init_rng = substream(rep_seed, StreamKind::Init, 7);
        let points: Vec<Vec<f64>> = (0..n_particles)
            .map(|_| vec![sample_from_pi(triple, &mut init_rng)])
            .collect();
        let mut state = init_system(
            field,
            n_particles,
            &InitPositions::Explicit(points),
            InitColours::Labels,
            dt,
            rep_seed,
        )?;
        // two colours by parity, splitting the tilted mass near one half.
        for i in 0..state.n {
            state.colours[i] = (i % 2) as u32;
        }
        state.fixation = None;
        let y0 = particles::y_statistic(&state, triple, &set0);
        run_field(&mut state, field, horizon, &[], false)?;
        let ys = particles::y_statistic(&state, triple, &set0);
        sq_sum += (ys - y0) * (ys - y0);
        het_sum += y0 * (1.0 - y0);
    }
    let observed = sq_sum / replicates as f64;
    let predicted = het_sum / replicates as f64 * (1.0 - (-theta * s).exp());
    Ok((observed, predicted))
}

/// Fixed-colour law study: four colour blocks with unequal tilted weights;
/// returns (total-variation distance, per-colour observed, per-colour
/// predicted).
#[allow(clippy::type_complexity)]
pub fn fixation_law(
    field: &CoefficientField,
    triple: &EigenTriple,
    n_particles: usize,
    replicates: usize,
    dt: f64,
    seed: u64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    // block fractions 0.1 / 0.2 / 0.3 / 0.4 of the population.
    let edges = [
        0,
        n_particles / 10,
        3 * n_particles / 10,
        6 * n_particles / 10,
        n_particles,
    ];
    let mut wins = vec![0usize; 4];
    let mut weight_sum = vec![0.0; 4];
    for r in 0..replicates {
        let rep_seed = seed.wrapping_add(100 + r as u64);
        let mut init_rng = substream(rep_seed, StreamKind::Init, 7);
        let points: Vec<Vec<f64>> = (0..n_particles)
            .map(|_| vec![sample_from_pi(triple, &mut init_rng)])
            .collect();
        let mut state = init_system(
            field,
            n_particles,
            &InitPositions::Explicit(points),
            InitColours::Labels,
            dt,
            rep_seed,
        )?;
        for c in 0..4 {
            for i in edges[c]..edges[c + 1] {
                state.colours[i] = c as u32;
            }
        }
        state.fixation = None;
        for c in 0..4u32 {
            weight_sum[c as usize] +=
                particles::y_statistic(&state, triple, &[c].into());
        }
        let (_, fixed) = run_to_fixation(&mut state, field, 25.0, 1e5)?;
        wins[fixed as usize] += 1;
    }
    let observed: Vec<f64> = wins.iter().map(|&w| w as f64 / replicates as f64).collect();
    let predicted: Vec<f64> = weight_sum
        .iter()
        .map(|&w| w / replicates as f64)
        .collect();
    let tv = 0.5
        * observed
            .iter()
            .zip(&predicted)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    Ok((tv, observed, predicted))
}

pub struct SpineStudy {
    /// L1 error of the pooled spine-position histogram against the
    /// phi^2-density.
    pub hist_l1: f64,
    /// branch events onto the spine per unit time in the window.
    pub branch_rate: f64,
    pub histogram: Vec<(f64, f64, f64)>,
}

/// Pooled spine study on the toy field: spine marginal over [t_lo, t_hi]
/// and the rate of branch events along the spine.
pub fn spine_study(
    field: &CoefficientField,
    triple: &EigenTriple,
    n_particles: usize,
    replicates: usize,
    t_lo: f64,
    t_hi: f64,
    bins: usize,
    dt: f64,
    seed: u64,
) -> Result<SpineStudy> {
    let lo = field.bounds.lo[0];
    let hi = field.bounds.hi[0];
    let mut hist = vec![0.0; bins];
    let mut samples = 0.0f64;
    let mut branches = 0usize;
    for r in 0..replicates {
        let rep_seed = seed.wrapping_add(1000 + r as u64);
        let mut state = init_system(
            field,
            n_particles,
            &InitPositions::Uniform,
            InitColours::Labels,
            dt,
            rep_seed,
        )?;
        // store paths only over the window of interest, then continue
        // without storage until the ancestries at t_hi coalesce.
        let out = run_field(&mut state, field, t_hi, &[], true)?;
        let mut log = out.log;
        let paths = std::sync::Arc::new(out.paths.unwrap());
        let t_cap = t_hi + 40.0 * n_particles as f64 / triple.lambda.max(0.1);
        while genealogy::fixation_scan(&log, t_hi).is_err() {
            if state.time >= t_cap {
                return Err(Error::Unfixed { horizon: state.time });
            }
            let next = state.time + 50.0;
            let more = run_field(&mut state, field, next, &[], false)?;
            log.append(more.log);
        }
        let sp = genealogy::spine(&log, &paths, t_hi)?;
        for k in 0..sp.n_points() {
            let t = sp.time(k);
            if t < t_lo || t > t_hi {
                continue;
            }
            let x = sp.point(k)[0];
            hist[(((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)] += 1.0;
            samples += 1.0;
        }
        // branch events: the spine lineage is the jump target.
        for e in &log.events {
            if e.time <= t_lo || e.time > t_hi {
                continue;
            }
            if e.target == sp.slot_at(e.time - 0.5 * sp.dt) {
                branches += 1;
            }
        }
    }
    // target density phi^2 / <phi^2 Leb> per bin (grid quadrature).
    let h = triple.h();
    let phi2: Vec<f64> = triple.phi_values.iter().map(|p| p * p).collect();
    let mut target = vec![0.0; bins];
    for (i, &p2) in phi2.iter().enumerate() {
        let w = if i == 0 || i == phi2.len() - 1 { 0.5 } else { 1.0 };
        let b = (((triple.grid[i] - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        target[b] += w * h * p2;
    }
    let total: f64 = target.iter().sum();
    let mut l1 = 0.0;
    let mut rows = Vec::with_capacity(bins);
    for b in 0..bins {
        let obs = hist[b] / samples.max(1.0);
        let pred = target[b] / total;
        l1 += (obs - pred).abs();
        rows.push((lo + (b as f64 + 0.5) / bins as f64 * (hi - lo), obs, pred));
    }
    Ok(SpineStudy {
        hist_l1: l1,
        branch_rate: branches as f64 / ((t_hi - t_lo) * replicates as f64),
        histogram: rows,
    })
}

/// Effective-population comparison: the variance-fitted rate of the
/// particle system against the spectral prediction, and the Moran model
/// against rate 2 lambda.
pub fn neff_compare(
    field: &CoefficientField,
    triple: &EigenTriple,
    n_particles: usize,
    replicates: usize,
    s: f64,
    dt: f64,
    seed: u64,
) -> Result<(f64, f64, f64, f64)> {
    let (obs, _) = theta_variance(field, triple, n_particles, replicates, s, dt, seed)?;
    // invert the moment curve var = het0 (1 - e^{-theta s}) at het0 = 1/4.
    let theta_hat = -(1.0 - obs / 0.25).ln() / s;
    let ratio_obs = triple.lambda / theta_hat;
    let ratio_pred = derived_scalars(triple, field).n_eff_ratio;

    // Moran side: heterozygosity decay fitted over the same diffusive time.
    let lambda_rate = 1.0;
    let n = n_particles;
    let horizon = s * n as f64;
    let colours: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
    let mut het = 0.0;
    for r in 0..(2 * replicates) {
        let mut rng = substream(seed.wrapping_add(5000 + r as u64), StreamKind::Replicate, 0);
        let res = limits::moran_simulate(lambda_rate, &colours, horizon, &mut rng)?;
        let p = *res.final_counts.get(&0).unwrap_or(&0) as f64 / n as f64;
        het += p * (1.0 - p);
    }
    let het = het / (2 * replicates) as f64;
    let theta_moran = -(het / 0.25).ln() / s;
    Ok((ratio_obs, ratio_pred, theta_moran, 2.0 * lambda_rate))
}

/// Deterministic self-checks of the measure metrics.
pub fn metrics_selftest() -> Vec<Statistic> {
    let mut stats = Vec::new();
    let d = |x: f64, m: f64| (vec![x], m);
    let mu = DiscreteMeasure::probability(vec![d(0.0, 1.0)]).unwrap();
    let nu = DiscreteMeasure::probability(vec![d(0.3, 1.0)]).unwrap();
    stats.push(Statistic::abs(
        "w1_single_pair",
        mu.wasserstein1(&nu).unwrap(),
        0.3,
        1e-12,
    ));
    let two = DiscreteMeasure::probability(vec![d(0.0, 0.5), d(0.5, 0.5)]).unwrap();
    stats.push(Statistic::abs(
        "self_correlation_pair",
        two.self_correlation(1.0),
        0.75,
        1e-12,
    ));
    stats.push(Statistic::abs(
        "wa_shifted_atom",
        mu.weak_atomic(&nu).unwrap(),
        0.3,
        1e-12,
    ));
    // atom-splitting keeps the weak atomic distance bounded away from 0
    // while plain transport vanishes.
    let whole = DiscreteMeasure::probability(vec![d(0.5, 1.0)]).unwrap();
    let split = DiscreteMeasure::probability(vec![d(0.498, 0.5), d(0.502, 0.5)]).unwrap();
    stats.push(Statistic::upper(
        "w1_split_small",
        whole.wasserstein1(&split).unwrap(),
        0.01,
    ));
    let wa = whole.weak_atomic(&split).unwrap();
    stats.push(Statistic {
        name: "wa_split_separated".into(),
        observed: wa,
        oracle: 0.5,
        tolerance: 0.1,
        pass: wa >= 0.4,
    });
    stats
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let field = config.resolved_field();
    let mut series = Vec::new();
    let stats = match config.experiment {
        ExperimentKind::EigenToy => {
            let (triple, lambda_err, sup_err) = eigen_toy(config.n)?;
            series.push(Series {
                name: "phi (computed)".into(),
                points: triple
                    .grid
                    .iter()
                    .zip(&triple.phi_values)
                    .map(|(&x, &p)| (x, p))
                    .collect(),
            });
            let scale = triple.phi_values[0] / 3.0;
            series.push(Series {
                name: "phi (reference)".into(),
                points: triple
                    .grid
                    .iter()
                    .map(|&x| (x, scale * (2.0 + (std::f64::consts::PI * x).cos())))
                    .collect(),
            });
            vec![
                Statistic::abs("lambda_error", lambda_err, 0.0, 1e-3),
                Statistic::abs("phi_sup_error", sup_err, 0.0, 1e-3),
            ]
        }
        ExperimentKind::RightEfn => {
            let rows = right_efn(config.n, config.horizon, config.dt, config.seed)?;
            series.push(Series {
                name: "colour mass (simulated)".into(),
                points: rows.iter().map(|&(x, o, _)| (x, o)).collect(),
            });
            series.push(Series {
                name: "phi weight (analytic)".into(),
                points: rows.iter().map(|&(x, _, p)| (x, p)).collect(),
            });
            let max_err = rows
                .iter()
                .map(|&(_, o, p)| (o - p).abs())
                .fold(0.0, f64::max);
            let tol = if config.n >= 100_000 { 0.01 } else { 0.02 };
            vec![Statistic::abs("atom_mass_max_error", max_err, 0.0, tol)]
        }
        ExperimentKind::Qsd => {
            let triple = principal_eigentriple(&field, 1024)?;
            let l1 = qsd_l1(
                &field,
                &triple,
                config.n,
                config.horizon,
                config.dt,
                50,
                config.seed,
            )?;
            vec![Statistic::abs("histogram_l1", l1, 0.0, 0.02)]
        }
        ExperimentKind::DeathRate => {
            let triple = principal_eigentriple(&field, 1024)?;
            let j = death_rate(
                &field,
                config.n,
                config.horizon - 1.0,
                config.horizon,
                config.dt,
                config.seed,
            )?;
            vec![Statistic::abs("jump_rate", j, triple.lambda, 0.05)]
        }
        ExperimentKind::ThetaVariance => {
            let triple = principal_eigentriple(&field, 1024)?;
            let (obs, pred) = theta_variance(
                &field,
                &triple,
                config.n,
                config.replicates,
                config.horizon,
                config.dt,
                config.seed,
            )?;
            let rel_tol = if config.replicates >= 200 { 0.15 } else { 0.25 };
            vec![Statistic::rel("replicate_variance", obs, pred, rel_tol)]
        }
        ExperimentKind::FixationLaw => {
            let triple = principal_eigentriple(&field, 1024)?;
            let (tv, obs, pred) = fixation_law(
                &field,
                &triple,
                config.n,
                config.replicates,
                config.dt,
                config.seed,
            )?;
            series.push(Series {
                name: "fixed-colour frequency".into(),
                points: obs.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
            });
            series.push(Series {
                name: "initial tilted weight".into(),
                points: pred.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
            });
            let tol = if config.replicates >= 500 { 0.05 } else { 0.08 };
            vec![Statistic::abs("fixed_colour_tv", tv, 0.0, tol)]
        }
        ExperimentKind::SpineMarginal => {
            let triple = principal_eigentriple(&field, 1024)?;
            let study = spine_study(
                &field,
                &triple,
                config.n,
                config.replicates,
                config.horizon / 2.0,
                config.horizon,
                25,
                config.dt,
                config.seed,
            )?;
            series.push(Series {
                name: "spine histogram".into(),
                points: study.histogram.iter().map(|&(x, o, _)| (x, o)).collect(),
            });
            series.push(Series {
                name: "phi^2 density".into(),
                points: study.histogram.iter().map(|&(x, _, p)| (x, p)).collect(),
            });
            let tol = if config.n >= 1000 && config.replicates >= 50 {
                0.05
            } else {
                0.3
            };
            vec![Statistic::abs("spine_hist_l1", study.hist_l1, 0.0, tol)]
        }
        ExperimentKind::SkeletonRate => {
            let triple = principal_eigentriple(&field, 1024)?;
            let study = spine_study(
                &field,
                &triple,
                config.n,
                config.replicates,
                config.horizon / 2.0,
                config.horizon,
                25,
                config.dt,
                config.seed,
            )?;
            let rel_tol = if config.replicates >= 50 { 0.10 } else { 0.20 };
            vec![Statistic::rel(
                "spine_branch_rate",
                study.branch_rate,
                2.0 * triple.lambda,
                rel_tol,
            )]
        }
        ExperimentKind::NeffCompare => {
            let triple = principal_eigentriple(&field, 1024)?;
            let (ratio_obs, ratio_pred, theta_moran, theta_moran_pred) = neff_compare(
                &field,
                &triple,
                config.n,
                config.replicates,
                config.horizon,
                config.dt,
                config.seed,
            )?;
            vec![
                Statistic::rel("neff_ratio", ratio_obs, ratio_pred, 0.25),
                Statistic::rel("moran_rate", theta_moran, theta_moran_pred, 0.10),
            ]
        }
        ExperimentKind::MetricsSelftest => metrics_selftest(),
    };
    let report = Report::new(config, stats, series);
    if let Some(dir) = &config.out {
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_toy_experiment_passes() {
        let cfg = ExperimentConfig::defaults(ExperimentKind::EigenToy);
        let report = run_experiment(&cfg).unwrap();
        assert!(report.pass, "{:?}", report.stats);
        assert_eq!(report.series.len(), 2);
        assert!(report.version.contains("fv-core"));
    }

    #[test]
    fn metrics_selftest_passes() {
        let cfg = ExperimentConfig::defaults(ExperimentKind::MetricsSelftest);
        let report = run_experiment(&cfg).unwrap();
        assert!(report.pass, "{:?}", report.stats);
    }

    #[test]
    fn plot_is_deterministic_and_handles_empty() {
        let empty = emit_plot(&[], "empty");
        assert!(empty.starts_with("<svg"));
        assert!(empty.contains("<line"));
        assert!(!empty.contains("polyline"));
        let s = vec![Series {
            name: "a".into(),
            points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)],
        }];
        let one = emit_plot(&s, "t");
        let two = emit_plot(&s, "t");
        assert_eq!(one, two);
        assert!(one.contains("polyline"));
    }

    #[test]
    fn report_files_written() {
        let dir = std::env::temp_dir().join(format!("fv-harness-{}", std::process::id()));
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::EigenToy);
        cfg.out = Some(dir.clone());
        run_experiment(&cfg).unwrap();
        let report: Report =
            serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap())
                .unwrap();
        assert!(report.pass);
        assert_eq!(report.config.n, cfg.n);
        assert!(dir.join("stats.csv").exists());
        assert!(dir.join("plot.svg").exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn experiment_kind_round_trips() {
        for kind in ExperimentKind::ALL {
            let s = kind.to_string();
            assert_eq!(ExperimentKind::parse(&s).unwrap(), kind);
        }
        assert!(ExperimentKind::parse("bogus").is_err());
    }

    #[test]
    fn sampled_pi_matches_density() {
        let field = CoefficientField::toy();
        let triple = principal_eigentriple(&field, 512).unwrap();
        let mut rng = substream(17, StreamKind::Aux, 0);
        let bins = 10;
        let mut hist = vec![0.0; bins];
        let draws = 40_000;
        for _ in 0..draws {
            let x = sample_from_pi(&triple, &mut rng);
            hist[((x * bins as f64) as usize).min(bins - 1)] += 1.0;
        }
        // density (2 + cos pi x) / 2.
        let mut l1 = 0.0;
        for (b, h) in hist.iter().enumerate() {
            let x = (b as f64 + 0.5) / bins as f64;
            let target = (2.0 + (std::f64::consts::PI * x).cos()) / 2.0 / bins as f64;
            l1 += (h / draws as f64 - target).abs();
        }
        assert!(l1 < 0.02, "pi sampler L1 error {l1}");
    }

    #[test]
    fn small_death_rate_run() {
        let field = CoefficientField::toy();
        let j = death_rate(&field, 2000, 2.0, 3.0, 1e-3, 5).unwrap();
        assert!((j - 2.0).abs() < 0.2, "jump increment {j}");
    }

    #[test]
    fn small_spine_study_runs() {
        let field = CoefficientField::toy();
        let triple = principal_eigentriple(&field, 512).unwrap();
        let study = spine_study(&field, &triple, 60, 3, 1.0, 2.0, 10, 1e-2, 9).unwrap();
        assert!(study.hist_l1 < 2.0);
        assert!(study.branch_rate > 0.0);
        let total: f64 = study.histogram.iter().map(|&(_, o, _)| o).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn small_fixation_law_runs() {
        let field = CoefficientField::toy();
        let triple = principal_eigentriple(&field, 512).unwrap();
        let (tv, obs, pred) = fixation_law(&field, &triple, 40, 40, 1e-2, 3).unwrap();
        assert!(tv < 0.35, "tv {tv} obs {obs:?} pred {pred:?}");
        assert!((obs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((pred.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // unequal blocks force an increasing predicted law.
        assert!(pred[3] > pred[0]);
    }
}
