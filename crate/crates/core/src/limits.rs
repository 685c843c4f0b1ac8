//! Reference limit processes: the n-type Wright-Fisher diffusion on the
//! simplex, the (non-spatial) Moran model, and the Q-process — the killed
//! reflected diffusion conditioned to survive forever.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::dynamics::{fold, KilledPath};
use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::rng::{substream, StreamKind};
use crate::spectral::EigenTriple;

/// Coordinates within this distance of 0 or 1 are treated as absorbed.
const ABSORB_TOL: f64 = 1e-12;

/// Point on the probability simplex together with the diffusion rate.
/// Absorbed coordinates are exactly 0 and never revive.
#[derive(Debug, Clone)]
pub struct SimplexState {
    pub p: Vec<f64>,
    pub theta: f64,
}

impl SimplexState {
    pub fn new(p: Vec<f64>, theta: f64) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidConfig("need at least two types".into()));
        }
        if theta <= 0.0 || !theta.is_finite() {
            return Err(Error::InvalidConfig(format!("bad rate theta = {theta}")));
        }
        if p.iter().any(|&x| !(0.0..=1.0 + 1e-10).contains(&x)) {
            return Err(Error::InvalidConfig("frequencies outside [0, 1]".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidConfig(format!(
                "frequencies sum to {total}, not 1"
            )));
        }
        let mut s = SimplexState { p, theta };
        s.project();
        Ok(s)
    }

    pub fn n_types(&self) -> usize {
        self.p.len()
    }

    /// The absorbing vertex this state sits at, if any.
    pub fn vertex(&self) -> Option<usize> {
        self.p.iter().position(|&x| x == 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.p.iter().sum();
        if (total - 1.0).abs() > 1e-10 || self.p.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "left the simplex: sum = {total}, min = {:?}",
                self.p.iter().cloned().fold(f64::INFINITY, f64::min)
            )));
        }
        Ok(())
    }

    /// Snap absorbed coordinates and renormalize the live ones so the
    /// simplex constraint holds exactly.
    fn project(&mut self) {
        for x in &mut self.p {
            if *x < ABSORB_TOL {
                *x = 0.0;
            } else if *x > 1.0 - ABSORB_TOL {
                *x = 1.0;
            }
        }
        if let Some(i) = self.p.iter().position(|&x| x == 1.0) {
            for (j, x) in self.p.iter_mut().enumerate() {
                *x = if j == i { 1.0 } else { 0.0 };
            }
            return;
        }
        let total: f64 = self.p.iter().sum();
        for x in &mut self.p {
            *x /= total;
        }
    }
}

/// One Euler step of the Wright-Fisher diffusion with covariance
/// theta * p_i (delta_ij - p_j) dt, sampled as diag(sqrt p)(Z - sqrt p
/// (sqrt p . Z)), then projected back to the simplex.
pub fn wf_step<R: Rng>(state: &mut SimplexState, dt: f64, rng: &mut R) {
    if state.vertex().is_some() {
        return;
    }
    let n = state.p.len();
    let sqrt_p: Vec<f64> = state.p.iter().map(|&x| x.sqrt()).collect();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let s: f64 = sqrt_p.iter().zip(&z).map(|(a, b)| a * b).sum();
    let scale = (state.theta * dt).sqrt();
    for i in 0..n {
        if state.p[i] == 0.0 {
            continue; // absorbed coordinates never revive
        }
        state.p[i] += scale * sqrt_p[i] * (z[i] - sqrt_p[i] * s);
        state.p[i] = state.p[i].clamp(0.0, 1.0);
    }
    state.project();
}

/// Simulate until one type fixes; returns the fixation time and the index.
pub fn wf_fixation<R: Rng>(
    p0: &[f64],
    theta: f64,
    dt: f64,
    rng: &mut R,
) -> Result<(f64, usize)> {
    let mut state = SimplexState::new(p0.to_vec(), theta)?;
    let mut t = 0.0;
    // generous cap: mean fixation times are O(1/theta).
    let t_max = 1e4 / theta;
    loop {
        if let Some(i) = state.vertex() {
            return Ok((t, i));
        }
        if t > t_max {
            return Err(Error::Unfixed { horizon: t });
        }
        wf_step(&mut state, dt, rng);
        t += dt;
    }
}

/// Mean fixation time of the two-type diffusion started at p, by solving
/// (theta/2) p(1-p) u'' = -1 with u(0) = u(1) = 0 on a fine grid.
pub fn wf_mean_fixation_time(p0: f64, theta: f64, n: usize) -> f64 {
    // tridiagonal solve for u on the interior nodes.
    let h = 1.0 / n as f64;
    let m = n - 1;
    let mut sub = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut sup = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for k in 0..m {
        let p = (k + 1) as f64 * h;
        let a = 0.5 * theta * p * (1.0 - p) / (h * h);
        sub[k] = a;
        sup[k] = a;
        diag[k] = -2.0 * a;
        rhs[k] = -1.0;
    }
    // Thomas algorithm.
    for k in 1..m {
        let w = sub[k] / diag[k - 1];
        diag[k] -= w * sup[k - 1];
        rhs[k] -= w * rhs[k - 1];
    }
    let mut u = vec![0.0; m];
    u[m - 1] = rhs[m - 1] / diag[m - 1];
    for k in (0..m - 1).rev() {
        u[k] = (rhs[k] - sup[k] * u[k + 1]) / diag[k];
    }
    // linear interpolation at p0.
    let s = (p0 / h - 1.0).clamp(0.0, (m - 1) as f64);
    let k = (s.floor() as usize).min(m - 2);
    let w = s - k as f64;
    u[k] * (1.0 - w) + u[k + 1] * w
}

#[derive(Debug, Clone)]
pub struct MoranResult {
    pub fixation: Option<(f64, u32)>,
    pub final_counts: BTreeMap<u32, usize>,
    pub n_events: usize,
}

/// Non-spatial Moran model: each of the N individuals dies at the given
/// rate and instantly copies the colour of a uniformly chosen other.
pub fn moran_simulate<R: Rng>(
    rate: f64,
    colours: &[u32],
    horizon: f64,
    rng: &mut R,
) -> Result<MoranResult> {
    let n = colours.len();
    if n < 2 {
        return Err(Error::InvalidConfig("Moran model needs N >= 2".into()));
    }
    if rate <= 0.0 || !rate.is_finite() {
        return Err(Error::InvalidConfig(format!("bad Moran rate {rate}")));
    }
    let mut col = colours.to_vec();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in &col {
        *counts.entry(c).or_insert(0) += 1;
    }
    let exp = Exp::new(rate * n as f64).unwrap();
    let mut t = 0.0;
    let mut fixation = if counts.len() == 1 {
        Some((0.0, col[0]))
    } else {
        None
    };
    let mut n_events = 0usize;
    loop {
        t += exp.sample(rng);
        if t > horizon {
            break;
        }
        if fixation.is_none() {
            let victim = rng.gen_range(0..n);
            let mut target = rng.gen_range(0..n - 1);
            if target >= victim {
                target += 1;
            }
            let old = col[victim];
            let new = col[target];
            n_events += 1;
            if old != new {
                col[victim] = new;
                *counts.get_mut(&old).unwrap() -= 1;
                if counts[&old] == 0 {
                    counts.remove(&old);
                }
                *counts.entry(new).or_insert(0) += 1;
                if counts.len() == 1 {
                    fixation = Some((t, new));
                }
            }
        } else {
            n_events += 1;
        }
    }
    Ok(MoranResult {
        fixation,
        final_counts: counts,
        n_events,
    })
}

/// Q-process configuration: the base field plus the spectral triple
/// supplying the Doob tilt.
#[derive(Debug, Clone)]
pub struct QProcessConfig {
    pub field: CoefficientField,
    pub triple: EigenTriple,
    /// sigma^2 * phi' / phi on the spectral grid.
    tilt: Vec<f64>,
}

impl QProcessConfig {
    pub fn new(field: CoefficientField, triple: EigenTriple) -> Result<Self> {
        if field.dim != 1 {
            return Err(Error::InvalidConfig(
                "the Q-process simulator is one-dimensional".into(),
            ));
        }
        if triple.phi_values.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig(
                "Doob tilt needs phi > 0 on the grid".into(),
            ));
        }
        let n = triple.grid.len();
        let h = triple.h();
        let mut tilt = vec![0.0; n];
        for i in 0..n {
            // one-sided at the ends; phi has zero normal derivative there,
            // so the tilt drift vanishes at the walls either way.
            let dphi = if i == 0 {
                (triple.phi_values[1] - triple.phi_values[0]) / h
            } else if i == n - 1 {
                (triple.phi_values[n - 1] - triple.phi_values[n - 2]) / h
            } else {
                (triple.phi_values[i + 1] - triple.phi_values[i - 1]) / (2.0 * h)
            };
            let sig = field.sigma_diag(&[triple.grid[i]], 0);
            tilt[i] = sig * sig * dphi / triple.phi_values[i];
        }
        Ok(QProcessConfig {
            field,
            triple,
            tilt,
        })
    }

    fn tilt_at(&self, x: f64) -> f64 {
        let g = &self.triple.grid;
        let h = self.triple.h();
        let s = ((x - g[0]) / h).clamp(0.0, (g.len() - 1) as f64);
        let k = (s.floor() as usize).min(g.len() - 2);
        let w = s - k as f64;
        self.tilt[k] * (1.0 - w) + self.tilt[k + 1] * w
    }
}

/// Reflected diffusion with drift b + sigma^2 phi'/phi and no killing.
pub fn q_process_simulate<R: Rng>(
    x0: f64,
    cfg: &QProcessConfig,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<KilledPath> {
    let lo = cfg.field.bounds.lo[0];
    let hi = cfg.field.bounds.hi[0];
    if !(lo..=hi).contains(&x0) {
        return Err(Error::InvalidConfig(format!("x0 = {x0} outside the box")));
    }
    let steps = ((horizon / dt).round() as usize).max(1);
    let dt_eff = horizon / steps as f64;
    let mut x = x0;
    let mut positions = Vec::with_capacity(steps + 1);
    positions.push(x);
    for _ in 0..steps {
        let b = {
            let mut out = [0.0];
            cfg.field.drift_into(&[x], &mut out);
            out[0]
        };
        let sig = cfg.field.sigma_diag(&[x], 0);
        let xi: f64 = rng.sample(StandardNormal);
        x = fold(
            x + (b + cfg.tilt_at(x)) * dt_eff + sig * dt_eff.sqrt() * xi,
            lo,
            hi,
        );
        positions.push(x);
    }
    Ok(KilledPath {
        t_b: 0.0,
        dt: dt_eff,
        dim: 1,
        positions,
        t_d: None,
    })
}

/// Draw from the phi-tilted uniform law on the box by rejection against
/// max phi over the grid.
pub fn sample_tilted<R: Rng>(cfg: &QProcessConfig, rng: &mut R) -> f64 {
    let lo = cfg.field.bounds.lo[0];
    let hi = cfg.field.bounds.hi[0];
    let phi_max = cfg
        .triple
        .phi_values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    loop {
        let x = rng.gen_range(lo..hi);
        if rng.gen::<f64>() * phi_max < cfg.triple.phi_at(x) {
            return x;
        }
    }
}

/// Replicated fixation study for the Wright-Fisher diffusion.
pub fn wf_fixation_study(
    p0: &[f64],
    theta: f64,
    dt: f64,
    replicates: usize,
    seed: u64,
) -> Result<Vec<(f64, usize)>> {
    (0..replicates)
        .map(|r| {
            let mut rng = substream(seed, StreamKind::Replicate, r as u64);
            wf_fixation(p0, theta, dt, &mut rng)
        })
        .collect()
}
