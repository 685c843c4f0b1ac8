//! The N-particle Fleming-Viot multi-colour engine.
//!
//! N reflected diffusions advance on a shared dt grid; a global thinned
//! Poisson stream of rate N * kappa_max proposes kill events, each accepted
//! with probability kappa(victim)/kappa_max. The victim relocates to a
//! uniformly chosen other particle and copies its colour, so colours are
//! only ever copied and the set of live colours shrinks to a single fixed
//! colour in finite time.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::dynamics::Stepper;
use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::measures::{DiscreteMeasure, MetricPoint};
use crate::rng::{substream, StreamKind};
use crate::spectral::{carre_du_champ, EigenTriple};

pub type ColourId = u32;

/// What a colour id stands for.
#[derive(Debug, Clone, PartialEq)]
pub enum ColourPayload {
    /// Opaque label; distinct labels are at distance 1.
    Label(u64),
    /// A point of the spatial domain (colour space = domain).
    Point(Vec<f64>),
    /// Index of an initial particle whose stored path is the colour
    /// (path-valued colour space).
    PathRef(usize),
}

/// Resolves colour ids to payloads and measures distances between them
/// (always capped at 1).
#[derive(Debug, Clone)]
pub struct ColourTable {
    payloads: Vec<ColourPayload>,
    paths: Option<Arc<PathStore>>,
}

impl ColourTable {
    pub fn new(payloads: Vec<ColourPayload>) -> Self {
        ColourTable {
            payloads,
            paths: None,
        }
    }

    /// Attach the path store that `PathRef` payloads point into.
    pub fn with_paths(mut self, paths: Arc<PathStore>) -> Self {
        self.paths = Some(paths);
        self
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn payload(&self, id: ColourId) -> &ColourPayload {
        &self.payloads[id as usize]
    }

    pub fn distance(&self, a: ColourId, b: ColourId) -> f64 {
        if a == b {
            return 0.0;
        }
        match (self.payload(a), self.payload(b)) {
            (ColourPayload::Label(x), ColourPayload::Label(y)) => {
                if x == y {
                    0.0
                } else {
                    1.0
                }
            }
            (ColourPayload::Point(x), ColourPayload::Point(y)) => x.distance(y).min(1.0),
            (ColourPayload::PathRef(i), ColourPayload::PathRef(j)) => {
                let store = self
                    .paths
                    .as_ref()
                    .expect("path-valued colours need an attached path store");
                let mut sup = 0.0f64;
                for s in 0..store.n_steps() {
                    let d = store
                        .point(s, *i)
                        .iter()
                        .zip(store.point(s, *j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    sup = sup.max(d);
                    if sup >= 1.0 {
                        return 1.0;
                    }
                }
                sup.min(1.0)
            }
            _ => 1.0,
        }
    }
}

/// One colour atom inside a measure; carries its table so the measure
/// metric is self-contained.
#[derive(Debug, Clone)]
pub struct ColourAtom {
    pub id: ColourId,
    pub table: Arc<ColourTable>,
}

impl MetricPoint for ColourAtom {
    fn distance(&self, other: &Self) -> f64 {
        self.table.distance(self.id, other.id)
    }
}

/// Positions of all particles at every grid time of a run.
#[derive(Debug, Clone)]
pub struct PathStore {
    pub t0: f64,
    pub dt: f64,
    pub n: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl PathStore {
    pub fn new(t0: f64, dt: f64, n: usize, dim: usize) -> Self {
        PathStore {
            t0,
            dt,
            n,
            dim,
            data: Vec::new(),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.data.len() / (self.n * self.dim)
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps().saturating_sub(1))
    }

    pub fn point(&self, step: usize, particle: usize) -> &[f64] {
        let base = (step * self.n + particle) * self.dim;
        &self.data[base..base + self.dim]
    }

    /// Position of a particle at the last grid time <= t (clamped).
    pub fn point_at(&self, t: f64, particle: usize) -> &[f64] {
        let steps = self.n_steps();
        let idx = (((t - self.t0) / self.dt + 1e-9).floor() as i64)
            .clamp(0, steps as i64 - 1) as usize;
        self.point(idx, particle)
    }

    pub(crate) fn record(&mut self, positions: &[f64]) {
        self.data.extend_from_slice(positions);
    }

    /// Rebuild a store from a flat row-major dump (step-major, then
    /// particle, then coordinate) as produced by `flat_rows`.
    pub fn from_flat(t0: f64, dt: f64, n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || dim == 0 || data.is_empty() || data.len() % (n * dim) != 0 {
            return Err(Error::InvalidConfig(format!(
                "flat path dump of length {} does not tile {n} particles x {dim} coords",
                data.len()
            )));
        }
        Ok(PathStore { t0, dt, n, dim, data })
    }

    /// All positions recorded at one grid step, particle-major.
    pub fn flat_row(&self, step: usize) -> &[f64] {
        let w = self.n * self.dim;
        &self.data[step * w..(step + 1) * w]
    }
}

/// An accepted kill/relocation event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub victim: u32,
    pub target: u32,
}

/// Strictly time-ordered log of all events of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<EventRecord>,
    pub n: usize,
}

impl EventLog {
    /// J_t = (number of events up to and including t) / N.
    pub fn jump_statistic(&self, t: f64) -> f64 {
        let c = self.events.iter().take_while(|e| e.time <= t).count();
        c as f64 / self.n as f64
    }

    pub fn append(&mut self, mut other: EventLog) {
        if let (Some(a), Some(b)) = (self.events.last(), other.events.first()) {
            assert!(a.time < b.time, "event logs overlap in time");
        }
        self.events.append(&mut other.events);
    }

    /// Apply the recorded colour copies to an initial colour assignment.
    pub fn replay_colours(&self, initial: &[ColourId]) -> Vec<ColourId> {
        let mut c = initial.to_vec();
        for e in &self.events {
            c[e.victim as usize] = c[e.target as usize];
        }
        c
    }
}

/// Where the particles start.
#[derive(Debug, Clone)]
pub enum InitPositions {
    /// iid uniform over k+1 equally spaced atoms per coordinate axis
    /// (1D: {0, 1/k, ..., 1} scaled to the box).
    GridAtoms(usize),
    /// iid uniform over the box.
    Uniform,
    /// Exactly these points.
    Explicit(Vec<Vec<f64>>),
}

/// How initial colours are assigned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitColours {
    /// Every particle gets its own opaque label.
    Labels,
    /// Colour = initial position; coinciding particles share a colour.
    Positions,
    /// Path-valued: colour i refers to the path of initial particle i.
    Paths,
}

#[derive(Debug, Clone)]
pub struct SystemState {
    pub time: f64,
    pub n: usize,
    pub dim: usize,
    /// flat positions, `dim` entries per particle.
    pub positions: Vec<f64>,
    pub colours: Vec<ColourId>,
    pub table: Arc<ColourTable>,
    pub dt: f64,
    /// first time a single colour remained, with that colour.
    pub fixation: Option<(f64, ColourId)>,
    particle_rngs: Vec<ChaCha8Rng>,
    coordinator: ChaCha8Rng,
}

impl SystemState {
    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn distinct_colours(&self) -> usize {
        self.colours.iter().collect::<BTreeSet<_>>().len()
    }
}

pub fn init_system(
    field: &CoefficientField,
    n: usize,
    positions: &InitPositions,
    colours: InitColours,
    dt: f64,
    seed: u64,
) -> Result<SystemState> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need N >= 2 particles, got {n}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("dt = {dt} must be positive")));
    }
    field.validate()?;
    let d = field.dim;
    let mut init_rng = substream(seed, StreamKind::Init, 0);
    let mut pos = Vec::with_capacity(n * d);
    match positions {
        InitPositions::GridAtoms(k) => {
            if *k == 0 {
                return Err(Error::InvalidConfig("grid atom count must be positive".into()));
            }
            for _ in 0..n {
                for c in 0..d {
                    let j = init_rng.gen_range(0..=*k);
                    let (lo, hi) = (field.bounds.lo[c], field.bounds.hi[c]);
                    pos.push(lo + (hi - lo) * j as f64 / *k as f64);
                }
            }
        }
        InitPositions::Uniform => {
            for _ in 0..n {
                for c in 0..d {
                    pos.push(init_rng.gen_range(field.bounds.lo[c]..field.bounds.hi[c]));
                }
            }
        }
        InitPositions::Explicit(points) => {
            if points.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "{} explicit points for N = {n}",
                    points.len()
                )));
            }
            for p in points {
                if p.len() != d {
                    return Err(Error::InvalidConfig("point dimension mismatch".into()));
                }
                for (c, &x) in p.iter().enumerate() {
                    if x < field.bounds.lo[c] || x > field.bounds.hi[c] {
                        return Err(Error::InvalidConfig(format!(
                            "explicit point {p:?} outside the box"
                        )));
                    }
                }
                pos.extend_from_slice(p);
            }
        }
    }

    let (ids, payloads) = match colours {
        InitColours::Labels => (
            (0..n as u32).collect::<Vec<_>>(),
            (0..n as u64).map(ColourPayload::Label).collect(),
        ),
        InitColours::Positions => {
            let mut payloads: Vec<ColourPayload> = Vec::new();
            let mut ids = Vec::with_capacity(n);
            for i in 0..n {
                let p = pos[i * d..(i + 1) * d].to_vec();
                let id = payloads
                    .iter()
                    .position(|q| matches!(q, ColourPayload::Point(x) if *x == p));
                match id {
                    Some(id) => ids.push(id as u32),
                    None => {
                        ids.push(payloads.len() as u32);
                        payloads.push(ColourPayload::Point(p));
                    }
                }
            }
            (ids, payloads)
        }
        InitColours::Paths => (
            (0..n as u32).collect::<Vec<_>>(),
            (0..n).map(ColourPayload::PathRef).collect(),
        ),
    };

    let fixation = if ids.iter().collect::<BTreeSet<_>>().len() == 1 {
        Some((0.0, ids[0]))
    } else {
        None
    };
    Ok(SystemState {
        time: 0.0,
        n,
        dim: d,
        positions: pos,
        colours: ids,
        table: Arc::new(ColourTable::new(payloads)),
        dt,
        fixation,
        particle_rngs: (0..n)
            .map(|i| substream(seed, StreamKind::Particle, i as u64))
            .collect(),
        coordinator: substream(seed, StreamKind::Coordinator, 0),
    })
}

/// Full state capture at one grid time.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: f64,
    pub positions: Vec<f64>,
    pub colours: Vec<ColourId>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub log: EventLog,
    pub snapshots: Vec<Snapshot>,
    pub paths: Option<PathStore>,
}

/// Advance the system to `horizon` under `field`, capturing snapshots at
/// the requested times (snapped to the dt grid) and optionally the full
/// path history.
pub fn run_field(
    state: &mut SystemState,
    field: &CoefficientField,
    horizon: f64,
    snapshot_times: &[f64],
    store_paths: bool,
) -> Result<RunOutput> {
    run_field_with(state, field, horizon, snapshot_times, store_paths, |_| {})
}

pub fn run_field_with(
    state: &mut SystemState,
    field: &CoefficientField,
    horizon: f64,
    snapshot_times: &[f64],
    store_paths: bool,
    mut on_event: impl FnMut(&EventRecord),
) -> Result<RunOutput> {
    if horizon <= state.time {
        return Err(Error::InvalidConfig(format!(
            "horizon {horizon} not beyond current time {}",
            state.time
        )));
    }
    if field.dim != state.dim {
        return Err(Error::InvalidConfig("field/state dimension mismatch".into()));
    }
    let n = state.n;
    let d = state.dim;
    let dt = state.dt;
    let kmax = field.kappa_max();
    let t0 = state.time;
    let steps = (((horizon - t0) / dt).round() as usize).max(1);
    let dt_eff = (horizon - t0) / steps as f64;

    let mut log = EventLog {
        events: Vec::new(),
        n,
    };
    let mut snapshots = Vec::new();
    let mut snap_times: Vec<f64> = snapshot_times.to_vec();
    snap_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut snap_idx = 0usize;
    let mut paths = store_paths.then(|| PathStore::new(t0, dt_eff, n, d));
    if let Some(p) = paths.as_mut() {
        p.record(&state.positions);
    }

    // colour bookkeeping for fixation detection.
    let mut counts = vec![0u64; state.table.len()];
    for &c in &state.colours {
        counts[c as usize] += 1;
    }
    let mut distinct = counts.iter().filter(|&&c| c > 0).count();

    let exp = (kmax > 0.0).then(|| rand_distr::Exp::new(n as f64 * kmax).unwrap());
    let mut next_candidate = match &exp {
        Some(e) => t0 + e.sample(&mut state.coordinator),
        None => f64::INFINITY,
    };

    let mut stepper = Stepper::new(d);
    let capture = |state: &SystemState, snapshots: &mut Vec<Snapshot>, t: f64| {
        snapshots.push(Snapshot {
            time: t,
            positions: state.positions.clone(),
            colours: state.colours.clone(),
        });
    };
    while snap_idx < snap_times.len() && snap_times[snap_idx] <= t0 + dt_eff / 2.0 {
        capture(state, &mut snapshots, t0);
        snap_idx += 1;
    }

    for s in 0..steps {
        let t_next = t0 + (s + 1) as f64 * dt_eff;
        // events in this grid interval see start-of-interval positions.
        while next_candidate <= t_next {
            let i = state.coordinator.gen_range(0..n);
            let kap = field.kappa(state.position(i));
            if kap > kmax * (1.0 + 1e-12) + 1e-300 {
                return Err(Error::KappaBoundViolated {
                    observed: kap,
                    bound: kmax,
                });
            }
            let accept = state.coordinator.gen::<f64>() * kmax < kap;
            if accept {
                let mut j = state.coordinator.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                // relocate: copy position and colour of the target.
                let (pi, pj) = (i * d, j * d);
                for c in 0..d {
                    state.positions[pi + c] = state.positions[pj + c];
                }
                let old = state.colours[i];
                let new = state.colours[j];
                if old != new {
                    state.colours[i] = new;
                    counts[old as usize] -= 1;
                    if counts[old as usize] == 0 {
                        distinct -= 1;
                    }
                    counts[new as usize] += 1;
                }
                let mut t_event = next_candidate;
                if let Some(last) = log.events.last() {
                    // float ties are a.s. impossible; nudge to keep the log
                    // strictly ordered.
                    if t_event <= last.time {
                        t_event = last.time * (1.0 + f64::EPSILON) + f64::MIN_POSITIVE;
                    }
                }
                let rec = EventRecord {
                    time: t_event,
                    victim: i as u32,
                    target: j as u32,
                };
                on_event(&rec);
                log.events.push(rec);
                if distinct == 1 && state.fixation.is_none() {
                    state.fixation = Some((t_event, state.colours[i]));
                }
            }
            next_candidate += exp.as_ref().unwrap().sample(&mut state.coordinator);
        }
        // advance every particle one grid step on its own stream.
        for i in 0..n {
            let x = &mut state.positions[i * d..(i + 1) * d];
            stepper.step(x, dt_eff, field, &mut state.particle_rngs[i])?;
        }
        state.time = t_next;
        if let Some(p) = paths.as_mut() {
            p.record(&state.positions);
        }
        while snap_idx < snap_times.len() && snap_times[snap_idx] <= t_next + dt_eff / 2.0 {
            capture(state, &mut snapshots, t_next);
            snap_idx += 1;
        }
    }

    Ok(RunOutput {
        log,
        snapshots,
        paths,
    })
}

/// Spatial empirical measure m_t = (1/N) sum delta_{X_i}.
pub fn empirical_measure(state: &SystemState) -> DiscreteMeasure<Vec<f64>> {
    let w = 1.0 / state.n as f64;
    DiscreteMeasure::new(
        (0..state.n)
            .map(|i| (state.position(i).to_vec(), w))
            .collect(),
    )
    .expect("positive atom masses")
}

/// Colour empirical measure chi_t = (1/N) sum delta_{eta_i}.
pub fn colour_empirical(state: &SystemState) -> DiscreteMeasure<ColourAtom> {
    let mut counts = vec![0u64; state.table.len()];
    for &c in &state.colours {
        counts[c as usize] += 1;
    }
    DiscreteMeasure::new(
        counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(id, &c)| {
                (
                    ColourAtom {
                        id: id as ColourId,
                        table: state.table.clone(),
                    },
                    c as f64 / state.n as f64,
                )
            })
            .collect(),
    )
    .expect("non-empty colour measure")
}

/// P^E = (1/N) sum_{i: eta_i in E} phi(X_i); Q = P^K (E = all colours).
pub fn p_statistic(state: &SystemState, triple: &EigenTriple, colour_set: &BTreeSet<ColourId>) -> f64 {
    (0..state.n)
        .filter(|&i| colour_set.contains(&state.colours[i]))
        .map(|i| triple.phi_at(state.position(i)[0]))
        .sum::<f64>()
        / state.n as f64
}

pub fn q_statistic(state: &SystemState, triple: &EigenTriple) -> f64 {
    let q = (0..state.n)
        .map(|i| triple.phi_at(state.position(i)[0]))
        .sum::<f64>()
        / state.n as f64;
    assert!(q > 0.0, "phi > 0 forces Q > 0");
    q
}

/// Y^E = P^E / Q, the phi-tilted mass of the colour set E.
pub fn y_statistic(state: &SystemState, triple: &EigenTriple, colour_set: &BTreeSet<ColourId>) -> f64 {
    p_statistic(state, triple, colour_set) / q_statistic(state, triple)
}

/// Tilted colour measure: mass of colour c proportional to
/// sum_{i: eta_i = c} phi(X_i).
pub fn tilted_colour_measure(
    state: &SystemState,
    triple: &EigenTriple,
) -> DiscreteMeasure<ColourAtom> {
    let mut weights = vec![0.0f64; state.table.len()];
    let mut total = 0.0;
    for i in 0..state.n {
        let w = triple.phi_at(state.position(i)[0]);
        weights[state.colours[i] as usize] += w;
        total += w;
    }
    assert!(total > 0.0, "phi > 0 forces positive total mass");
    DiscreteMeasure::new(
        weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(id, &w)| {
                (
                    ColourAtom {
                        id: id as ColourId,
                        table: state.table.clone(),
                    },
                    w / total,
                )
            })
            .collect(),
    )
    .expect("non-empty tilted measure")
}

/// Lambda^E = <m^E, Gamma0(phi) + kappa phi^2> + <m^E, phi^2><m, kappa>,
/// the variance-scaling diagnostic for the colour set E.
pub fn lambda_statistic(
    state: &SystemState,
    triple: &EigenTriple,
    field: &CoefficientField,
    colour_set: &BTreeSet<ColourId>,
) -> f64 {
    let gamma = carre_du_champ(triple, field);
    let grid_interp = |vals: &[f64], x: f64| -> f64 {
        let h = triple.h();
        let lo = triple.grid[0];
        let n = triple.grid.len() - 1;
        let u = ((x - lo) / h).clamp(0.0, n as f64);
        let i = (u as usize).min(n - 1);
        let w = u - i as f64;
        vals[i] * (1.0 - w) + vals[i + 1] * w
    };
    let inv_n = 1.0 / state.n as f64;
    let mut m_e_core = 0.0; // <m^E, Gamma0(phi) + kappa phi^2>
    let mut m_e_phi2 = 0.0; // <m^E, phi^2>
    let mut m_kappa = 0.0; // <m, kappa>
    for i in 0..state.n {
        let x = state.position(i)[0];
        let kap = field.kappa(&[x]);
        m_kappa += kap * inv_n;
        if colour_set.contains(&state.colours[i]) {
            let phi = triple.phi_at(x);
            m_e_core += (grid_interp(&gamma, x) + kap * phi * phi) * inv_n;
            m_e_phi2 += phi * phi * inv_n;
        }
    }
    m_e_core + m_e_phi2 * m_kappa
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::principal_eigentriple;

    fn toy_state(n: usize, seed: u64) -> (CoefficientField, SystemState) {
        let f = CoefficientField::toy();
        let s = init_system(
            &f,
            n,
            &InitPositions::GridAtoms(20),
            InitColours::Positions,
            1e-3,
            seed,
        )
        .unwrap();
        (f, s)
    }

    #[test]
    fn explicit_positions_and_reproducibility() {
        let f = CoefficientField::toy();
        let pts = vec![vec![0.1], vec![0.5], vec![0.9]];
        let s = init_system(
            &f,
            3,
            &InitPositions::Explicit(pts.clone()),
            InitColours::Labels,
            1e-3,
            9,
        )
        .unwrap();
        assert_eq!(s.positions, vec![0.1, 0.5, 0.9]);
        let a = init_system(&f, 50, &InitPositions::Uniform, InitColours::Labels, 1e-3, 3).unwrap();
        let b = init_system(&f, 50, &InitPositions::Uniform, InitColours::Labels, 1e-3, 3).unwrap();
        assert_eq!(a.positions, b.positions);
        assert!(init_system(&f, 1, &InitPositions::Uniform, InitColours::Labels, 1e-3, 0).is_err());
        assert!(init_system(
            &f,
            4,
            &InitPositions::Explicit(pts),
            InitColours::Labels,
            1e-3,
            0
        )
        .is_err());
    }

    #[test]
    fn grid_atoms_give_multiples_of_inverse_n() {
        let (_, s) = toy_state(420, 11);
        let chi = colour_empirical(&s);
        assert_eq!(chi.atoms().len(), 21);
        let total: f64 = chi.atoms().iter().map(|(_, m)| m).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (_, m) in chi.atoms() {
            let k = m * 420.0;
            assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn n2_events_coalesce_colours() {
        let f = CoefficientField::constant_1d(0.0, 1.0, 0.0, 1.0, 2.0);
        let mut s = init_system(
            &f,
            2,
            &InitPositions::Explicit(vec![vec![0.2], vec![0.8]]),
            InitColours::Labels,
            1e-3,
            17,
        )
        .unwrap();
        let out = run_field(&mut s, &f, 3.0, &[], false).unwrap();
        assert!(!out.log.events.is_empty());
        // the one possible target means the first event already fixes.
        let first = out.log.events[0];
        assert_eq!(s.fixation.unwrap().0, first.time);
        assert_eq!(s.distinct_colours(), 1);
        assert_eq!(first.target, 1 - first.victim);
    }

    #[test]
    fn distinct_colours_non_increasing_and_replay_matches() {
        let (f, mut s) = toy_state(60, 23);
        let initial_colours = s.colours.clone();
        let mut distinct_seen = Vec::new();
        let out = {
            let mut counts_snapshot = Vec::new();
            let out =
                run_field_with(&mut s, &f, 4.0, &[], false, |_| counts_snapshot.push(())).unwrap();
            let mut c = initial_colours.clone();
            for e in &out.log.events {
                c[e.victim as usize] = c[e.target as usize];
                distinct_seen.push(c.iter().collect::<BTreeSet<_>>().len());
            }
            out
        };
        for w in distinct_seen.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(out.log.replay_colours(&initial_colours), s.colours);
        // strictly increasing event times.
        for w in out.log.events.windows(2) {
            assert!(w[0].time < w[1].time);
        }
    }

    #[test]
    fn jump_statistic_approaches_lambda() {
        let (f, mut s) = toy_state(2000, 5);
        let out = run_field(&mut s, &f, 5.0, &[], false).unwrap();
        let rate = out.log.jump_statistic(5.0) - out.log.jump_statistic(3.0);
        assert!((rate / 2.0 - 2.0).abs() < 0.15, "J rate {}", rate / 2.0);
    }

    #[test]
    fn tilted_measure_arithmetic() {
        // phi values (1, 3) at the two particles force masses (1/4, 3/4).
        let f = CoefficientField::toy();
        let s = init_system(
            &f,
            2,
            &InitPositions::Explicit(vec![vec![0.0], vec![1.0]]),
            InitColours::Labels,
            1e-3,
            0,
        )
        .unwrap();
        let triple = EigenTriple {
            grid: vec![0.0, 0.5, 1.0],
            pi_weights: vec![0.25, 0.5, 0.25],
            lambda: 1.0,
            phi_values: vec![1.0, 2.0, 3.0],
        };
        let y = tilted_colour_measure(&s, &triple);
        let mut masses: Vec<f64> = y.atoms().iter().map(|(_, m)| *m).collect();
        masses.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((masses[0] - 0.25).abs() < 1e-12);
        assert!((masses[1] - 0.75).abs() < 1e-12);
        let all: BTreeSet<ColourId> = s.colours.iter().copied().collect();
        assert!((y_statistic(&s, &triple, &all) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_phi_tilt_is_identity() {
        let (_, s) = toy_state(100, 2);
        let flat = EigenTriple {
            grid: vec![0.0, 0.5, 1.0],
            pi_weights: vec![0.25, 0.5, 0.25],
            lambda: 1.0,
            phi_values: vec![1.0, 1.0, 1.0],
        };
        let y = tilted_colour_measure(&s, &flat);
        let chi = colour_empirical(&s);
        let mut ym: Vec<(u32, f64)> = y.atoms().iter().map(|(a, m)| (a.id, *m)).collect();
        let mut cm: Vec<(u32, f64)> = chi.atoms().iter().map(|(a, m)| (a.id, *m)).collect();
        ym.sort_by(|a, b| a.0.cmp(&b.0));
        cm.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(ym.len(), cm.len());
        for (a, b) in ym.iter().zip(&cm) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_statistic_empty_monotone_stationary() {
        let f = CoefficientField::toy();
        let triple = principal_eigentriple(&f, 512).unwrap();
        let (_, s) = toy_state(4000, 31);
        assert_eq!(lambda_statistic(&s, &triple, &f, &BTreeSet::new()), 0.0);
        let some: BTreeSet<ColourId> = (0..5).collect();
        let more: BTreeSet<ColourId> = (0..15).collect();
        let all: BTreeSet<ColourId> = (0..s.table.len() as u32).collect();
        let l_some = lambda_statistic(&s, &triple, &f, &some);
        let l_more = lambda_statistic(&s, &triple, &f, &more);
        let l_all = lambda_statistic(&s, &triple, &f, &all);
        assert!(l_some <= l_more + 1e-12 && l_more <= l_all + 1e-12);
        // after relaxation the full-set statistic concentrates near
        // 2 lambda <pi, phi^2>.
        let mut s2 = s;
        let out = run_field(&mut s2, &f, 3.0, &[], false);
        out.unwrap();
        let l = lambda_statistic(&s2, &triple, &f, &all);
        let want = 2.0 * triple.lambda * triple.pi_phi_sq();
        assert!((l - want).abs() < 0.2 * want, "{l} vs {want}");
    }

    #[test]
    fn coincident_positions_merge_in_empirical_measure() {
        let f = CoefficientField::toy();
        let s = init_system(
            &f,
            4,
            &InitPositions::Explicit(vec![vec![0.3]; 4]),
            InitColours::Labels,
            1e-3,
            0,
        )
        .unwrap();
        let m = empirical_measure(&s);
        assert_eq!(m.atoms().len(), 1);
        assert!((m.atoms()[0].1 - 1.0).abs() < 1e-12);
        // colours are genealogical: four distinct atoms despite one position.
        assert_eq!(colour_empirical(&s).atoms().len(), 4);
    }

    #[test]
    fn paths_are_recorded_on_the_grid() {
        let (f, mut s) = toy_state(10, 77);
        let out = run_field(&mut s, &f, 0.5, &[0.0, 0.25, 0.5], true).unwrap();
        let p = out.paths.unwrap();
        assert_eq!(p.n_steps(), 501);
        assert_eq!(p.point(500, 3), s.position(3));
        assert_eq!(out.snapshots.len(), 3);
        assert!((out.snapshots[1].time - 0.25).abs() < 1e-9);
    }

    #[test]
    fn determinism_across_identical_runs() {
        let (f, mut a) = toy_state(40, 123);
        let (_, mut b) = toy_state(40, 123);
        let oa = run_field(&mut a, &f, 1.0, &[], false).unwrap();
        let ob = run_field(&mut b, &f, 1.0, &[], false).unwrap();
        assert_eq!(oa.log, ob.log);
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.colours, b.colours);
    }
}
