//! Normally reflected diffusion on a box with position-dependent soft killing.
//!
//! One Euler-Maruyama step is folded back into the box coordinatewise;
//! killing is implemented by exact thinning against the declared bound
//! `kappa_max`, with the rate frozen at the most recent grid position.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::rng::{substream, StreamKind};

/// Fold `y` into `[lo, hi]` by repeated reflection at both endpoints.
pub fn fold(y: f64, lo: f64, hi: f64) -> f64 {
    let l = hi - lo;
    let mut z = (y - lo).rem_euclid(2.0 * l);
    if z > l {
        z = 2.0 * l - z;
    }
    lo + z
}

/// Reusable Euler-Maruyama stepper (holds the drift scratch buffer so the
/// hot loop allocates nothing).
#[derive(Debug, Clone)]
pub struct Stepper {
    drift: Vec<f64>,
}

impl Stepper {
    pub fn new(dim: usize) -> Self {
        Stepper {
            drift: vec![0.0; dim],
        }
    }

    /// Advance `x` by one reflected step of length `dt`.
    pub fn step(
        &mut self,
        x: &mut [f64],
        dt: f64,
        field: &CoefficientField,
        rng: &mut impl Rng,
    ) -> Result<()> {
        field.drift_into(x, &mut self.drift);
        let sq = dt.sqrt();
        for k in 0..field.dim {
            let b = self.drift[k];
            let s = field.sigma_diag(x, k);
            if !b.is_finite() {
                return Err(Error::NumericDomain {
                    what: "drift",
                    coord: k,
                    x: x.to_vec(),
                });
            }
            if !s.is_finite() {
                return Err(Error::NumericDomain {
                    what: "sigma",
                    coord: k,
                    x: x.to_vec(),
                });
            }
            let xi: f64 = rng.sample(StandardNormal);
            let y = x[k] + b * dt + s * sq * xi;
            x[k] = fold(y, field.bounds.lo[k], field.bounds.hi[k]);
        }
        Ok(())
    }
}

/// One reflected Euler-Maruyama step, returning the new point.
pub fn reflect_step(
    x: &[f64],
    dt: f64,
    field: &CoefficientField,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let mut y = x.to_vec();
    Stepper::new(field.dim).step(&mut y, dt, field, rng)?;
    Ok(y)
}

/// Sample path of the killed reflected diffusion on a uniform time grid.
///
/// `positions` stores one point per grid time (flat, `dim` entries per
/// point). When a kill is accepted, `t_d` is its exact (off-grid) time and
/// the path value at `t_d` is the left limit, i.e. the last stored point.
#[derive(Debug, Clone, PartialEq)]
pub struct KilledPath {
    pub t_b: f64,
    pub dt: f64,
    pub dim: usize,
    pub positions: Vec<f64>,
    /// `None` means the path survived the horizon.
    pub t_d: Option<f64>,
}

impl KilledPath {
    pub fn n_points(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t_b + i as f64 * self.dt
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_point(&self) -> &[f64] {
        self.point(self.n_points() - 1)
    }

    pub fn survived(&self) -> bool {
        self.t_d.is_none()
    }
}

/// Simulate the killed reflected diffusion from `x0` at time `t0` up to
/// `horizon`. The step count is `round((horizon - t0) / dt)`, so the stored
/// step may differ from the requested `dt` by a rounding adjustment that
/// keeps the grid uniform and lands exactly on the horizon.
pub fn simulate_killed_path(
    x0: &[f64],
    t0: f64,
    horizon: f64,
    dt: f64,
    field: &CoefficientField,
    rng: &mut impl Rng,
) -> Result<KilledPath> {
    if x0.len() != field.dim {
        return Err(Error::InvalidConfig(format!(
            "start point has dimension {}, field has {}",
            x0.len(),
            field.dim
        )));
    }
    let span = horizon - t0;
    if !(dt > 0.0) || dt > span * (1.0 + 1e-9) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < dt <= horizon - t0, got dt = {dt}, span = {span}"
        )));
    }
    for k in 0..field.dim {
        if x0[k] < field.bounds.lo[k] || x0[k] > field.bounds.hi[k] {
            return Err(Error::InvalidConfig(format!(
                "start point {x0:?} outside the box in coordinate {k}"
            )));
        }
    }
    let steps = ((span / dt).round() as usize).max(1);
    let dt_eff = span / steps as f64;
    let kmax = field.kappa_max();

    let mut positions = Vec::with_capacity((steps + 1) * field.dim);
    positions.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut stepper = Stepper::new(field.dim);

    // Candidate kill times form a Poisson stream of rate kappa_max.
    let mut next_candidate = if kmax > 0.0 {
        t0 + rand_distr::Exp::new(kmax).unwrap().sample(rng)
    } else {
        f64::INFINITY
    };

    for i in 0..steps {
        let t_hi = t0 + (i + 1) as f64 * dt_eff;
        // Candidates in this interval see the position at its left endpoint.
        while next_candidate <= t_hi {
            let kap = field.kappa(&x);
            if kap > kmax * (1.0 + 1e-12) + 1e-300 {
                return Err(Error::KappaBoundViolated {
                    observed: kap,
                    bound: kmax,
                });
            }
            if rng.gen::<f64>() * kmax < kap {
                return Ok(KilledPath {
                    t_b: t0,
                    dt: dt_eff,
                    dim: field.dim,
                    positions,
                    t_d: Some(next_candidate),
                });
            }
            next_candidate += rand_distr::Exp::new(kmax).unwrap().sample(rng);
        }
        stepper.step(&mut x, dt_eff, field, rng)?;
        positions.extend_from_slice(&x);
    }

    Ok(KilledPath {
        t_b: t0,
        dt: dt_eff,
        dim: field.dim,
        positions,
        t_d: None,
    })
}

/// Monte Carlo estimate of the survival probability P_x(tau > t).
pub fn feynman_kac_survival(
    x: &[f64],
    t: f64,
    replicates: usize,
    dt: f64,
    field: &CoefficientField,
    seed: u64,
) -> Result<f64> {
    if replicates == 0 {
        return Err(Error::InvalidConfig("need at least one replicate".into()));
    }
    let mut alive = 0usize;
    for r in 0..replicates {
        let mut rng = substream(seed, StreamKind::Replicate, r as u64);
        let path = simulate_killed_path(x, 0.0, t, dt, field, &mut rng)?;
        if path.survived() {
            alive += 1;
        }
    }
    Ok(alive as f64 / replicates as f64)
}

use rand_distr::Distribution;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{DriftSpec, SigmaSpec};

    fn rng(ix: u64) -> rand_chacha::ChaCha8Rng {
        substream(0xD15EA5E, StreamKind::Aux, ix)
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let mut f = CoefficientField::constant_1d(0.0, 1.0, 0.0, 1.0, 0.0);
        f.sigma = SigmaSpec::ConstantScalar(0.0);
        let y = reflect_step(&[0.37], 0.01, &f, &mut rng(0)).unwrap();
        assert_eq!(y, vec![0.37]);
    }

    #[test]
    fn fold_reflects_at_lower_endpoint() {
        // Deterministic increment -0.10 realised through a pure drift step.
        let mut f = CoefficientField::constant_1d(0.0, 1.0, -0.10, 1.0, 0.0);
        f.sigma = SigmaSpec::ConstantScalar(0.0);
        let y = reflect_step(&[0.05], 1.0, &f, &mut rng(1)).unwrap();
        assert!((y[0] - 0.05).abs() < 1e-15);
        assert!((fold(-0.05, 0.0, 1.0) - 0.05).abs() < 1e-15);
        assert!((fold(1.30, 0.0, 1.0) - 0.70).abs() < 1e-15);
        assert!((fold(-2.05, 0.0, 1.0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn positions_never_leave_the_box() {
        let f = CoefficientField {
            drift: DriftSpec::Constant(vec![5.0]),
            ..CoefficientField::constant_1d(-1.0, 2.0, 0.0, 3.0, 0.0)
        };
        let mut r = rng(2);
        let mut x = vec![0.0];
        let mut st = Stepper::new(1);
        for _ in 0..20_000 {
            st.step(&mut x, 0.01, &f, &mut r).unwrap();
            assert!((-1.0..=2.0).contains(&x[0]), "left the box: {}", x[0]);
        }
    }

    #[test]
    fn reflected_brownian_occupation_is_uniform() {
        // Chi-square on the occupation histogram of iterated steps.
        let f = CoefficientField::constant_1d(0.0, 1.0, 0.0, 1.0, 0.0);
        let mut r = rng(3);
        let mut x = vec![0.5];
        let mut st = Stepper::new(1);
        let bins = 20usize;
        let mut counts = vec![0u64; bins];
        let n = 1_000_000usize;
        for _ in 0..n {
            st.step(&mut x, 0.05, &f, &mut r).unwrap();
            let b = ((x[0] * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let expect = n as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        // dt = 0.05 mixes in O(1) time; effective sample size ~ n * dt.
        // 99.9% point of chi2(19) is 43.8; allow serial correlation slack.
        assert!(chi2 / (1.0 / 0.05) < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn zero_killing_always_survives() {
        let f = CoefficientField::constant_1d(0.0, 1.0, 0.0, 1.0, 0.0);
        for i in 0..100 {
            let p = simulate_killed_path(&[0.3], 0.0, 2.0, 1e-2, &f, &mut rng(10 + i)).unwrap();
            assert!(p.survived());
            assert_eq!(p.n_points(), 201);
        }
    }

    #[test]
    fn constant_rate_death_times_are_exponential() {
        // Kolmogorov-Smirnov against Exp(c) over 10^4 runs.
        let c = 2.0;
        let f = CoefficientField::constant_1d(0.0, 1.0, 0.0, 1.0, c);
        let runs = 10_000usize;
        let mut times: Vec<f64> = (0..runs)
            .map(|i| {
                simulate_killed_path(&[0.5], 0.0, 12.0, 1e-2, &f, &mut rng(1000 + i as u64))
                    .unwrap()
                    .t_d
                    .expect("survival prob e^{-24} is negligible")
            })
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d: f64 = 0.0;
        for (i, t) in times.iter().enumerate() {
            let cdf = 1.0 - (-c * t).exp();
            d = d
                .max((cdf - i as f64 / runs as f64).abs())
                .max((cdf - (i + 1) as f64 / runs as f64).abs());
        }
        // K-S 1% critical value 1.63/sqrt(n) = 0.0163.
        assert!(d < 0.0163, "K-S statistic {d}");
    }

    #[test]
    fn declared_bound_violation_detected_mid_run() {
        let mut f = CoefficientField::constant_1d(0.0, 1.0, 0.0, 1.0, 3.0);
        f.kappa.kappa_max = 1.0; // lie about the bound
        let err = simulate_killed_path(&[0.5], 0.0, 5.0, 1e-2, &f, &mut rng(4));
        assert!(matches!(err, Err(Error::KappaBoundViolated { .. })));
    }

    #[test]
    fn identical_seed_gives_bitwise_identical_path() {
        let f = CoefficientField::toy();
        let a = simulate_killed_path(&[0.2], 0.0, 3.0, 1e-3, &f, &mut rng(5)).unwrap();
        let b = simulate_killed_path(&[0.2], 0.0, 3.0, 1e-3, &f, &mut rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn survival_estimate_zero_and_constant_killing() {
        let f0 = CoefficientField::constant_1d(0.0, 1.0, 0.0, 1.0, 0.0);
        assert_eq!(
            feynman_kac_survival(&[0.5], 1.0, 200, 1e-2, &f0, 7).unwrap(),
            1.0
        );
        let c = 1.5;
        let fc = CoefficientField::constant_1d(0.0, 1.0, 0.0, 1.0, c);
        let reps = 20_000usize;
        let est = feynman_kac_survival(&[0.5], 1.0, reps, 1e-2, &fc, 8).unwrap();
        let p = (-c * 1.0f64).exp();
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        assert!((est - p).abs() < 3.0 * se, "est {est}, want {p} +- {}", 3.0 * se);
    }
}
