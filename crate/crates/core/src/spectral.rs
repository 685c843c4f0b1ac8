//! Principal eigentriple (pi, lambda, phi) of L = (1/2) sigma^2 d^2/dx^2
//! + b d/dx - kappa on a 1D interval with Neumann boundary conditions.
//!
//! The operator is discretized with second-order central differences and
//! mirror ghost nodes; the principal (largest) eigenvalue and its right/left
//! eigenvectors are found by shifted inverse iteration with Rayleigh
//! refinement, which is O(n) per sweep on the tridiagonal matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::CoefficientField;

/// Tridiagonal matrix stored by diagonals: `sub[i]` couples row i+1 to
/// column i, `sup[i]` couples row i to column i+1.
#[derive(Debug, Clone)]
pub struct Tridiag {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiag {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn transpose(&self) -> Tridiag {
        Tridiag {
            sub: self.sup.clone(),
            diag: self.diag.clone(),
            sup: self.sub.clone(),
        }
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n();
        for i in 0..n {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.sub[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                s += self.sup[i] * v[i + 1];
            }
            out[i] = s;
        }
    }

    /// Solve (A - shift I) x = b by the Thomas algorithm. Near-singular
    /// pivots are nudged, which is exactly what inverse iteration wants.
    pub fn solve_shifted(&self, shift: f64, b: &[f64], x: &mut [f64]) {
        let n = self.n();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let tiny = 1e-300;
        let mut denom = self.diag[0] - shift;
        if denom.abs() < tiny {
            denom = tiny;
        }
        c[0] = self.sup.first().copied().unwrap_or(0.0) / denom;
        d[0] = b[0] / denom;
        for i in 1..n {
            let mut m = (self.diag[i] - shift) - self.sub[i - 1] * c[i - 1];
            if m.abs() < tiny {
                m = tiny;
            }
            if i + 1 < n {
                c[i] = self.sup[i] / m;
            }
            d[i] = (b[i] - self.sub[i - 1] * d[i - 1]) / m;
        }
        x[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = d[i] - c[i] * x[i + 1];
        }
    }
}

/// Discretize L on n+1 uniform points of the field's 1D box.
pub fn discretize(field: &CoefficientField, n: usize) -> Result<(Vec<f64>, Tridiag)> {
    if field.dim != 1 {
        return Err(Error::InvalidConfig("eigensolver requires a 1D field".into()));
    }
    if n < 16 {
        return Err(Error::InvalidConfig(format!("grid size {n} < 16")));
    }
    if n % 2 != 0 {
        return Err(Error::InvalidConfig(
            "grid size must be even (Simpson quadrature)".into(),
        ));
    }
    let (lo, hi) = (field.bounds.lo[0], field.bounds.hi[0]);
    let h = (hi - lo) / n as f64;
    let grid: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
    let m = n + 1;
    let mut a = Tridiag {
        sub: vec![0.0; m - 1],
        diag: vec![0.0; m],
        sup: vec![0.0; m - 1],
    };
    let mut bdrift = [0.0];
    for i in 0..m {
        let x = [grid[i]];
        let s2 = field.sigma_diag(&x, 0).powi(2);
        field.drift_into(&x, &mut bdrift);
        let b = bdrift[0];
        let kap = field.kappa(&x);
        let diff = 0.5 * s2 / (h * h);
        let adv = b / (2.0 * h);
        a.diag[i] = -2.0 * diff - kap;
        if i == 0 {
            // mirror ghost: phi_{-1} = phi_1, so the sub coupling folds onto
            // the super diagonal and the advection term cancels.
            a.sup[0] = 2.0 * diff;
        } else if i == m - 1 {
            a.sub[m - 2] = 2.0 * diff;
        } else {
            a.sub[i - 1] = diff - adv;
            a.sup[i] = diff + adv;
        }
    }
    Ok((grid, a))
}

/// Principal eigentriple on a uniform grid.
///
/// `pi_weights` is the normalized left principal eigenvector; the discrete
/// adjoint already carries the quadrature weights of the grid, so these sum
/// to one and integrate grid functions directly. `phi_values` is the right
/// eigenvector scaled so that `<pi, phi> = 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenTriple {
    pub grid: Vec<f64>,
    pub pi_weights: Vec<f64>,
    pub lambda: f64,
    pub phi_values: Vec<f64>,
}

impl EigenTriple {
    pub fn h(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// Integral of a grid function against pi.
    pub fn pi_dot(&self, f: &[f64]) -> f64 {
        self.pi_weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    pub fn pi_phi_sq(&self) -> f64 {
        self.pi_weights
            .iter()
            .zip(&self.phi_values)
            .map(|(w, p)| w * p * p)
            .sum()
    }

    /// Evaluate phi at an arbitrary point by linear interpolation.
    pub fn phi_at(&self, x: f64) -> f64 {
        let h = self.h();
        let lo = self.grid[0];
        let n = self.grid.len() - 1;
        let u = ((x - lo) / h).clamp(0.0, n as f64);
        let i = (u as usize).min(n - 1);
        let w = u - i as f64;
        self.phi_values[i] * (1.0 - w) + self.phi_values[i + 1] * w
    }

    /// Density of pi with respect to Lebesgue measure at grid point i
    /// (trapezoid end cells have half width).
    pub fn pi_density(&self, i: usize) -> f64 {
        let h = self.h();
        let n = self.grid.len() - 1;
        let cell = if i == 0 || i == n { 0.5 * h } else { h };
        self.pi_weights[i] / cell
    }
}

fn normalize_inf(v: &mut [f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if m > 0.0 {
        for x in v.iter_mut() {
            *x /= m;
        }
    }
    m
}

/// Inverse iteration for the eigenvalue of `a` nearest `shift`, with
/// Rayleigh-quotient refinement once the iterate settles.
fn principal_pair(a: &Tridiag, mut shift: f64) -> Result<(f64, Vec<f64>)> {
    let n = a.n();
    let mut v = vec![1.0; n];
    let mut w = vec![0.0; n];
    let mut av = vec![0.0; n];
    let mut mu = shift;
    let scale = a.diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    for it in 0..200 {
        a.solve_shifted(shift, &v, &mut w);
        normalize_inf(&mut w);
        a.apply(&w, &mut av);
        let num: f64 = w.iter().zip(&av).map(|(x, y)| x * y).sum();
        let den: f64 = w.iter().map(|x| x * x).sum();
        mu = num / den;
        let res = w
            .iter()
            .zip(&av)
            .map(|(x, y)| (y - mu * x).abs())
            .fold(0.0f64, f64::max);
        v.copy_from_slice(&w);
        if res < 1e-13 * scale.max(1.0) {
            return Ok((mu, v));
        }
        if it >= 3 && res < 1e-4 * scale.max(1.0) {
            shift = mu;
        }
    }
    // Accept if the residual is still small, else report failure.
    a.apply(&v, &mut av);
    let res = v
        .iter()
        .zip(&av)
        .map(|(x, y)| (y - mu * x).abs())
        .fold(0.0f64, f64::max);
    if res < 1e-9 * scale.max(1.0) {
        Ok((mu, v))
    } else {
        Err(Error::SolverFailure(format!(
            "inverse iteration stalled, residual {res:.3e}"
        )))
    }
}

fn sign_fix_positive(v: &mut [f64], what: &str) -> Result<()> {
    let s: f64 = v.iter().sum();
    if s < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    if v.iter().any(|&x| x <= 0.0) {
        return Err(Error::SolverFailure(format!(
            "{what} eigenvector not strictly positive after sign fix"
        )));
    }
    Ok(())
}

/// Compute the principal eigentriple of the 1D field on an n+1 point grid.
pub fn principal_eigentriple(field: &CoefficientField, n: usize) -> Result<EigenTriple> {
    let (grid, a) = discretize(field, n)?;
    // All eigenvalues are <= -min kappa <= 0; any positive shift is closest
    // to the principal one.
    let shift = 1e-3;
    let (mu, mut phi) = principal_pair(&a, shift)?;
    sign_fix_positive(&mut phi, "right")?;
    let (mu_l, mut ell) = principal_pair(&a.transpose(), mu + 1e-10)?;
    if (mu_l - mu).abs() > 1e-6 * (1.0 + mu.abs()) {
        return Err(Error::SolverFailure(format!(
            "left/right eigenvalues disagree: {mu_l} vs {mu}"
        )));
    }
    sign_fix_positive(&mut ell, "left")?;
    let lambda = -mu;

    let total: f64 = ell.iter().sum();
    let pi_weights: Vec<f64> = ell.iter().map(|w| w / total).collect();
    let pi_phi: f64 = pi_weights.iter().zip(&phi).map(|(w, p)| w * p).sum();
    for p in phi.iter_mut() {
        *p /= pi_phi;
    }

    let triple = EigenTriple {
        grid,
        pi_weights,
        lambda,
        phi_values: phi,
    };
    debug_assert!((triple.pi_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    Ok(triple)
}

/// Carre du champ of phi: sigma(x)^2 (phi'(x))^2 with central differences;
/// the Neumann mirror makes the endpoint derivatives vanish.
pub fn carre_du_champ(triple: &EigenTriple, field: &CoefficientField) -> Vec<f64> {
    let n = triple.grid.len() - 1;
    let h = triple.h();
    let phi = &triple.phi_values;
    (0..=n)
        .map(|i| {
            let dphi = if i == 0 || i == n {
                0.0
            } else {
                (phi[i + 1] - phi[i - 1]) / (2.0 * h)
            };
            let s = field.sigma_diag(&[triple.grid[i]], 0);
            s * s * dphi * dphi
        })
        .collect()
}

/// Theta = 2 lambda <pi, phi^2> / <pi, phi>^2.
pub fn theta(triple: &EigenTriple) -> f64 {
    let pi_phi = triple.pi_dot(&triple.phi_values);
    2.0 * triple.lambda * triple.pi_phi_sq() / (pi_phi * pi_phi)
}

/// Variance effective population size N_eff = lambda N / Theta.
pub fn effective_population(triple: &EigenTriple, n_particles: usize) -> f64 {
    triple.lambda * n_particles as f64 / theta(triple)
}

/// Scalars derived from an eigentriple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivedScalars {
    pub theta: f64,
    pub n_eff_ratio: f64,
    pub gamma0_phi: Vec<f64>,
    pub pi_kappa: f64,
}

pub fn derived_scalars(triple: &EigenTriple, field: &CoefficientField) -> DerivedScalars {
    let th = theta(triple);
    let kap: Vec<f64> = triple.grid.iter().map(|&x| field.kappa(&[x])).collect();
    DerivedScalars {
        theta: th,
        n_eff_ratio: triple.lambda / th,
        gamma0_phi: carre_du_champ(triple, field),
        pi_kappa: triple.pi_dot(&kap),
    }
}

/// Composite Simpson quadrature of grid values with spacing h (even number
/// of intervals required).
pub fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len() - 1;
    assert!(n >= 2 && n % 2 == 0, "Simpson needs an even interval count");
    let mut s = values[0] + values[n];
    for (i, v) in values.iter().enumerate().take(n).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}
