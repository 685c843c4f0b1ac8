//! Coefficient fields: named analytic drift/diffusion/killing coefficients on
//! an axis-aligned box, with a declared global bound on the killing rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named drift coefficient b(x) in R^d.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum DriftSpec {
    /// b == 0.
    Zero,
    /// Constant vector, one entry per coordinate.
    Constant(Vec<f64>),
    /// Linear restoring drift b_k(x) = -a_k (x_k - c_k), params [a..., c...].
    Restoring(Vec<f64>),
}

/// Named diffusion coefficient sigma(x); built-ins are position-independent
/// and diagonal, so the d x m matrix reduces to per-coordinate scales.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum SigmaSpec {
    /// sigma = s * Identity.
    ConstantScalar(f64),
    /// Diagonal matrix with the given entries.
    Diagonal(Vec<f64>),
}

/// Named killing rate kappa(x) >= 0 together with the declared global bound.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub struct KappaSpec {
    #[serde(flatten)]
    pub form: KappaForm,
    pub kappa_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum KappaForm {
    /// kappa == c.
    Constant(f64),
    /// kappa(x) = a + b * x_1, params [a, b].
    Linear(Vec<f64>),
    /// kappa(x) = 2 - pi^2 cos(pi x_1) / (4 + 2 cos(pi x_1)).
    ToyCosine,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Drift, diffusion and killing coefficients on a box domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CoefficientField {
    pub dim: usize,
    #[serde(rename = "box")]
    pub bounds: BoxBounds,
    pub drift: DriftSpec,
    pub sigma: SigmaSpec,
    pub kappa: KappaSpec,
}

impl CoefficientField {
    /// The worked 1D example: reflected Brownian motion on [0,1] with
    /// kappa(x) = 2 - pi^2 cos(pi x) / (4 + 2 cos(pi x)).
    pub fn toy() -> Self {
        CoefficientField {
            dim: 1,
            bounds: BoxBounds {
                lo: vec![0.0],
                hi: vec![1.0],
            },
            drift: DriftSpec::Zero,
            sigma: SigmaSpec::ConstantScalar(1.0),
            kappa: KappaSpec {
                form: KappaForm::ToyCosine,
                // max over [0,1] is attained at x = 1: 2 + pi^2 / 2.
                kappa_max: 2.0 + std::f64::consts::PI.powi(2) / 2.0 + 1e-9,
            },
        }
    }

    /// 1D field on [lo, hi] with constant coefficients.
    pub fn constant_1d(lo: f64, hi: f64, b: f64, sigma: f64, kappa: f64) -> Self {
        CoefficientField {
            dim: 1,
            bounds: BoxBounds {
                lo: vec![lo],
                hi: vec![hi],
            },
            drift: if b == 0.0 {
                DriftSpec::Zero
            } else {
                DriftSpec::Constant(vec![b])
            },
            sigma: SigmaSpec::ConstantScalar(sigma),
            kappa: KappaSpec {
                form: KappaForm::Constant(kappa),
                kappa_max: kappa,
            },
        }
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            DriftSpec::Zero => out.fill(0.0),
            DriftSpec::Constant(c) => out.copy_from_slice(c),
            DriftSpec::Restoring(p) => {
                let d = self.dim;
                for k in 0..d {
                    out[k] = -p[k] * (x[k] - p[d + k]);
                }
            }
        }
    }

    /// Diagonal entry sigma_kk(x). Built-ins are position-independent.
    pub fn sigma_diag(&self, _x: &[f64], k: usize) -> f64 {
        match &self.sigma {
            SigmaSpec::ConstantScalar(s) => *s,
            SigmaSpec::Diagonal(d) => d[k],
        }
    }

    pub fn kappa(&self, x: &[f64]) -> f64 {
        match &self.kappa.form {
            KappaForm::Constant(c) => *c,
            KappaForm::Linear(p) => p[0] + p[1] * x[0],
            KappaForm::ToyCosine => {
                let c = (std::f64::consts::PI * x[0]).cos();
                2.0 - std::f64::consts::PI.powi(2) * c / (4.0 + 2.0 * c)
            }
        }
    }

    pub fn kappa_max(&self) -> f64 {
        self.kappa.kappa_max
    }

    /// Check structural invariants and the declared coefficient bounds on a
    /// sample grid over the box.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidField("dimension must be positive".into()));
        }
        if self.bounds.lo.len() != self.dim || self.bounds.hi.len() != self.dim {
            return Err(Error::InvalidField("box bounds do not match dimension".into()));
        }
        for k in 0..self.dim {
            let (lo, hi) = (self.bounds.lo[k], self.bounds.hi[k]);
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::InvalidField(format!(
                    "need finite lo < hi in coordinate {k}, got [{lo}, {hi}]"
                )));
            }
        }
        match &self.drift {
            DriftSpec::Constant(c) if c.len() != self.dim => {
                return Err(Error::InvalidField("drift params do not match dimension".into()))
            }
            DriftSpec::Restoring(p) if p.len() != 2 * self.dim => {
                return Err(Error::InvalidField("restoring drift needs 2d params".into()))
            }
            _ => {}
        }
        if let SigmaSpec::Diagonal(d) = &self.sigma {
            if d.len() != self.dim {
                return Err(Error::InvalidField("sigma params do not match dimension".into()));
            }
        }
        if let KappaForm::Linear(p) = &self.kappa.form {
            if p.len() != 2 {
                return Err(Error::InvalidField("linear kappa needs 2 params".into()));
            }
        }
        if !self.kappa.kappa_max.is_finite() || self.kappa.kappa_max < 0.0 {
            return Err(Error::InvalidField("kappa_max must be finite and >= 0".into()));
        }
        // sigma sigma^T positive definite (diagonal built-ins: entries nonzero)
        // and 0 <= kappa <= kappa_max, checked at sample grid points.
        let samples = 257usize;
        let mut x = vec![0.0; self.dim];
        for k in 0..self.dim {
            if self.sigma_diag(&x, k) == 0.0 {
                return Err(Error::InvalidField(format!(
                    "sigma sigma^T degenerate in coordinate {k}"
                )));
            }
        }
        for i in 0..samples {
            let u = i as f64 / (samples - 1) as f64;
            for k in 0..self.dim {
                x[k] = self.bounds.lo[k] + u * (self.bounds.hi[k] - self.bounds.lo[k]);
            }
            let kap = self.kappa(&x);
            if !kap.is_finite() || kap < 0.0 {
                return Err(Error::InvalidField(format!("kappa({x:?}) = {kap} is invalid")));
            }
            if kap > self.kappa.kappa_max + 1e-12 {
                return Err(Error::KappaBoundViolated {
                    observed: kap,
                    bound: self.kappa.kappa_max,
                });
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CoefficientField = serde_json::from_str(s)?;
        f.validate()?;
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("field serialization")
    }
}
