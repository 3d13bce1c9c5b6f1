//! Free-parameter layouts and priors for the covariance parameters.
//!
//! Samplers and optimizers work on an unconstrained vector: positive
//! quantities (diagonal of `A`, decay rates, nuggets, `tau2`, scales) enter
//! on the log scale, off-diagonal entries of `A` as they are.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovParams, Decay, FilterCovParams, ModelKind, StationaryCovParams};
use crate::error::{Error, Result};

/// Prior scales. Regression coefficients and mean shifts get independent
/// zero-mean normals; the diagonal of `A`, decay rates and other positive
/// parameters get half-Cauchy priors; cut points are flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    pub beta_sd: f64,
    pub delta_sd: f64,
    pub a_offdiag_sd: f64,
    pub halfcauchy_scale: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            beta_sd: 1.0,
            delta_sd: 1.0,
            a_offdiag_sd: 10.0,
            halfcauchy_scale: 1.0,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_sd", self.beta_sd),
            ("delta_sd", self.delta_sd),
            ("a_offdiag_sd", self.a_offdiag_sd),
            ("halfcauchy_scale", self.halfcauchy_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prior scale {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn half_cauchy_log_density(x: f64, scale: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    (2.0 / (PI * scale)).ln() - (x / scale).powi(2).ln_1p()
}

pub fn normal_log_density(x: f64, sd: f64) -> f64 {
    -0.5 * (2.0 * PI * sd * sd).ln() - 0.5 * (x / sd).powi(2)
}

/// Which covariance parameters are free, and in what order they are packed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub kind: ModelKind,
    pub q: usize,
    /// Decay rates that are estimated; the others stay at their template value.
    pub phi_free: Vec<bool>,
    /// Estimate the nuggets (filter) or the overall scale (stationary). Off in
    /// the identified ordinal model, on in the approximate Gaussian model.
    pub variance_free: bool,
}

impl ThetaLayout {
    /// Layout of the ordinal filtering model: every finite decay rate is free.
    pub fn for_params(theta: &CovParams, variance_free: bool) -> Self {
        match theta {
            CovParams::Filter(p) => Self {
                kind: ModelKind::Filter,
                q: p.q(),
                phi_free: p.phi().iter().map(|d| d.is_finite()).collect(),
                variance_free,
            },
            CovParams::Stationary(_) => Self {
                kind: ModelKind::Stationary,
                q: 1,
                phi_free: vec![true],
                variance_free,
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ModelKind::Filter => {
                self.q * (self.q + 1) / 2
                    + self.phi_free.iter().filter(|&&f| f).count()
                    + if self.variance_free { self.q } else { 0 }
            }
            ModelKind::Stationary => 2 + usize::from(self.variance_free),
        }
    }

    /// Names of the free coordinates, one-based like the file formats.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match self.kind {
            ModelKind::Filter => {
                for i in 0..self.q {
                    for j in 0..=i {
                        if i == j {
                            names.push(format!("log_A[{},{}]", i + 1, j + 1));
                        } else {
                            names.push(format!("A[{},{}]", i + 1, j + 1));
                        }
                    }
                }
                for (k, &f) in self.phi_free.iter().enumerate() {
                    if f {
                        names.push(format!("log_phi[{}]", k + 1));
                    }
                }
                if self.variance_free {
                    for k in 0..self.q {
                        names.push(format!("log_sigma2[{}]", k + 1));
                    }
                }
            }
            ModelKind::Stationary => {
                names.push("log_phi".into());
                names.push("log_tau2".into());
                if self.variance_free {
                    names.push("log_scale".into());
                }
            }
        }
        names
    }

    /// Mask of coordinates that are on the log scale.
    pub fn log_scaled(&self) -> Vec<bool> {
        self.names().iter().map(|n| n.starts_with("log_")).collect()
    }

    pub fn pack(&self, theta: &CovParams) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.dim());
        match theta {
            CovParams::Filter(p) => {
                for i in 0..self.q {
                    for j in 0..=i {
                        let v = p.a()[(i, j)];
                        u.push(if i == j { v.ln() } else { v });
                    }
                }
                for (k, &f) in self.phi_free.iter().enumerate() {
                    if f {
                        u.push(p.phi()[k].as_f64().ln());
                    }
                }
                if self.variance_free {
                    u.extend(p.sigma2().iter().map(|s| s.ln()));
                }
            }
            CovParams::Stationary(p) => {
                u.push(p.phi.ln());
                u.push(p.tau2.ln());
                if self.variance_free {
                    u.push(p.scale.ln());
                }
            }
        }
        u
    }

    /// Rebuild parameters from a free vector; fixed values come from `template`.
    pub fn unpack(&self, u: &[f64], template: &CovParams) -> Result<CovParams> {
        if u.len() != self.dim() {
            return Err(Error::Argument(format!("expected {} free parameters, got {}", self.dim(), u.len())));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite free parameter".into()));
        }
        let mut it = u.iter().copied();
        match template {
            CovParams::Filter(t) => {
                let q = self.q;
                let mut a = DMatrix::zeros(q, q);
                for i in 0..q {
                    for j in 0..=i {
                        let v = it.next().unwrap();
                        a[(i, j)] = if i == j { v.exp() } else { v };
                    }
                }
                let phi = (0..q)
                    .map(|k| {
                        if self.phi_free[k] {
                            Decay::Finite(it.next().unwrap().exp())
                        } else {
                            t.phi()[k]
                        }
                    })
                    .collect();
                let sigma2 = if self.variance_free {
                    (0..q).map(|_| it.next().unwrap().exp()).collect()
                } else {
                    t.sigma2().to_vec()
                };
                Ok(CovParams::Filter(FilterCovParams::new(a, phi, sigma2)?))
            }
            CovParams::Stationary(t) => {
                let phi = it.next().unwrap().exp();
                let tau2 = it.next().unwrap().exp();
                let scale = if self.variance_free { it.next().unwrap().exp() } else { t.scale };
                Ok(CovParams::Stationary(StationaryCovParams::with_scale(phi, tau2, scale)?))
            }
        }
    }

    /// Log Jacobian of the map from free vector to parameters.
    pub fn log_jacobian(&self, u: &[f64]) -> f64 {
        u.iter().zip(self.log_scaled()).filter(|(_, l)| *l).map(|(v, _)| *v).sum()
    }

    /// Log prior density of the free parameters in their natural scale
    /// (fixed parameters contribute nothing).
    pub fn log_prior(&self, theta: &CovParams, priors: &Priors) -> f64 {
        let hc = |x: f64| half_cauchy_log_density(x, priors.halfcauchy_scale);
        match theta {
            CovParams::Filter(p) => {
                let mut lp = 0.0;
                for i in 0..p.q() {
                    for j in 0..=i {
                        let v = p.a()[(i, j)];
                        lp += if i == j { hc(v) } else { normal_log_density(v, priors.a_offdiag_sd) };
                    }
                }
                for (k, d) in p.phi().iter().enumerate() {
                    if self.phi_free.get(k).copied().unwrap_or(false) {
                        lp += hc(d.as_f64());
                    }
                }
                if self.variance_free {
                    lp += p.sigma2().iter().map(|&s| hc(s)).sum::<f64>();
                }
                lp
            }
            CovParams::Stationary(p) => {
                let mut lp = hc(p.phi) + hc(p.tau2);
                if self.variance_free {
                    lp += hc(p.scale);
                }
                lp
            }
        }
    }
}

/// Log prior of the covariance parameters of the ordinal model (nuggets fixed).
/// Parameters outside the support get `-inf`.
pub fn log_prior(theta: &CovParams, priors: &Priors) -> f64 {
    let support_ok = match theta {
        CovParams::Filter(p) => p.validate().is_ok(),
        CovParams::Stationary(p) => p.validate().is_ok(),
    };
    if !support_ok {
        return f64::NEG_INFINITY;
    }
    ThetaLayout::for_params(theta, false).log_prior(theta, priors)
}
