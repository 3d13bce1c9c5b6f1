//! Approximate Gaussian model: the centered ratings are treated as Gaussian
//! with an unconstrained filtered covariance, the regression coefficients and
//! category shifts are integrated out, and the marginal posterior of the
//! covariance parameters is maximized.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovParams, Decay, FilterCovParams, ModelKind, StationaryCovParams};
use crate::dataset::{RatingsDataset, Site};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::mcmc::median_decay;
use crate::params::{Priors, ThetaLayout};
use crate::predict::{LatentSurface, PredictionGrid};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// How the optimizer obtains gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    /// Central differences on the transformed scale.
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Number of starts: the given init plus `restarts - 1` jittered copies.
    pub restarts: usize,
    /// Standard deviation of the jitter on the transformed scale.
    pub jitter_sd: f64,
    pub seed: u64,
    pub gradient: GradientMode,
    pub fd_step: f64,
    /// Integrate out the category shifts `delta_2..delta_Q`.
    pub include_mean_shifts: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-5,
            step_tol: 1e-8,
            restarts: 3,
            jitter_sd: 0.3,
            seed: 0,
            gradient: GradientMode::Analytic,
            fd_step: 1e-5,
            include_mean_shifts: true,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        for (name, v) in [("grad_tol", self.grad_tol), ("step_tol", self.step_tol), ("fd_step", self.fd_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.jitter_sd >= 0.0) {
            return Err(Error::Config("jitter_sd must be non-negative".into()));
        }
        Ok(())
    }
}

/// One optimizer start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub start: usize,
    pub log_posterior: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFitResult {
    pub model: ModelKind,
    pub theta_hat: CovParams,
    pub log_posterior: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Grand mean subtracted from the ratings before fitting.
    pub y_mean: f64,
    pub include_mean_shifts: bool,
    pub priors: Priors,
    pub starts: Vec<StartSummary>,
}

/// Ratings minus their grand mean, and the mean.
pub fn center_ratings(ds: &RatingsDataset) -> (DVector<f64>, f64) {
    let y = ds.y();
    let mean = y.mean();
    (y.add_scalar(-mean), mean)
}

/// Starting values for the approximate model: decays at the median spacing,
/// and the rating variance split evenly between spatial and nugget parts.
pub fn initial_map_theta(ds: &RatingsDataset, kind: ModelKind, independent_components: &[usize]) -> Result<CovParams> {
    let (y, _) = center_ratings(ds);
    let n = y.len() as f64;
    let var = if n > 1.0 { y.norm_squared() / (n - 1.0) } else { 1.0 };
    let var = if var > 0.0 { var } else { 1.0 };
    let phi0 = median_decay(ds);
    match kind {
        ModelKind::Filter => {
            let q = ds.q();
            let phi = (0..q)
                .map(|k| {
                    if independent_components.contains(&(k + 1)) {
                        Decay::Independent
                    } else {
                        Decay::Finite(phi0)
                    }
                })
                .collect();
            Ok(CovParams::Filter(FilterCovParams::new(
                DMatrix::identity(q, q) * (var / 2.0).sqrt(),
                phi,
                vec![var / 2.0; q],
            )?))
        }
        ModelKind::Stationary => Ok(CovParams::Stationary(StationaryCovParams::with_scale(phi0, 1.0, var)?)),
    }
}

/// The marginal log posterior of the approximate model as a function of the
/// free vector `u` (log scale for positive parameters).
pub struct MapObjective<'a> {
    y: DVector<f64>,
    cats: Vec<usize>,
    /// Rating-pair distances, lower triangle packed by rows.
    dist: Vec<f64>,
    fixed: DMatrix<f64>,
    layout: ThetaLayout,
    template: CovParams,
    priors: &'a Priors,
}

#[inline]
fn tri(i: usize) -> usize {
    i * (i + 1) / 2
}

/// `X Sigma_beta X' + M*_{2..Q} Sigma_delta M*_{2..Q}'`.
pub fn fixed_effects_cov(ds: &RatingsDataset, priors: &Priors, include_mean_shifts: bool) -> DMatrix<f64> {
    let x = ds.design();
    let mut k = (x * x.transpose()) * priors.beta_sd.powi(2);
    if include_mean_shifts {
        let v = priors.delta_sd.powi(2);
        for r in 0..ds.n() {
            for s in 0..ds.n() {
                let c = ds.rating_category(r);
                if c > 0 && c == ds.rating_category(s) {
                    k[(r, s)] += v;
                }
            }
        }
    }
    k
}

/// Log posterior pieces at one parameter value.
struct Evaluation {
    value: f64,
    grad: Option<Vec<f64>>,
}

impl<'a> MapObjective<'a> {
    pub fn new(ds: &RatingsDataset, y_centered: DVector<f64>, template: &CovParams, priors: &'a Priors, include_mean_shifts: bool) -> Result<Self> {
        if y_centered.len() != ds.n() {
            return Err(Error::Argument("response length does not match the dataset".into()));
        }
        if let CovParams::Filter(p) = template {
            if p.q() != ds.q() {
                return Err(Error::Argument("parameter and dataset category counts differ".into()));
            }
        }
        let n = ds.n();
        let sites = ds.sites();
        let mut dist = Vec::with_capacity(tri(n));
        for r in 0..n {
            let a = &sites[ds.rating_site(r)];
            for s in 0..=r {
                dist.push(a.distance(&sites[ds.rating_site(s)]));
            }
        }
        Ok(Self {
            y: y_centered,
            cats: (0..n).map(|r| ds.rating_category(r)).collect(),
            dist,
            fixed: fixed_effects_cov(ds, priors, include_mean_shifts),
            layout: ThetaLayout::for_params(template, true),
            template: template.clone(),
            priors,
        })
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    pub fn pack(&self, theta: &CovParams) -> Vec<f64> {
        self.layout.pack(theta)
    }

    pub fn unpack(&self, u: &[f64]) -> Result<CovParams> {
        self.layout.unpack(u, &self.template)
    }

    /// Marginal covariance `K(theta)` of the centered ratings.
    pub fn covariance(&self, theta: &CovParams) -> DMatrix<f64> {
        self.assemble(theta).0
    }

    /// Returns K and, for the filter model, the packed correlations per component.
    fn assemble(&self, theta: &CovParams) -> (DMatrix<f64>, Vec<Vec<f64>>) {
        let n = self.y.len();
        let mut k = self.fixed.clone();
        match theta {
            CovParams::Filter(p) => {
                let q = p.q();
                let a = p.a();
                let rho: Vec<Vec<f64>> = p.phi().iter().map(|phi| self.dist.iter().map(|&d| phi.corr(d)).collect()).collect();
                // Loadings products per category pair and component.
                let mut coef = vec![0.0; q * q * q];
                for c in 0..q {
                    for c2 in 0..q {
                        for j in 0..q {
                            coef[(c * q + c2) * q + j] = a[(c, j)] * a[(c2, j)];
                        }
                    }
                }
                let mut idx = 0;
                for r in 0..n {
                    let cr = self.cats[r];
                    for s in 0..=r {
                        let base = (cr * q + self.cats[s]) * q;
                        let mut v = 0.0;
                        for j in 0..q {
                            v += coef[base + j] * rho[j][idx];
                        }
                        k[(r, s)] += v;
                        if s != r {
                            k[(s, r)] += v;
                        }
                        idx += 1;
                    }
                    k[(r, r)] += p.sigma2()[cr];
                }
                (k, rho)
            }
            CovParams::Stationary(p) => {
                let amp = p.scale * (1.0 - p.kappa());
                let mut idx = 0;
                for r in 0..n {
                    for s in 0..=r {
                        let v = amp * (-p.phi * self.dist[idx]).exp();
                        k[(r, s)] += v;
                        if s != r {
                            k[(s, r)] += v;
                        }
                        idx += 1;
                    }
                    k[(r, r)] += p.nugget();
                }
                (k, Vec::new())
            }
        }
    }

    /// Log posterior at `theta`: Gaussian marginal log likelihood plus log
    /// prior. A covariance that cannot be factorized gives `-inf`.
    pub fn log_posterior(&self, theta: &CovParams) -> f64 {
        self.evaluate_theta(theta, false).value
    }

    /// Gaussian marginal log likelihood alone.
    pub fn log_likelihood(&self, theta: &CovParams) -> f64 {
        self.log_posterior(theta) - self.layout.log_prior(theta, self.priors)
    }

    fn evaluate_theta(&self, theta: &CovParams, with_grad: bool) -> Evaluation {
        let fail = Evaluation {
            value: f64::NEG_INFINITY,
            grad: None,
        };
        let (k, rho) = self.assemble(theta);
        let Some(factor) = Cholesky::new_exact(&k) else {
            log::warn!("marginal covariance is not positive definite; log posterior set to -inf");
            return fail;
        };
        let n = self.y.len() as f64;
        let alpha = factor.solve_vec(&self.y);
        let loglik = -0.5 * self.y.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n * LN_2PI;
        let value = loglik + self.layout.log_prior(theta, self.priors);
        if !value.is_finite() {
            return fail;
        }
        let grad = with_grad.then(|| self.gradient(theta, &factor, &alpha, &rho));
        Evaluation { value, grad }
    }

    fn gradient(&self, theta: &CovParams, factor: &Cholesky, alpha: &DVector<f64>, rho: &[Vec<f64>]) -> Vec<f64> {
        let n = self.y.len();
        let kinv = factor.inverse();
        // W = alpha alpha' - K^{-1}; d loglik = 1/2 tr(W dK).
        let w = |r: usize, s: usize| alpha[r] * alpha[s] - kinv[(r, s)];
        let hc = |x: f64| {
            let t = (x / self.priors.halfcauchy_scale).powi(2);
            -2.0 * t / (1.0 + t)
        };
        let mut g = Vec::with_capacity(self.layout.dim());
        match theta {
            CovParams::Filter(p) => {
                let q = p.q();
                let a = p.a();
                // B[j][c][c'] = sum W_rs rho_j, C[j][c][c'] = sum W_rs d rho_j / d log phi_j.
                let mut b = vec![0.0; q * q * q];
                let mut c = vec![0.0; q * q * q];
                let mut diag = vec![0.0; q];
                let mut idx = 0;
                for r in 0..n {
                    let cr = self.cats[r];
                    for s in 0..=r {
                        let cs = self.cats[s];
                        let wrs = w(r, s);
                        let d = self.dist[idx];
                        for j in 0..q {
                            let rj = rho[j][idx];
                            let dj = match p.phi()[j] {
                                Decay::Finite(phi) => -phi * d * rj,
                                Decay::Independent => 0.0,
                            };
                            let o1 = (j * q + cr) * q + cs;
                            b[o1] += wrs * rj;
                            c[o1] += wrs * dj;
                            if r != s {
                                let o2 = (j * q + cs) * q + cr;
                                b[o2] += wrs * rj;
                                c[o2] += wrs * dj;
                            }
                        }
                        idx += 1;
                    }
                    diag[cr] += w(r, r);
                }
                for i in 0..q {
                    for j in 0..=i {
                        let mut t = 0.0;
                        for c2 in 0..q {
                            t += a[(c2, j)] * b[(j * q + i) * q + c2];
                        }
                        // 1/2 * 2 * sum_c' a_{c'j} B_j[i][c']
                        let v = a[(i, j)];
                        if i == j {
                            g.push(t * v + hc(v));
                        } else {
                            g.push(t - v / self.priors.a_offdiag_sd.powi(2));
                        }
                    }
                }
                for (k, &free) in self.layout.phi_free.iter().enumerate() {
                    if free {
                        let mut t = 0.0;
                        for c1 in 0..q {
                            for c2 in 0..q {
                                t += a[(c1, k)] * a[(c2, k)] * c[(k * q + c1) * q + c2];
                            }
                        }
                        g.push(0.5 * t + hc(p.phi()[k].as_f64()));
                    }
                }
                for k in 0..q {
                    let s2 = p.sigma2()[k];
                    g.push(0.5 * s2 * diag[k] + hc(s2));
                }
            }
            CovParams::Stationary(p) => {
                let (mut s_rho, mut s_drho, mut s_tr) = (0.0, 0.0, 0.0);
                let mut idx = 0;
                for r in 0..n {
                    for s in 0..=r {
                        let wrs = w(r, s);
                        let d = self.dist[idx];
                        let rho = (-p.phi * d).exp();
                        let mult = if r == s { 1.0 } else { 2.0 };
                        s_rho += mult * wrs * rho;
                        s_drho += mult * wrs * (-p.phi * d * rho);
                        idx += 1;
                    }
                    s_tr += w(r, r);
                }
                let kappa = p.kappa();
                let v = p.scale;
                g.push(0.5 * v * (1.0 - kappa) * s_drho + hc(p.phi));
                g.push(-0.5 * kappa * (1.0 - kappa) * v * (s_tr - s_rho) + hc(p.tau2));
                g.push(0.5 * v * ((1.0 - kappa) * s_rho + kappa * s_tr) + hc(v));
            }
        }
        g
    }

    /// Log posterior as a function of the free vector.
    pub fn value(&self, u: &[f64]) -> f64 {
        match self.unpack(u) {
            Ok(theta) => self.log_posterior(&theta),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Analytic gradient of [`MapObjective::value`].
    pub fn analytic_gradient(&self, u: &[f64]) -> Option<(f64, Vec<f64>)> {
        let theta = self.unpack(u).ok()?;
        let ev = self.evaluate_theta(&theta, true);
        ev.grad.map(|g| (ev.value, g))
    }

    /// Central-difference gradient of [`MapObjective::value`].
    pub fn numeric_gradient(&self, u: &[f64], h: f64) -> Option<(f64, Vec<f64>)> {
        let f0 = self.value(u);
        if !f0.is_finite() {
            return None;
        }
        let mut g = Vec::with_capacity(u.len());
        let mut x = u.to_vec();
        for i in 0..u.len() {
            x[i] = u[i] + h;
            let fp = self.value(&x);
            x[i] = u[i] - h;
            let fm = self.value(&x);
            x[i] = u[i];
            if !(fp.is_finite() && fm.is_finite()) {
                return None;
            }
            g.push((fp - fm) / (2.0 * h));
        }
        Some((f0, g))
    }
}

/// The approximate marginal log posterior of `theta` given centered ratings.
pub fn marginal_loglik(y_centered: &DVector<f64>, ds: &RatingsDataset, theta: &CovParams, priors: &Priors) -> Result<f64> {
    let obj = MapObjective::new(ds, y_centered.clone(), theta, priors, true)?;
    Ok(obj.log_posterior(theta))
}

struct OptOutcome {
    u: Vec<f64>,
    value: f64,
    iterations: usize,
    evaluations: usize,
    grad_norm: f64,
    converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// BFGS on `-f` with an Armijo backtracking line search.
fn bfgs(obj: &MapObjective<'_>, u0: Vec<f64>, cfg: &MapConfig) -> Result<OptOutcome> {
    let eval = |u: &[f64]| match cfg.gradient {
        GradientMode::Analytic => obj.analytic_gradient(u),
        GradientMode::FiniteDifference => obj.numeric_gradient(u, cfg.fd_step),
    };
    let dim = u0.len();
    let (mut f, mut g) = eval(&u0).ok_or_else(|| Error::Numerical("objective is not finite at the starting point".into()))?;
    let mut evaluations = 1;
    let mut u = u0;
    // Work with the gradient of the minimized function -f.
    let mut gm: DVector<f64> = -DVector::from_vec(g.clone());
    let mut hinv = DMatrix::<f64>::identity(dim, dim);
    let mut first = true;
    let mut iterations = 0;
    let mut converged = norm(&g) < cfg.grad_tol;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let mut dir = -(&hinv * &gm);
        let mut slope = dir.dot(&gm);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(dim, dim);
            dir = -gm.clone();
            slope = dir.dot(&gm);
        }
        // Cap the first trial step to keep exp() arguments sane.
        let max_step = dir.amax();
        let mut t = if max_step > 2.0 { 2.0 / max_step } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = u.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            evaluations += 1;
            if let Some((ft, gt)) = eval(&trial) {
                if -ft <= -f + 1e-4 * t * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((un, fnew, gnew)) = accepted else {
            // No decrease along the search direction: at a numerical optimum.
            converged = norm(&g) < cfg.grad_tol.sqrt();
            break;
        };
        let s = DVector::from_iterator(dim, un.iter().zip(&u).map(|(a, b)| a - b));
        let gmn = -DVector::from_vec(gnew.clone());
        let yv = &gmn - &gm;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if first {
                hinv = DMatrix::identity(dim, dim) * (sy / yv.norm_squared());
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv += (&s * s.transpose()) * ((1.0 + rho * yhy) * rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        u = un;
        f = fnew;
        g = gnew;
        gm = gmn;
        if norm(&g) < cfg.grad_tol || s.norm() < cfg.step_tol {
            converged = true;
        }
    }
    Ok(OptOutcome {
        grad_norm: norm(&g),
        u,
        value: f,
        iterations,
        evaluations,
        converged,
    })
}

/// Maximize the approximate marginal posterior from `init` and jittered copies.
pub fn fit_map(ds: &RatingsDataset, init: &CovParams, priors: &Priors, cfg: &MapConfig) -> Result<MapFitResult> {
    cfg.validate()?;
    priors.validate()?;
    let (y, y_mean) = center_ratings(ds);
    let obj = MapObjective::new(ds, y, init, priors, cfg.include_mean_shifts)?;
    let u0 = obj.pack(init);
    let mut jitter = rng::stream(cfg.seed, "map/jitter");
    let starts: Vec<Vec<f64>> = (0..cfg.restarts)
        .map(|i| {
            if i == 0 {
                u0.clone()
            } else {
                u0.iter().map(|v| v + cfg.jitter_sd * jitter.sample::<f64, _>(StandardNormal)).collect()
            }
        })
        .collect();
    let outcomes: Vec<Result<OptOutcome>> = starts.into_par_iter().map(|u| bfgs(&obj, u, cfg)).collect();
    let mut summaries = Vec::new();
    let mut best: Option<OptOutcome> = None;
    let mut evaluations = 0;
    let mut first_err = None;
    for (i, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(o) => {
                evaluations += o.evaluations;
                summaries.push(StartSummary {
                    start: i,
                    log_posterior: o.value,
                    iterations: o.iterations,
                    grad_norm: o.grad_norm,
                    converged: o.converged,
                });
                if best.as_ref().is_none_or(|b| o.value > b.value) {
                    best = Some(o);
                }
            }
            Err(e) => {
                log::warn!("MAP start {i} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let best = match (best, first_err) {
        (Some(b), _) => b,
        (None, Some(e)) => return Err(e),
        (None, None) => unreachable!("at least one start"),
    };
    if !best.converged {
        log::warn!("MAP optimizer did not converge in {} iterations (gradient norm {:.3e})", best.iterations, best.grad_norm);
    }
    Ok(MapFitResult {
        model: init.kind(),
        theta_hat: obj.unpack(&best.u)?,
        log_posterior: best.value,
        iterations: best.iterations,
        evaluations,
        grad_norm: best.grad_norm,
        converged: best.converged,
        y_mean,
        include_mean_shifts: cfg.include_mean_shifts,
        priors: priors.clone(),
        starts: summaries,
    })
}

/// Prior covariance of the predicted latent value at `s` with the latent
/// rating at rating site `t`, including the integrated category shift.
fn predictive_cross(fit: &MapFitResult, s: &Site, t: &Site) -> f64 {
    let mut v = fit.theta_hat.unconstrained().spatial(s, t);
    if fit.include_mean_shifts && s.category > 0 && s.category == t.category {
        v += fit.priors.delta_sd.powi(2);
    }
    v
}

/// Conditional Gaussian mean (and optionally sd) of the latent surface at the
/// grid given the centered ratings, with the MAP estimate plugged in. The
/// grand mean is added back so the surface is on the rating scale.
pub fn approx_predict(fit: &MapFitResult, ds: &RatingsDataset, grid: &PredictionGrid, with_sd: bool) -> Result<LatentSurface> {
    if !fit.converged {
        log::warn!("predicting from a MAP fit that did not converge");
    }
    let y = ds.y().add_scalar(-fit.y_mean);
    let mut surface = conditional_surface(fit, ds, &y, grid, with_sd)?;
    for m in &mut surface.mean {
        *m += fit.y_mean;
    }
    Ok(surface)
}

/// `Sigma_{grid,obs} K^{-1} y` for an arbitrary centered response `y`.
pub fn conditional_surface(fit: &MapFitResult, ds: &RatingsDataset, y: &DVector<f64>, grid: &PredictionGrid, with_sd: bool) -> Result<LatentSurface> {
    let obj = MapObjective::new(ds, y.clone(), &fit.theta_hat, &fit.priors, fit.include_mean_shifts)?;
    let factor = Cholesky::new(&obj.covariance(&fit.theta_hat))?;
    let alpha = factor.solve_vec(y);
    let obs: Vec<Site> = (0..ds.n()).map(|r| ds.sites()[ds.rating_site(r)]).collect();
    let mut mean = Vec::with_capacity(grid.len());
    let mut sd = with_sd.then(|| Vec::with_capacity(grid.len()));
    for chunk in grid.sites.chunks(crate::predict::DEFAULT_BLOCK_SIZE) {
        let cross = DMatrix::from_fn(chunk.len(), obs.len(), |i, j| predictive_cross(fit, &chunk[i], &obs[j]));
        mean.extend((&cross * &alpha).iter().copied());
        if let Some(sd) = sd.as_mut() {
            let solved = factor.solve_mat(&cross.transpose());
            for (i, s) in chunk.iter().enumerate() {
                let prior = predictive_cross(fit, s, s);
                let v = prior - cross.row(i).transpose().dot(&solved.column(i));
                sd.push(v.max(0.0).sqrt());
            }
        }
    }
    Ok(LatentSurface { mean, sd })
}
