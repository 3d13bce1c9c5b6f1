//! Data-augmented MCMC for the ordinal filtering and stationary models.
//!
//! The spatial random effects are integrated out, so the sampler targets
//! `Z* = X beta + M* delta + nu`, `nu ~ N(0, R(theta))`. One iteration:
//!
//! 1. cut points from their uniform full conditionals,
//! 2. a sequential truncated-normal sweep over `Z*` using `Lambda = R^{-1}`,
//! 3. a joint Gibbs draw of `(beta, delta_2..Q)`,
//! 4. a block Metropolis-Hastings move on the covariance parameters.
//!
//! A pilot run with a diagonal proposal precedes the main run; its draws,
//! scaled by `proposal_scale`, become the proposal covariance.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovParams, Decay, FilterCovParams, ModelKind, StationaryCovParams};
use crate::dataset::RatingsDataset;
use crate::error::{Error, Result};
use crate::linalg::{sample_covariance, Cholesky};
use crate::ordinal::{update_cutpoints, update_latent, CutPoints};
use crate::params::ThetaLayout;
use crate::partition::{pairwise_distances, Location};

pub use crate::params::{log_prior, Priors};

/// Pilot draws the proposal tuning expects.
pub const RECOMMENDED_PILOT_DRAWS: usize = 10_000;

/// Floor added to the tuned proposal covariance.
pub const PROPOSAL_FLOOR: f64 = 1e-8;

/// Fraction of failed factorizations that aborts a chain.
pub const MAX_FACTORIZATION_FAILURE_RATE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    /// Main-run iterations (after the pilot).
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Pilot iterations with a diagonal proposal; 0 keeps the diagonal proposal.
    pub pilot_iter: usize,
    pub proposal_scale: f64,
    /// Starting standard deviation of the diagonal pilot proposal.
    pub pilot_proposal_sd: f64,
    pub seed: u64,
    pub model_kind: ModelKind,
    /// One-based categories whose latent component is spatially independent
    /// (decay fixed at `+inf`).
    pub independent_components: Vec<usize>,
    /// Visit latent coordinates in a fresh random order each sweep.
    pub random_scan: bool,
    /// Keep `Z*` with every stored draw (needed for prediction and WAIC).
    pub store_latent: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 20_000,
            burn_in: 10_000,
            thin: 20,
            pilot_iter: RECOMMENDED_PILOT_DRAWS,
            proposal_scale: 0.25,
            pilot_proposal_sd: 0.1,
            seed: 0,
            model_kind: ModelKind::Filter,
            independent_components: Vec::new(),
            random_scan: false,
            store_latent: true,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter > 0 && self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn-in {} must be smaller than the iteration count {}",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if !(self.proposal_scale > 0.0) || !(self.pilot_proposal_sd > 0.0) {
            return Err(Error::Config("proposal scales must be positive".into()));
        }
        Ok(())
    }

    /// Number of draws the main run stores.
    pub fn stored_draws(&self) -> usize {
        if self.n_iter == 0 {
            0
        } else {
            (self.n_iter - self.burn_in) / self.thin
        }
    }
}

/// One stored posterior draw. `delta` has all `Q` entries with `delta[0] = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iter: usize,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub theta: CovParams,
    pub gamma: Vec<f64>,
    pub z: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub acceptance_rate: f64,
    pub pilot_acceptance_rate: f64,
    pub proposals: usize,
    pub factorization_failures: usize,
    pub proposal_names: Vec<String>,
    pub proposal_cov: Vec<Vec<f64>>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub kind: ModelKind,
    pub q: usize,
    pub p: usize,
    pub levels: usize,
    pub draws: Vec<Draw>,
    pub summary: ChainSummary,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Every `every`-th draw, for post-processing.
    pub fn thinned(&self, every: usize) -> PosteriorDraws {
        let every = every.max(1);
        PosteriorDraws {
            kind: self.kind,
            q: self.q,
            p: self.p,
            levels: self.levels,
            draws: self.draws.iter().step_by(every).cloned().collect(),
            summary: self.summary.clone(),
        }
    }
}

/// `[X | M*_{2..Q}]`, the design of the joint `(beta, delta)` block.
pub fn regression_design(ds: &RatingsDataset) -> DMatrix<f64> {
    let (n, p, q) = (ds.n(), ds.p(), ds.q());
    let mut w = DMatrix::zeros(n, p + q - 1);
    w.columns_mut(0, p).copy_from(ds.design());
    for r in 0..n {
        let c = ds.rating_category(r);
        if c > 0 {
            w[(r, p + c - 1)] = 1.0;
        }
    }
    w
}

fn regression_system(
    z: &DVector<f64>,
    factor: &Cholesky,
    w: &DMatrix<f64>,
    p: usize,
    priors: &Priors,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, DVector<f64>)> {
    let rinv_w = factor.solve_mat(w);
    let mut prec = w.transpose() * &rinv_w;
    for j in 0..w.ncols() {
        let sd = if j < p { priors.beta_sd } else { priors.delta_sd };
        prec[(j, j)] += 1.0 / (sd * sd);
    }
    let chol = prec
        .cholesky()
        .ok_or_else(|| Error::Numerical("regression posterior precision is singular".into()))?;
    let mean = chol.solve(&(rinv_w.transpose() * z));
    Ok((chol, mean))
}

/// Full-conditional mean and covariance of `(beta, delta_2..Q)`:
/// `V = (W' R^{-1} W + P)^{-1}`, `m = V W' R^{-1} z`.
pub fn regression_posterior(
    z: &DVector<f64>,
    factor: &Cholesky,
    w: &DMatrix<f64>,
    p: usize,
    priors: &Priors,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (chol, mean) = regression_system(z, factor, w, p, priors)?;
    Ok((mean, chol.inverse()))
}

/// Joint Gibbs draw of `(beta, delta)`. Returns `beta` (length `p`) and
/// `delta` (length `Q`, `delta[0] = 0`).
pub fn gibbs_regression<R: Rng + ?Sized>(
    z: &DVector<f64>,
    factor: &Cholesky,
    x: &DMatrix<f64>,
    m_star: &DMatrix<f64>,
    priors: &Priors,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (n, p, q) = (x.nrows(), x.ncols(), m_star.ncols());
    let mut w = DMatrix::zeros(n, p + q - 1);
    w.columns_mut(0, p).copy_from(x);
    if q > 1 {
        w.columns_mut(p, q - 1).copy_from(&m_star.columns(1, q - 1));
    }
    let coef = gibbs_block(z, factor, &w, p, priors, rng)?;
    Ok(split_coefficients(&coef, p, q))
}

fn gibbs_block<R: Rng + ?Sized>(
    z: &DVector<f64>,
    factor: &Cholesky,
    w: &DMatrix<f64>,
    p: usize,
    priors: &Priors,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let d = w.ncols();
    if d == 0 {
        return Ok(DVector::zeros(0));
    }
    let (chol, mean) = regression_system(z, factor, w, p, priors)?;
    // If prec = L L', then L'^{-1} e has covariance prec^{-1}.
    let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let offset = chol
        .l()
        .transpose()
        .solve_upper_triangular(&e)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok(mean + offset)
}

fn split_coefficients(coef: &DVector<f64>, p: usize, q: usize) -> (DVector<f64>, DVector<f64>) {
    let beta = DVector::from_fn(p, |i, _| coef[i]);
    let delta = DVector::from_fn(q, |i, _| if i == 0 { 0.0 } else { coef[p + i - 1] });
    (beta, delta)
}

/// `X beta + M* delta`.
pub fn linear_mean(ds: &RatingsDataset, beta: &[f64], delta: &[f64]) -> DVector<f64> {
    let x = ds.design();
    DVector::from_fn(ds.n(), |r, _| {
        let xb: f64 = (0..ds.p()).map(|j| x[(r, j)] * beta[j]).sum();
        xb + delta[ds.rating_category(r)]
    })
}

/// Posterior of the covariance parameters given `Z*` and the mean, as a
/// function of the free vector.
pub struct ThetaTarget<'a> {
    pub ds: &'a RatingsDataset,
    pub distances: DMatrix<f64>,
    pub layout: ThetaLayout,
    pub template: CovParams,
    pub priors: &'a Priors,
}

/// Covariance parameters evaluated at one free vector.
#[derive(Debug)]
pub struct ThetaEval {
    pub u: Vec<f64>,
    pub theta: CovParams,
    pub factor: Cholesky,
    /// `log prior + log Jacobian`.
    pub log_prior_jac: f64,
}

impl ThetaEval {
    /// `log N(resid; 0, R(theta)) + log prior + log Jacobian`.
    pub fn log_target(&self, resid: &DVector<f64>) -> f64 {
        self.factor.mvn_log_density(resid) + self.log_prior_jac
    }
}

impl<'a> ThetaTarget<'a> {
    pub fn new(ds: &'a RatingsDataset, template: CovParams, priors: &'a Priors) -> Self {
        let locs: Vec<Location> = ds.sites().iter().map(|s| s.loc).collect();
        Self {
            ds,
            distances: pairwise_distances(&locs),
            layout: ThetaLayout::for_params(&template, false),
            template,
            priors,
        }
    }

    pub fn corr_matrix(&self, theta: &CovParams) -> DMatrix<f64> {
        theta.constrained().rating_matrix_from_distances(self.ds, &self.distances)
    }

    /// `Err` when the parameters are invalid or `R` cannot be factored.
    pub fn evaluate(&self, u: &[f64]) -> Result<ThetaEval> {
        let theta = self.layout.unpack(u, &self.template)?;
        let lp = self.layout.log_prior(&theta, self.priors);
        if !lp.is_finite() {
            return Err(Error::Argument("parameters outside prior support".into()));
        }
        let factor = Cholesky::new(&self.corr_matrix(&theta))?;
        Ok(ThetaEval {
            u: u.to_vec(),
            theta,
            factor,
            log_prior_jac: lp + self.layout.log_jacobian(u),
        })
    }
}

/// Outcome of one Metropolis-Hastings move.
#[derive(Debug)]
pub struct MhStep {
    pub accepted: bool,
    pub log_alpha: f64,
    /// The proposal, when it could be evaluated.
    pub proposal: Option<ThetaEval>,
    pub factorization_failed: bool,
}

/// Random-walk MH on the free vector with proposal `N(u, L L')`, where
/// `proposal_lower` is `L`. The acceptance ratio includes the log Jacobian of
/// the transformation.
pub fn mh_theta<R: Rng + ?Sized>(
    target: &ThetaTarget<'_>,
    current: &ThetaEval,
    resid: &DVector<f64>,
    proposal_lower: &DMatrix<f64>,
    rng: &mut R,
) -> MhStep {
    let d = current.u.len();
    let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let step = proposal_lower * e;
    let u_new: Vec<f64> = current.u.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
    let log_u: f64 = rng.random::<f64>().ln();
    match target.evaluate(&u_new) {
        Ok(eval) => {
            let log_alpha = eval.log_target(resid) - current.log_target(resid);
            let accepted = log_u < log_alpha;
            MhStep {
                accepted,
                log_alpha,
                proposal: Some(eval),
                factorization_failed: false,
            }
        }
        Err(err) => {
            let failed = matches!(err, Error::Numerical(_));
            if failed {
                log::warn!("rejecting proposal: {err}");
            }
            MhStep {
                accepted: false,
                log_alpha: f64::NEG_INFINITY,
                proposal: None,
                factorization_failed: failed,
            }
        }
    }
}

/// `scale` times the sample covariance of pilot draws (free-vector scale),
/// plus a `1e-8` diagonal floor so the result is positive definite.
pub fn tune_proposal(pilot: &[Vec<f64>], scale: f64) -> Result<DMatrix<f64>> {
    if pilot.len() < 2 {
        return Err(Error::Argument("proposal tuning needs at least two pilot draws".into()));
    }
    if pilot.len() < RECOMMENDED_PILOT_DRAWS {
        log::warn!(
            "tuning the proposal from {} pilot draws (at least {} recommended)",
            pilot.len(),
            RECOMMENDED_PILOT_DRAWS
        );
    }
    let mut cov = sample_covariance(pilot) * scale;
    let d = cov.nrows();
    for i in 0..d {
        cov[(i, i)] += PROPOSAL_FLOOR;
    }
    let mut floor = PROPOSAL_FLOOR;
    while cov.clone().cholesky().is_none() {
        floor *= 10.0;
        for i in 0..d {
            cov[(i, i)] += floor;
        }
    }
    Ok(cov)
}

/// Starting covariance parameters: `A = 0.5 I`, unit nuggets, decay
/// `-ln(0.05) / median distance` (so correlation 0.05 at the median
/// separation), `tau2 = 1` for the stationary model.
/// `-ln(0.05) / median inter-site distance`: a decay whose effective range
/// is the median spacing of the data.
pub(crate) fn median_decay(ds: &RatingsDataset) -> f64 {
    let mut dists: Vec<f64> = Vec::new();
    let sites = ds.sites();
    for i in 0..sites.len() {
        for j in 0..i {
            dists.push(sites[i].distance(&sites[j]));
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if *median > 0.0 {
        -(0.05f64).ln() / *median
    } else {
        1.0
    }
}

pub fn initial_theta(ds: &RatingsDataset, cfg: &ChainConfig) -> Result<CovParams> {
    let phi0 = median_decay(ds);
    match cfg.model_kind {
        ModelKind::Filter => {
            let q = ds.q();
            for &c in &cfg.independent_components {
                if c == 0 || c > q {
                    return Err(Error::Config(format!("independent component {c} outside 1..={q}")));
                }
            }
            let phi = (0..q)
                .map(|k| {
                    if cfg.independent_components.contains(&(k + 1)) {
                        Decay::Independent
                    } else {
                        Decay::Finite(phi0)
                    }
                })
                .collect();
            Ok(CovParams::Filter(FilterCovParams::with_unit_nugget(
                DMatrix::identity(q, q) * 0.5,
                phi,
            )?))
        }
        ModelKind::Stationary => Ok(CovParams::Stationary(StationaryCovParams::new(phi0, 1.0)?)),
    }
}

/// Current state of one chain.
#[derive(Debug)]
pub struct ChainState {
    pub z: DVector<f64>,
    pub gamma: CutPoints,
    pub beta: DVector<f64>,
    pub delta: DVector<f64>,
    pub theta: ThetaEval,
    pub precision: DMatrix<f64>,
}

impl ChainState {
    /// Cut points from the level frequencies, `Z*` at bin midpoints (0.5
    /// beyond the outer cut points), zero mean parameters.
    pub fn initial(ds: &RatingsDataset, theta: ThetaEval) -> Result<Self> {
        let gamma = CutPoints::from_frequencies(&ds.level_counts())?;
        let z = DVector::from_fn(ds.n(), |r, _| {
            let k = ds.level(r);
            let (lo, hi) = (gamma.lower(k), gamma.upper(k));
            match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (false, true) => hi - 0.5,
                (true, false) => lo + 0.5,
                (false, false) => 0.0,
            }
        });
        let precision = theta.factor.inverse();
        Ok(Self {
            z,
            gamma,
            beta: DVector::zeros(ds.p()),
            delta: DVector::zeros(ds.q()),
            theta,
            precision,
        })
    }

    fn mean(&self, ds: &RatingsDataset) -> DVector<f64> {
        linear_mean(ds, self.beta.as_slice(), self.delta.as_slice())
    }
}

struct Sweeper<'a> {
    ds: &'a RatingsDataset,
    target: ThetaTarget<'a>,
    levels: Vec<usize>,
    w: DMatrix<f64>,
    priors: &'a Priors,
    random_scan: bool,
    proposals: usize,
    failures: usize,
}

impl Sweeper<'_> {
    /// One full iteration; returns whether the covariance move was accepted.
    fn step<R: Rng + ?Sized>(&mut self, state: &mut ChainState, proposal_lower: &DMatrix<f64>, rng: &mut R) -> Result<bool> {
        state.gamma = update_cutpoints(state.z.as_slice(), &self.levels, &state.gamma, rng);

        let mu = state.mean(self.ds);
        let order = if self.random_scan {
            let mut o: Vec<usize> = (0..self.ds.n()).collect();
            o.shuffle(rng);
            Some(o)
        } else {
            None
        };
        update_latent(&mut state.z, &self.levels, &state.gamma, &state.precision, &mu, order.as_deref(), rng)?;

        let coef = gibbs_block(&state.z, &state.theta.factor, &self.w, self.ds.p(), self.priors, rng)?;
        let (beta, delta) = split_coefficients(&coef, self.ds.p(), self.ds.q());
        state.beta = beta;
        state.delta = delta;

        let resid = &state.z - state.mean(self.ds);
        let mh = mh_theta(&self.target, &state.theta, &resid, proposal_lower, rng);
        self.proposals += 1;
        if mh.factorization_failed {
            self.failures += 1;
            if self.proposals >= 200 && self.failures as f64 > MAX_FACTORIZATION_FAILURE_RATE * self.proposals as f64 {
                return Err(Error::Numerical(format!(
                    "{} of {} covariance proposals could not be factored; aborting chain",
                    self.failures, self.proposals
                )));
            }
        }
        if mh.accepted {
            let eval = mh.proposal.expect("accepted proposals are evaluated");
            state.precision = eval.factor.inverse();
            state.theta = eval;
        }
        Ok(mh.accepted)
    }
}

fn diagonal_proposal(d: usize, sd: f64) -> DMatrix<f64> {
    DMatrix::identity(d, d) * sd
}

/// Run the pilot and main phases and return the stored draws.
pub fn run_chain<R: Rng + ?Sized>(
    ds: &RatingsDataset,
    cfg: &ChainConfig,
    priors: &Priors,
    init: Option<CovParams>,
    rng: &mut R,
) -> Result<PosteriorDraws> {
    let started = Instant::now();
    cfg.validate()?;
    priors.validate()?;
    let kind = cfg.model_kind;
    let mut out = PosteriorDraws {
        kind,
        q: ds.q(),
        p: ds.p(),
        levels: ds.levels(),
        draws: Vec::new(),
        summary: ChainSummary::default(),
    };
    if let Some(level) = ds.level_counts().iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("ordinal level {} has no ratings", level + 1)));
    }
    let theta0 = match init {
        Some(t) if t.kind() != kind => {
            return Err(Error::Config(format!("initial parameters are for the {} model", t.kind())))
        }
        Some(t) => t,
        None => initial_theta(ds, cfg)?,
    };
    let target = ThetaTarget::new(ds, theta0, priors);
    let d = target.layout.dim();
    out.summary.proposal_names = target.layout.names();
    let u0 = target.layout.pack(&target.template);
    let eval0 = target.evaluate(&u0)?;
    let mut state = ChainState::initial(ds, eval0)?;
    let mut sweeper = Sweeper {
        ds,
        levels: ds.levels_vec(),
        w: regression_design(ds),
        target,
        priors,
        random_scan: cfg.random_scan,
        proposals: 0,
        failures: 0,
    };

    // Pilot: diagonal proposal whose common scale is nudged every 100
    // iterations toward an acceptance rate between 0.15 and 0.4.
    let mut sd = cfg.pilot_proposal_sd;
    let mut proposal = diagonal_proposal(d, sd);
    let mut pilot_draws = Vec::with_capacity(cfg.pilot_iter);
    let mut pilot_accepts = 0usize;
    let mut batch_accepts = 0usize;
    for it in 0..cfg.pilot_iter {
        if sweeper.step(&mut state, &proposal, rng)? {
            pilot_accepts += 1;
            batch_accepts += 1;
        }
        pilot_draws.push(state.theta.u.clone());
        if (it + 1) % 100 == 0 {
            let rate = batch_accepts as f64 / 100.0;
            if rate < 0.15 {
                sd *= 0.7;
            } else if rate > 0.4 {
                sd *= 1.3;
            }
            proposal = diagonal_proposal(d, sd);
            batch_accepts = 0;
        }
    }
    if cfg.pilot_iter > 0 {
        out.summary.pilot_acceptance_rate = pilot_accepts as f64 / cfg.pilot_iter as f64;
    }
    let proposal_cov = if pilot_draws.len() >= 2 {
        tune_proposal(&pilot_draws, cfg.proposal_scale)?
    } else {
        diagonal_proposal(d, sd * sd)
    };
    out.summary.proposal_cov = (0..d).map(|i| proposal_cov.row(i).iter().cloned().collect()).collect();
    let proposal = proposal_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("proposal covariance is not positive definite".into()))?
        .l();

    let mut accepts = 0usize;
    for it in 0..cfg.n_iter {
        if sweeper.step(&mut state, &proposal, rng)? {
            accepts += 1;
        }
        if it >= cfg.burn_in && (it - cfg.burn_in + 1).is_multiple_of(cfg.thin) {
            out.draws.push(Draw {
                iter: it,
                beta: state.beta.iter().cloned().collect(),
                delta: state.delta.iter().cloned().collect(),
                theta: state.theta.theta.clone(),
                gamma: state.gamma.as_slice().to_vec(),
                z: cfg.store_latent.then(|| state.z.iter().cloned().collect()),
            });
        }
    }
    if cfg.n_iter > 0 {
        out.summary.acceptance_rate = accepts as f64 / cfg.n_iter as f64;
        if !(0.05..=0.6).contains(&out.summary.acceptance_rate) {
            log::warn!(
                "covariance acceptance rate {:.3} outside [0.05, 0.6]",
                out.summary.acceptance_rate
            );
        }
    }
    out.summary.proposals = sweeper.proposals;
    out.summary.factorization_failures = sweeper.failures;
    out.summary.runtime_secs = started.elapsed().as_secs_f64();
    Ok(out)
}
