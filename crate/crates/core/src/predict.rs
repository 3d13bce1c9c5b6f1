//! Posterior-predictive interpolation of the latent surface, WAIC, and
//! prediction metrics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovParams;
use crate::dataset::{RatingsDataset, Site};
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, Cholesky};
use crate::mcmc::{linear_mean, Draw, PosteriorDraws};
use crate::ordinal::{level_probability, CutPoints};
use crate::partition::{LandUsePartition, Location};
use crate::rng;

/// Default number of grid points per cross-covariance block.
pub const DEFAULT_BLOCK_SIZE: usize = 2048;

/// Floor applied to a mean pointwise likelihood before taking logs.
pub const LIKELIHOOD_FLOOR: f64 = 1e-300;

/// Prediction locations with their land-use categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub sites: Vec<Site>,
}

impl PredictionGrid {
    pub fn new(sites: Vec<Site>, q: usize) -> Result<Self> {
        for s in &sites {
            if s.category >= q {
                return Err(Error::Config(format!(
                    "grid point {} has category {} outside 1..={q}",
                    s.loc.id,
                    s.category + 1
                )));
            }
            if !s.loc.is_finite() {
                return Err(Error::Config(format!("grid point {} has non-finite coordinates", s.loc.id)));
            }
        }
        Ok(Self { sites })
    }

    /// Categories from the nearest parcel.
    pub fn from_partition(locs: &[Location], partition: &LandUsePartition) -> Result<Self> {
        let sites = locs
            .iter()
            .map(|l| Ok(Site::new(*l, partition.assign_category(l)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(sites, partition.q())
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Grid ids must not reuse observed location ids.
    pub fn check_disjoint(&self, ds: &RatingsDataset) -> Result<()> {
        let observed: std::collections::HashSet<u64> = ds.sites().iter().map(|s| s.loc.id).collect();
        match self.sites.iter().find(|s| observed.contains(&s.loc.id)) {
            Some(s) => Err(Error::Config(format!("grid id {} is also an observed location id", s.loc.id))),
            None => Ok(()),
        }
    }

    /// `M-bar`, the grid-to-category incidence.
    pub fn m_bar(&self, q: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.len(), q);
        for (i, s) in self.sites.iter().enumerate() {
            m[(i, s.category)] = 1.0;
        }
        m
    }
}

/// Per-location predicted latent values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSurface {
    pub mean: Vec<f64>,
    pub sd: Option<Vec<f64>>,
}

/// How much of the predictive covariance to return.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceOutput {
    None,
    Diagonal,
    Full,
}

#[derive(Clone, Debug)]
pub enum PredictiveCov {
    None,
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

/// Cached factorization for one draw's covariance parameters.
struct DrawSystem {
    factor: Cholesky,
    alpha: DVector<f64>,
}

fn rating_sites(ds: &RatingsDataset) -> Vec<Site> {
    (0..ds.n()).map(|r| ds.sites()[ds.rating_site(r)]).collect()
}

fn draw_system(draw: &Draw, ds: &RatingsDataset) -> Result<DrawSystem> {
    let z = draw
        .z
        .as_ref()
        .ok_or_else(|| Error::Argument("draw has no stored latent vector".into()))?;
    if z.len() != ds.n() {
        return Err(Error::Argument(format!("draw latent vector has {} entries, dataset {}", z.len(), ds.n())));
    }
    let r = draw.theta.constrained().rating_matrix(ds);
    let factor = Cholesky::new(&r)?;
    let resid = DVector::from_column_slice(z) - linear_mean(ds, &draw.beta, &draw.delta);
    let alpha = factor.solve_vec(&resid);
    Ok(DrawSystem { factor, alpha })
}

fn check_draw(draw: &Draw, ds: &RatingsDataset) -> Result<()> {
    if draw.delta.len() != ds.q() || draw.beta.len() != ds.p() {
        return Err(Error::Argument("draw dimensions do not match the dataset".into()));
    }
    if let CovParams::Filter(p) = &draw.theta {
        if p.q() != ds.q() {
            return Err(Error::Argument("draw has a different number of categories".into()));
        }
    }
    Ok(())
}

/// Mean and covariance of the latent surface at the grid given one draw:
/// `mu = M-bar delta + Sigma_{grid,obs} R^{-1} (Z* - X beta - M* delta)` and
/// `Sigma = Sigma_{grid,grid} - Sigma_{grid,obs} R^{-1} Sigma_{obs,grid}`.
pub fn predictive_moments(
    draw: &Draw,
    ds: &RatingsDataset,
    grid: &PredictionGrid,
    cov: CovarianceOutput,
) -> Result<(DVector<f64>, PredictiveCov)> {
    check_draw(draw, ds)?;
    let sys = draw_system(draw, ds)?;
    let kernel = draw.theta.constrained();
    let obs = rating_sites(ds);
    let cross = kernel.cross_matrix(&grid.sites, &obs);
    let mean = DVector::from_fn(grid.len(), |i, _| draw.delta[grid.sites[i].category]) + &cross * &sys.alpha;
    let cov = match cov {
        CovarianceOutput::None => PredictiveCov::None,
        CovarianceOutput::Diagonal => {
            let solved = sys.factor.solve_mat(&cross.transpose());
            PredictiveCov::Diagonal(DVector::from_fn(grid.len(), |i, _| {
                let prior = kernel.spatial(&grid.sites[i], &grid.sites[i]);
                (prior - cross.row(i).transpose().dot(&solved.column(i))).max(0.0)
            }))
        }
        CovarianceOutput::Full => {
            let solved = sys.factor.solve_mat(&cross.transpose());
            let mut full = kernel.site_matrix(&grid.sites) - &cross * solved;
            full = (&full + full.transpose()) * 0.5;
            PredictiveCov::Full(full)
        }
    };
    Ok((mean, cov))
}

fn draw_mean_blocks(draw: &Draw, ds: &RatingsDataset, obs: &[Site], grid: &PredictionGrid, block: usize) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    check_draw(draw, ds)?;
    let sys = draw_system(draw, ds)?;
    let kernel = draw.theta.constrained();
    let mut mean = Vec::with_capacity(grid.len());
    for chunk in grid.sites.chunks(block.max(1)) {
        let cross = kernel.cross_matrix(chunk, obs);
        let mu = &cross * &sys.alpha;
        mean.extend(chunk.iter().zip(mu.iter()).map(|(s, m)| draw.delta[s.category] + m));
    }
    Ok((mean, None))
}

fn draw_mean_and_var(draw: &Draw, ds: &RatingsDataset, obs: &[Site], grid: &PredictionGrid, block: usize) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    check_draw(draw, ds)?;
    let sys = draw_system(draw, ds)?;
    let kernel = draw.theta.constrained();
    let mut mean = Vec::with_capacity(grid.len());
    let mut var = Vec::with_capacity(grid.len());
    for chunk in grid.sites.chunks(block.max(1)) {
        let cross = kernel.cross_matrix(chunk, obs);
        let mu = &cross * &sys.alpha;
        let solved = sys.factor.solve_mat(&cross.transpose());
        for (i, s) in chunk.iter().enumerate() {
            mean.push(draw.delta[s.category] + mu[i]);
            let prior = kernel.spatial(s, s);
            var.push((prior - cross.row(i).transpose().dot(&solved.column(i))).max(0.0));
        }
    }
    Ok((mean, Some(var)))
}

/// Options for [`posterior_mean_surface`].
#[derive(Clone, Debug)]
pub struct SurfaceOptions {
    pub block_size: usize,
    /// Also report the posterior standard deviation
    /// `sqrt(mean_b Sigma_b + var_b mu_b)`; costs a solve per grid block.
    pub with_sd: bool,
}

impl Default for SurfaceOptions {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            with_sd: false,
        }
    }
}

/// Average of the per-draw predictive means `mu_b` over all draws.
pub fn posterior_mean_surface(draws: &PosteriorDraws, ds: &RatingsDataset, grid: &PredictionGrid, opts: &SurfaceOptions) -> Result<LatentSurface> {
    if draws.is_empty() {
        return Err(Error::Argument("no posterior draws".into()));
    }
    let obs = rating_sites(ds);
    let g = grid.len();
    let nd = draws.len() as f64;
    let mut sum = vec![0.0; g];
    let mut sum_sq = vec![0.0; g];
    let mut sum_var = vec![0.0; g];
    // Draws are processed in parallel chunks and reduced in draw order.
    for chunk in draws.draws.chunks(32) {
        let parts: Vec<(Vec<f64>, Option<Vec<f64>>)> = chunk
            .par_iter()
            .map(|d| {
                if opts.with_sd {
                    draw_mean_and_var(d, ds, &obs, grid, opts.block_size)
                } else {
                    draw_mean_blocks(d, ds, &obs, grid, opts.block_size)
                }
            })
            .collect::<Result<_>>()?;
        for (mean, var) in parts {
            for i in 0..g {
                sum[i] += mean[i];
                sum_sq[i] += mean[i] * mean[i];
            }
            if let Some(v) = var {
                for i in 0..g {
                    sum_var[i] += v[i];
                }
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / nd).collect();
    let sd = opts.with_sd.then(|| {
        (0..g)
            .map(|i| {
                let between = (sum_sq[i] / nd - mean[i] * mean[i]).max(0.0);
                (sum_var[i] / nd + between).sqrt()
            })
            .collect()
    });
    Ok(LatentSurface { mean, sd })
}

/// Draw the spatial effects at the observed sites from their full
/// conditional given one posterior draw.
pub fn sample_site_effects<R: Rng + ?Sized>(draw: &Draw, ds: &RatingsDataset, rng: &mut R) -> Result<DVector<f64>> {
    check_draw(draw, ds)?;
    let sys = draw_system(draw, ds)?;
    let kernel = draw.theta.constrained();
    let sites = ds.sites();
    let obs = rating_sites(ds);
    let cross = kernel.cross_matrix(sites, &obs);
    let mean = DVector::from_fn(ds.m(), |i, _| draw.delta[sites[i].category]) + &cross * &sys.alpha;
    let solved = sys.factor.solve_mat(&cross.transpose());
    let mut cov = kernel.site_matrix(sites) - &cross * solved;
    cov = (&cov + cov.transpose()) * 0.5;
    let root = psd_sqrt(&cov);
    let e = DVector::from_fn(ds.m(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + root * e)
}

/// Per-rating log likelihoods `log p(Y_r | draw)` given sampled site effects.
/// The latent rating given the site effect has the draw's nugget variance.
pub fn pointwise_log_lik(draw: &Draw, ds: &RatingsDataset, site_effects: &DVector<f64>) -> Result<Vec<f64>> {
    let gamma = CutPoints::new(draw.gamma.clone())?;
    let kernel = draw.theta.constrained();
    let x = ds.design();
    Ok((0..ds.n())
        .map(|r| {
            let xb: f64 = (0..ds.p()).map(|j| x[(r, j)] * draw.beta[j]).sum();
            let mean = xb + site_effects[ds.rating_site(r)];
            let sd = kernel.nugget(ds.rating_category(r)).sqrt();
            level_probability(ds.level(r), mean, sd, &gamma).max(LIKELIHOOD_FLOOR).ln()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseWaic {
    pub rating: usize,
    pub lppd: f64,
    pub p_waic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaicReport {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    /// Penalty form used: the posterior variance of the log likelihood.
    pub penalty: String,
    pub draws: usize,
    pub floored: usize,
    #[serde(skip)]
    pub pointwise: Vec<PointwiseWaic>,
}

/// WAIC from a `draws x ratings` matrix of pointwise log likelihoods:
/// `lppd = sum_r log mean_b p_rb`, `p_waic = sum_r var_b log p_rb`,
/// `WAIC = -2 (lppd - p_waic)`.
pub fn waic_from_log_lik(log_lik: &[Vec<f64>]) -> Result<WaicReport> {
    let s = log_lik.len();
    if s == 0 {
        return Err(Error::Argument("WAIC needs at least one draw".into()));
    }
    let n = log_lik[0].len();
    if log_lik.iter().any(|row| row.len() != n) {
        return Err(Error::Argument("ragged log-likelihood matrix".into()));
    }
    let mut pointwise = Vec::with_capacity(n);
    let mut floored = 0;
    for r in 0..n {
        let col: Vec<f64> = log_lik.iter().map(|row| row[r]).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lppd_r = if max.is_finite() {
            max + (col.iter().map(|v| (v - max).exp()).sum::<f64>() / s as f64).ln()
        } else {
            f64::NEG_INFINITY
        };
        if !(lppd_r >= LIKELIHOOD_FLOOR.ln()) {
            log::warn!("mean likelihood of rating {r} underflows; flooring at {LIKELIHOOD_FLOOR:e}");
            lppd_r = LIKELIHOOD_FLOOR.ln();
            floored += 1;
        }
        let p_r = if s > 1 {
            let mean = col.iter().sum::<f64>() / s as f64;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64
        } else {
            0.0
        };
        pointwise.push(PointwiseWaic {
            rating: r,
            lppd: lppd_r,
            p_waic: p_r,
        });
    }
    let lppd: f64 = pointwise.iter().map(|p| p.lppd).sum();
    let p_waic: f64 = pointwise.iter().map(|p| p.p_waic).sum();
    Ok(WaicReport {
        waic: -2.0 * lppd + 2.0 * p_waic,
        lppd,
        p_waic,
        penalty: "p_waic2 (variance of pointwise log likelihood)".into(),
        draws: s,
        floored,
        pointwise,
    })
}

/// WAIC for a fitted chain. Site effects are regenerated for each draw from
/// its full conditional; draw `b` uses random stream `waic/b` under `seed`.
pub fn waic(draws: &PosteriorDraws, ds: &RatingsDataset, seed: u64) -> Result<WaicReport> {
    let log_lik: Vec<Vec<f64>> = draws
        .draws
        .par_iter()
        .enumerate()
        .map(|(b, draw)| {
            let mut rng = rng::stream(seed, &format!("waic/{b}"));
            let effects = sample_site_effects(draw, ds, &mut rng)?;
            pointwise_log_lik(draw, ds, &effects)
        })
        .collect::<Result<_>>()?;
    waic_from_log_lik(&log_lik)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub mae: f64,
    pub pearson: f64,
}

fn standardize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Argument("cannot standardize a constant vector".into()));
    }
    Ok(v.iter().map(|x| (x - mean) / sd).collect())
}

/// Standardize both vectors (mean 0, sample sd 1), then report their mean
/// absolute difference and Pearson correlation.
pub fn evaluate_predictions(pred: &[f64], truth: &[f64]) -> Result<PredictionMetrics> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(Error::Argument("need two equal-length vectors of at least 2 values".into()));
    }
    let a = standardize(pred)?;
    let b = standardize(truth)?;
    let n = a.len() as f64;
    let mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let pearson = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (n - 1.0);
    Ok(PredictionMetrics {
        mae,
        pearson: pearson.clamp(-1.0, 1.0),
    })
}
