//! Synthetic studies: a patchy land-use partition of the unit square, a joint
//! draw of filtered latent ratings at grid and training locations, and the
//! filter-versus-stationary comparison of approximate MAP predictions.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx_map::{approx_predict, fit_map, initial_map_theta, MapConfig, MapFitResult};
use crate::covariance::{CovParams, FilterCovParams, Kernel, ModelKind};
use crate::dataset::{RatingsDataset, Site};
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, Cholesky};
use crate::ordinal::{bin_latent, CutPoints};
use crate::params::Priors;
use crate::partition::{Location, PointIndex};
use crate::predict::{evaluate_predictions, PredictionGrid};
use crate::rng;

/// Largest grid the joint dense simulation accepts.
pub const MAX_GRID_SIDE: usize = 100;

/// What the predictions are scored against at the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// The simulated latent ratings, nugget included.
    #[default]
    Latent,
    /// The spatial effect without the nugget.
    Noiseless,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimScenario {
    pub grid_side: usize,
    pub n_train: usize,
    pub theta_true: FilterCovParams,
    pub gamma_true: CutPoints,
    pub partition_seed: u64,
    /// Replication `i` uses seed `field_seed + i`.
    pub field_seed: u64,
    pub n_replications: usize,
    /// Decay of the fields whose argmax defines the partition.
    pub partition_decay: f64,
    pub truth: Truth,
    pub priors: Priors,
    pub map: MapConfig,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            grid_side: 100,
            n_train: 1000,
            theta_true: FilterCovParams::simulation_default(),
            gamma_true: CutPoints::simulation_default(),
            partition_seed: 1,
            field_seed: 1000,
            n_replications: 100,
            partition_decay: 5.0,
            truth: Truth::Latent,
            priors: Priors::default(),
            map: MapConfig {
                include_mean_shifts: false,
                ..MapConfig::default()
            },
        }
    }
}

impl SimScenario {
    pub fn q(&self) -> usize {
        self.theta_true.q()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 10 {
            return Err(Error::Config(format!("grid_side must be at least 10, got {}", self.grid_side)));
        }
        if self.grid_side > MAX_GRID_SIDE {
            return Err(Error::Config(format!(
                "grid_side {} exceeds {MAX_GRID_SIDE}; larger grids need a non-dense simulation strategy",
                self.grid_side
            )));
        }
        if self.n_train < self.q() {
            return Err(Error::Config(format!("n_train must be at least Q = {}", self.q())));
        }
        if !(self.partition_decay > 0.0 && self.partition_decay.is_finite()) {
            return Err(Error::Config("partition_decay must be positive".into()));
        }
        self.theta_true.validate()?;
        self.priors.validate()?;
        self.map.validate()
    }
}

/// Cell centers of a `side x side` grid on the unit square, row by row, with
/// ids `0..side^2`.
pub fn unit_grid(side: usize) -> Vec<Location> {
    let h = 1.0 / side as f64;
    (0..side * side)
        .map(|i| {
            let (row, col) = (i / side, i % side);
            Location::new(i as u64, (col as f64 + 0.5) * h, (row as f64 + 0.5) * h)
        })
        .collect()
}

/// Patchy partition: `q` independent mean-zero fields with correlation
/// `exp(-decay d)`; each location takes the index of the largest field.
pub fn gen_partition(locs: &[Location], q: usize, decay: f64, seed: u64) -> Result<Vec<usize>> {
    if q == 0 {
        return Err(Error::Argument("need at least one category".into()));
    }
    if q == 1 || locs.is_empty() {
        return Ok(vec![0; locs.len()]);
    }
    let n = locs.len();
    let cov = nalgebra::DMatrix::from_fn(n, n, |i, j| (-decay * locs[i].distance(&locs[j])).exp());
    let factor = Cholesky::new(&cov)?;
    let mut rng = rng::stream(seed, "sim/partition");
    let fields: Vec<DVector<f64>> = (0..q)
        .map(|_| factor.lower_mul(&DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))))
        .collect();
    Ok((0..n)
        .map(|i| {
            (0..q)
                .max_by(|&a, &b| fields[a][i].total_cmp(&fields[b][i]).then(b.cmp(&a)))
                .unwrap()
        })
        .collect())
}

/// Category of the nearest grid point (lowest grid id on ties).
pub fn assign_train_categories(train: &[Location], grid: &[Site]) -> Result<Vec<usize>> {
    if grid.is_empty() {
        return Err(Error::Argument("empty grid".into()));
    }
    let index = PointIndex::new(grid.iter().map(|s| (s.loc, s.category)));
    Ok(train
        .iter()
        .map(|l| index.nearest_category(l.x, l.y).expect("non-empty index"))
        .collect())
}

/// One simulated ordinal data set over a list of sites.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredDraw {
    /// Latent ratings, `Z~ + nugget`.
    pub z_star: Vec<f64>,
    /// Spatial effect alone; only produced when requested.
    pub z_tilde: Option<Vec<f64>>,
    pub y: Vec<usize>,
}

/// Joint mean-zero draw of latent ratings with correlation `R(theta)` at all
/// sites, binned by `gamma`. With `noiseless` the spatial part is drawn first
/// and the nugget added, so the spatial effect is also returned.
pub fn gen_filtered_data<R: Rng + ?Sized>(
    sites: &[Site],
    theta: &FilterCovParams,
    gamma: &CutPoints,
    noiseless: bool,
    rng: &mut R,
) -> Result<FilteredDraw> {
    theta.validate()?;
    if let Some(s) = sites.iter().find(|s| s.category >= theta.q()) {
        return Err(Error::Argument(format!("site {} has category outside 1..={}", s.loc.id, theta.q())));
    }
    let kernel = Kernel::Constrained(theta);
    let n = sites.len();
    let spatial = kernel.site_matrix(sites);
    let (z_star, z_tilde) = if noiseless {
        let root = psd_sqrt(&spatial);
        let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let zt = root * e;
        let zs: Vec<f64> = (0..n)
            .map(|i| zt[i] + kernel.nugget(sites[i].category).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (zs, Some(zt.iter().copied().collect()))
    } else {
        let mut r = spatial;
        for i in 0..n {
            r[(i, i)] += kernel.nugget(sites[i].category);
        }
        let factor = Cholesky::new(&r)?;
        let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (factor.lower_mul(&e).iter().copied().collect(), None)
    };
    let y = z_star.iter().map(|&z| bin_latent(z, gamma)).collect();
    Ok(FilteredDraw { z_star, z_tilde, y })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub index: usize,
    pub seed: u64,
    pub mae_filter: f64,
    pub mae_stationary: f64,
    pub pearson_filter: f64,
    pub pearson_stationary: f64,
    pub log_post_filter: f64,
    pub log_post_stationary: f64,
    pub converged_filter: bool,
    pub converged_stationary: bool,
}

impl ReplicationResult {
    pub fn converged(&self) -> bool {
        self.converged_filter && self.converged_stationary
    }
}

/// A categorized prediction grid for a scenario.
pub fn scenario_grid(scenario: &SimScenario) -> Result<PredictionGrid> {
    let locs = unit_grid(scenario.grid_side);
    let cats = gen_partition(&locs, scenario.q(), scenario.partition_decay, scenario.partition_seed)?;
    PredictionGrid::new(locs.into_iter().zip(cats).map(|(l, c)| Site::new(l, c)).collect(), scenario.q())
}

/// Simulated training data and the truth at the grid for replication seed `seed`.
pub struct SimulatedData {
    pub train: RatingsDataset,
    pub truth: Vec<f64>,
}

pub fn simulate_data(scenario: &SimScenario, grid: &PredictionGrid, seed: u64) -> Result<SimulatedData> {
    let g = grid.len();
    let mut loc_rng = rng::stream(seed, "sim/train");
    let train_locs: Vec<Location> = (0..scenario.n_train)
        .map(|i| Location::new((g + i) as u64, loc_rng.random(), loc_rng.random()))
        .collect();
    let train_cats = assign_train_categories(&train_locs, &grid.sites)?;
    let train_sites: Vec<Site> = train_locs.iter().zip(&train_cats).map(|(l, &c)| Site::new(*l, c)).collect();
    let all: Vec<Site> = grid.sites.iter().copied().chain(train_sites.iter().copied()).collect();
    let mut field_rng = rng::stream(seed, "sim/field");
    let draw = gen_filtered_data(
        &all,
        &scenario.theta_true,
        &scenario.gamma_true,
        scenario.truth == Truth::Noiseless,
        &mut field_rng,
    )?;
    let truth = match scenario.truth {
        Truth::Latent => draw.z_star[..g].to_vec(),
        Truth::Noiseless => draw.z_tilde.as_ref().expect("requested")[..g].to_vec(),
    };
    let train = RatingsDataset::single_ratings(train_sites, &draw.y[g..], scenario.gamma_true.levels(), scenario.q())?;
    Ok(SimulatedData { train, truth })
}

fn fit_kind(scenario: &SimScenario, ds: &RatingsDataset, kind: ModelKind, seed: u64) -> Result<MapFitResult> {
    let init: CovParams = initial_map_theta(ds, kind, &[])?;
    let cfg = MapConfig {
        seed,
        ..scenario.map.clone()
    };
    fit_map(ds, &init, &scenario.priors, &cfg)
}

fn replication_on_grid(scenario: &SimScenario, grid: &PredictionGrid, index: usize) -> Result<ReplicationResult> {
    let seed = scenario.field_seed.wrapping_add(index as u64);
    let data = simulate_data(scenario, grid, seed)?;
    let filter = fit_kind(scenario, &data.train, ModelKind::Filter, seed)?;
    let stationary = fit_kind(scenario, &data.train, ModelKind::Stationary, seed)?;
    let mf = evaluate_predictions(&approx_predict(&filter, &data.train, grid, false)?.mean, &data.truth)?;
    let ms = evaluate_predictions(&approx_predict(&stationary, &data.train, grid, false)?.mean, &data.truth)?;
    Ok(ReplicationResult {
        index,
        seed,
        mae_filter: mf.mae,
        mae_stationary: ms.mae,
        pearson_filter: mf.pearson,
        pearson_stationary: ms.pearson,
        log_post_filter: filter.log_posterior,
        log_post_stationary: stationary.log_posterior,
        converged_filter: filter.converged,
        converged_stationary: stationary.converged,
    })
}

/// One replication; a pure function of the scenario and the index.
pub fn run_replication(scenario: &SimScenario, index: usize) -> Result<ReplicationResult> {
    scenario.validate()?;
    replication_on_grid(scenario, &scenario_grid(scenario)?, index)
}

/// All replications of a scenario, in index order.
pub fn run_study(scenario: &SimScenario) -> Result<Vec<ReplicationResult>> {
    scenario.validate()?;
    let grid = scenario_grid(scenario)?;
    (0..scenario.n_replications)
        .into_par_iter()
        .map(|i| replication_on_grid(scenario, &grid, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub replications: usize,
    /// Replications with a non-converged fit, left out of the rates below.
    pub excluded: usize,
    pub mae_win_rate: f64,
    pub pearson_win_rate: f64,
    /// Mean of `mae_stationary - mae_filter` (positive favours the filter).
    pub mae_delta_mean: f64,
    pub mae_delta_se: f64,
    /// Mean of `pearson_filter - pearson_stationary`.
    pub pearson_delta_mean: f64,
    pub pearson_delta_se: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Win rates of the filter model and paired differences over converged
/// replications.
pub fn summarize(results: &[ReplicationResult]) -> Result<StudySummary> {
    if results.is_empty() {
        return Err(Error::Argument("no replication results".into()));
    }
    let used: Vec<&ReplicationResult> = results.iter().filter(|r| r.converged()).collect();
    if used.is_empty() {
        return Err(Error::Numerical("no replication converged".into()));
    }
    let n = used.len() as f64;
    let mae_wins = used.iter().filter(|r| r.mae_filter < r.mae_stationary).count() as f64;
    let pearson_wins = used.iter().filter(|r| r.pearson_filter > r.pearson_stationary).count() as f64;
    let dm: Vec<f64> = used.iter().map(|r| r.mae_stationary - r.mae_filter).collect();
    let dp: Vec<f64> = used.iter().map(|r| r.pearson_filter - r.pearson_stationary).collect();
    let (mae_delta_mean, mae_delta_se) = mean_se(&dm);
    let (pearson_delta_mean, pearson_delta_se) = mean_se(&dp);
    Ok(StudySummary {
        replications: results.len(),
        excluded: results.len() - used.len(),
        mae_win_rate: mae_wins / n,
        pearson_win_rate: pearson_wins / n,
        mae_delta_mean,
        mae_delta_se,
        pearson_delta_mean,
        pearson_delta_se,
    })
}
