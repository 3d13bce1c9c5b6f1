//! Correlation and covariance functions for the land-use filtered latent
//! process and for the stationary comparator.
//!
//! The `Q`-dimensional latent process is `eta(s) = A w(s)` with `A` lower
//! triangular and `w_q` independent unit-variance processes with exponential
//! correlation `exp(-phi_q d)`. The filtered process at `s` is the component
//! `eta_{g(s)}(s)`, so its covariance is `a_{g(s)}' Gamma(d) a_{g(s')}`, and
//! the constrained version divides by the total standard deviations
//! `sqrt(||a_q||^2 + sigma2_q)` so each latent rating has unit variance.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{RatingsDataset, Site};
use crate::error::{Error, Result};

/// Exponential decay rate per unit distance. `Independent` is the `phi = +inf`
/// limit (spatially independent component), kept as a flag so that no
/// arithmetic ever multiplies `0 * inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decay {
    Finite(f64),
    Independent,
}

impl Decay {
    pub fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            Decay::Independent
        } else {
            Decay::Finite(v)
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Decay::Finite(v) => v,
            Decay::Independent => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Decay::Finite(_))
    }

    /// `exp(-phi d)` for `d >= 0` (no argument check).
    #[inline]
    pub fn corr(self, d: f64) -> f64 {
        match self {
            Decay::Finite(phi) => (-phi * d).exp(),
            Decay::Independent => {
                if d == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Decay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decay::Finite(v) => write!(f, "{v}"),
            Decay::Independent => write!(f, "inf"),
        }
    }
}

impl Serialize for Decay {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Decay::Finite(v) => s.serialize_f64(*v),
            Decay::Independent => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Decay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Decay::from_f64(v)),
            Repr::Text(t) if matches!(t.as_str(), "inf" | "+inf" | "infinity" | "Infinity") => {
                Ok(Decay::Independent)
            }
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid decay rate {t:?}"))),
        }
    }
}

/// Exponential correlation `exp(-phi d)`.
pub fn exp_corr(d: f64, phi: Decay) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::Argument(format!("distance must be nonnegative, got {d}")));
    }
    if let Decay::Finite(p) = phi {
        if !(p > 0.0) {
            return Err(Error::Argument(format!("decay must be positive, got {p}")));
        }
    }
    Ok(phi.corr(d))
}

/// Covariance parameters of the land-use filtered process: the lower
/// triangular mixing matrix `A`, per-component decay rates and per-category
/// nugget variances (fixed at 1 in the identified ordinal model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FilterRepr", into = "FilterRepr")]
pub struct FilterCovParams {
    a: DMatrix<f64>,
    phi: Vec<Decay>,
    sigma2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FilterRepr {
    a: Vec<Vec<f64>>,
    phi: Vec<Decay>,
    sigma2: Vec<f64>,
}

impl From<FilterCovParams> for FilterRepr {
    fn from(p: FilterCovParams) -> Self {
        let q = p.q();
        FilterRepr {
            a: (0..q).map(|i| (0..=i).map(|j| p.a[(i, j)]).collect()).collect(),
            phi: p.phi,
            sigma2: p.sigma2,
        }
    }
}

impl TryFrom<FilterRepr> for FilterCovParams {
    type Error = Error;

    fn try_from(r: FilterRepr) -> Result<Self> {
        let q = r.a.len();
        let mut a = DMatrix::zeros(q, q);
        for (i, row) in r.a.iter().enumerate() {
            if row.len() > q {
                return Err(Error::Config(format!("row {} of A has {} entries", i + 1, row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                a[(i, j)] = v;
            }
        }
        FilterCovParams::new(a, r.phi, r.sigma2)
    }
}

impl FilterCovParams {
    pub fn new(a: DMatrix<f64>, phi: Vec<Decay>, sigma2: Vec<f64>) -> Result<Self> {
        let p = Self { a, phi, sigma2 };
        p.validate()?;
        Ok(p)
    }

    /// Parameters with unit nuggets.
    pub fn with_unit_nugget(a: DMatrix<f64>, phi: Vec<Decay>) -> Result<Self> {
        let q = a.nrows();
        Self::new(a, phi, vec![1.0; q])
    }

    /// Mixing matrix, decay rates and nuggets used in the simulation study.
    pub fn simulation_default() -> Self {
        let a = DMatrix::from_row_slice(3, 3, &[1.8, 0.0, 0.0, 0.8, 1.2, 0.0, 0.9, 1.0, 1.25]);
        let phi = vec![Decay::Finite(40.0), Decay::Finite(10.0), Decay::Finite(2.0)];
        Self::new(a, phi, vec![1.0; 3]).expect("valid defaults")
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.a.nrows();
        if q == 0 || self.a.ncols() != q {
            return Err(Error::Config("A must be a non-empty square matrix".into()));
        }
        if self.phi.len() != q || self.sigma2.len() != q {
            return Err(Error::Config(format!(
                "expected {q} decay rates and nuggets, got {} and {}",
                self.phi.len(),
                self.sigma2.len()
            )));
        }
        for i in 0..q {
            for j in 0..q {
                let v = self.a[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Config(format!("A[{},{}] is not finite", i + 1, j + 1)));
                }
                if j > i && v != 0.0 {
                    return Err(Error::Config(format!(
                        "A must be lower triangular, A[{},{}] = {v}",
                        i + 1,
                        j + 1
                    )));
                }
            }
            if !(self.a[(i, i)] > 0.0) {
                return Err(Error::Config(format!("diagonal A[{0},{0}] must be positive", i + 1)));
            }
            if let Decay::Finite(p) = self.phi[i] {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::Config(format!("phi[{}] = {p} must be positive", i + 1)));
                }
            }
            if !(self.sigma2[i] > 0.0 && self.sigma2[i].is_finite()) {
                return Err(Error::Config(format!("sigma2[{}] must be positive", i + 1)));
            }
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn phi(&self) -> &[Decay] {
        &self.phi
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    /// `||a_q||^2`, the variance of the unconstrained category-`q` process.
    pub fn row_norm2(&self, q: usize) -> f64 {
        (0..=q).map(|j| self.a[(q, j)].powi(2)).sum()
    }

    /// `||a_q||^2 + sigma2_q`.
    pub fn total_variance(&self, q: usize) -> f64 {
        self.row_norm2(q) + self.sigma2[q]
    }

    /// Unconstrained filtered covariance `a_g' Gamma(d) a_g'` at distance `d`.
    pub fn filtered_cov_at(&self, d: f64, g: usize, h: usize) -> f64 {
        (0..=g.min(h))
            .map(|k| self.a[(g, k)] * self.a[(h, k)] * self.phi[k].corr(d))
            .sum()
    }

    pub fn filtered_cov(&self, s: &Site, t: &Site) -> f64 {
        self.filtered_cov_at(s.distance(t), s.category, t.category)
    }

    /// Constrained covariance: the filtered covariance divided by the
    /// product of per-site total standard deviations.
    pub fn constrained_cov_at(&self, d: f64, g: usize, h: usize) -> f64 {
        self.filtered_cov_at(d, g, h) / (self.total_variance(g) * self.total_variance(h)).sqrt()
    }

    pub fn constrained_cov(&self, s: &Site, t: &Site) -> f64 {
        self.constrained_cov_at(s.distance(t), s.category, t.category)
    }

    /// `sigma2_q / (||a_q||^2 + sigma2_q)`.
    pub fn constrained_nugget(&self, q: usize) -> f64 {
        self.sigma2[q] / self.total_variance(q)
    }

    /// Constrained cross-correlation block between the `Q` components at two
    /// sites `d` apart.
    pub fn cross_corr_block(&self, d: f64) -> DMatrix<f64> {
        let q = self.q();
        DMatrix::from_fn(q, q, |i, j| self.constrained_cov_at(d, i, j))
    }

    /// Correlation for the variant without independent error:
    /// `a_g' Gamma a_h / (||a_g|| ||a_h||)`.
    pub fn noreplication_corr_at(&self, d: f64, g: usize, h: usize) -> f64 {
        self.filtered_cov_at(d, g, h) / (self.row_norm2(g) * self.row_norm2(h)).sqrt()
    }

    pub fn noreplication_corr(&self, s: &Site, t: &Site) -> f64 {
        self.noreplication_corr_at(s.distance(t), s.category, t.category)
    }
}

/// `||a_q||^2 / (||a_q||^2 + 1)`: the share of unit total variance that is
/// spatial when `sigma2_q = 1`.
pub fn spatial_variance_proportion(a: &DMatrix<f64>, q: usize) -> f64 {
    let n2: f64 = (0..a.ncols()).map(|j| a[(q, j)].powi(2)).sum();
    n2 / (n2 + 1.0)
}

/// Stationary comparator: `scale * [(1 - kappa) R(phi) + kappa I]` with
/// `kappa = 1 / (1 + tau2)`. The ordinal model fixes `scale = 1`; the
/// approximate Gaussian model estimates it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryCovParams {
    pub phi: f64,
    pub tau2: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl StationaryCovParams {
    pub fn new(phi: f64, tau2: f64) -> Result<Self> {
        Self::with_scale(phi, tau2, 1.0)
    }

    pub fn with_scale(phi: f64, tau2: f64, scale: f64) -> Result<Self> {
        let p = Self { phi, tau2, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("phi", self.phi), ("tau2", self.tau2), ("scale", self.scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("stationary {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        1.0 / (1.0 + self.tau2)
    }

    pub fn spatial_cov_at(&self, d: f64) -> f64 {
        self.scale * (1.0 - self.kappa()) * (-self.phi * d).exp()
    }

    pub fn nugget(&self) -> f64 {
        self.scale * self.kappa()
    }
}

/// Either covariance family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum CovParams {
    Filter(FilterCovParams),
    Stationary(StationaryCovParams),
}

impl CovParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            CovParams::Filter(_) => ModelKind::Filter,
            CovParams::Stationary(_) => ModelKind::Stationary,
        }
    }

    /// Kernel of the ordinal model (unit total variance per rating).
    pub fn constrained(&self) -> Kernel<'_> {
        match self {
            CovParams::Filter(p) => Kernel::Constrained(p),
            CovParams::Stationary(p) => Kernel::Stationary(p),
        }
    }

    /// Kernel of the approximate Gaussian model.
    pub fn unconstrained(&self) -> Kernel<'_> {
        match self {
            CovParams::Filter(p) => Kernel::Unconstrained(p),
            CovParams::Stationary(p) => Kernel::Stationary(p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Filter,
    Stationary,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Filter => "filter",
            ModelKind::Stationary => "stationary",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" | "filtering" => Ok(ModelKind::Filter),
            "stationary" => Ok(ModelKind::Stationary),
            other => Err(Error::Argument(format!("unknown model kind {other:?}"))),
        }
    }
}

/// A spatial covariance for the latent effect plus a per-rating nugget.
#[derive(Clone, Copy, Debug)]
pub enum Kernel<'a> {
    Constrained(&'a FilterCovParams),
    Unconstrained(&'a FilterCovParams),
    Stationary(&'a StationaryCovParams),
}

impl Kernel<'_> {
    /// Covariance of the spatial effect between two sites.
    #[inline]
    pub fn spatial(&self, s: &Site, t: &Site) -> f64 {
        let d = s.distance(t);
        match self {
            Kernel::Constrained(p) => p.constrained_cov_at(d, s.category, t.category),
            Kernel::Unconstrained(p) => p.filtered_cov_at(d, s.category, t.category),
            Kernel::Stationary(p) => p.spatial_cov_at(d),
        }
    }

    /// Independent error variance of a rating at a category-`q` site.
    pub fn nugget(&self, q: usize) -> f64 {
        match self {
            Kernel::Constrained(p) => p.constrained_nugget(q),
            Kernel::Unconstrained(p) => p.sigma2[q],
            Kernel::Stationary(p) => p.nugget(),
        }
    }

    /// Spatial covariance matrix between two site lists.
    pub fn cross_matrix(&self, rows: &[Site], cols: &[Site]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.spatial(&rows[i], &cols[j]))
    }

    /// Symmetric spatial covariance matrix over one site list.
    pub fn site_matrix(&self, sites: &[Site]) -> DMatrix<f64> {
        let m = sites.len();
        let mut out = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = self.spatial(&sites[i], &sites[j]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Spatial covariance over sites given their precomputed distance matrix.
    pub fn site_matrix_from_distances(&self, sites: &[Site], dist: &DMatrix<f64>) -> DMatrix<f64> {
        let m = sites.len();
        let mut out = DMatrix::zeros(m, m);
        for j in 0..m {
            let cj = sites[j].category;
            for i in j..m {
                let d = dist[(i, j)];
                let ci = sites[i].category;
                let v = match self {
                    Kernel::Constrained(p) => p.constrained_cov_at(d, ci, cj),
                    Kernel::Unconstrained(p) => p.filtered_cov_at(d, ci, cj),
                    Kernel::Stationary(p) => p.spatial_cov_at(d),
                };
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// `H Sigma H' + D` over the ratings of a dataset.
    pub fn rating_matrix(&self, ds: &RatingsDataset) -> DMatrix<f64> {
        self.expand_to_ratings(ds, &self.site_matrix(ds.sites()))
    }

    /// As [`Kernel::rating_matrix`], reusing a site distance matrix.
    pub fn rating_matrix_from_distances(&self, ds: &RatingsDataset, dist: &DMatrix<f64>) -> DMatrix<f64> {
        self.expand_to_ratings(ds, &self.site_matrix_from_distances(ds.sites(), dist))
    }

    fn expand_to_ratings(&self, ds: &RatingsDataset, site_cov: &DMatrix<f64>) -> DMatrix<f64> {
        if ds.n() == ds.m() && (0..ds.n()).all(|r| ds.rating_site(r) == r) {
            let mut out = site_cov.clone();
            for r in 0..ds.n() {
                out[(r, r)] += self.nugget(ds.sites()[r].category);
            }
            return out;
        }
        let n = ds.n();
        let mut out = DMatrix::zeros(n, n);
        for r in 0..n {
            let lr = ds.rating_site(r);
            for s in 0..=r {
                let v = site_cov[(lr, ds.rating_site(s))];
                out[(r, s)] = v;
                out[(s, r)] = v;
            }
            out[(r, r)] += self.nugget(ds.sites()[lr].category);
        }
        out
    }
}

/// `R(theta*) = H Sigma~ H' + D~`, the correlation matrix of the latent
/// ratings under the filtering model.
pub fn observation_corr_matrix(ds: &RatingsDataset, p: &FilterCovParams) -> DMatrix<f64> {
    Kernel::Constrained(p).rating_matrix(ds)
}

/// `(1 - kappa) R(phi) + kappa I` over the ratings of a dataset (the
/// locations enter through the dataset's incidence structure).
pub fn stationary_corr_matrix(ds: &RatingsDataset, p: &StationaryCovParams) -> DMatrix<f64> {
    let unit = StationaryCovParams { scale: 1.0, ..p.clone() };
    Kernel::Stationary(&unit).rating_matrix(ds)
}
