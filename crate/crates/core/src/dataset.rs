//! Ratings with their locations, categories and covariates, plus the
//! incidence matrices `H` (rating to location), `M` (location to category)
//! and `M* = H M`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Location;

/// A location together with its land-use category (zero-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub loc: Location,
    pub category: usize,
}

impl Site {
    pub fn new(loc: Location, category: usize) -> Self {
        Self { loc, category }
    }

    #[inline]
    pub fn distance(&self, other: &Site) -> f64 {
        self.loc.distance(&other.loc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    /// Index into [`RatingsDataset::sites`].
    pub site: usize,
    /// Ordinal level in `1..=K`.
    pub level: usize,
    pub covariates: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RatingsDataset {
    sites: Vec<Site>,
    ratings: Vec<Rating>,
    levels: usize,
    q: usize,
    design: DMatrix<f64>,
    /// Rows dropped at ingestion as reporting errors.
    pub dropped: usize,
}

impl RatingsDataset {
    pub fn new(sites: Vec<Site>, ratings: Vec<Rating>, levels: usize, q: usize) -> Result<Self> {
        if levels < 2 {
            return Err(Error::Config(format!("need at least 2 ordinal levels, got {levels}")));
        }
        if q == 0 {
            return Err(Error::Config("need at least one land-use category".into()));
        }
        let p = ratings.first().map_or(0, |r| r.covariates.len());
        let mut used = vec![false; sites.len()];
        for (r, rating) in ratings.iter().enumerate() {
            if rating.site >= sites.len() {
                return Err(Error::Config(format!("rating {} references unknown site {}", r + 1, rating.site)));
            }
            if !(1..=levels).contains(&rating.level) {
                return Err(Error::Config(format!(
                    "rating {} has level {} outside 1..={levels}",
                    r + 1,
                    rating.level
                )));
            }
            if rating.covariates.len() != p {
                return Err(Error::Config(format!(
                    "rating {} has {} covariates, expected {p}",
                    r + 1,
                    rating.covariates.len()
                )));
            }
            if rating.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("rating {} has a non-finite covariate", r + 1)));
            }
            used[rating.site] = true;
        }
        for (i, s) in sites.iter().enumerate() {
            if s.category >= q {
                return Err(Error::Config(format!(
                    "site {} has category {} outside 1..={q}",
                    s.loc.id,
                    s.category + 1
                )));
            }
            if !s.loc.is_finite() {
                return Err(Error::Config(format!("site {} has non-finite coordinates", s.loc.id)));
            }
            if !used[i] {
                return Err(Error::Config(format!("site {} has no ratings", s.loc.id)));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = sites.iter().find(|s| !seen.insert(s.loc.id)) {
            return Err(Error::Config(format!("duplicate location id {}", dup.loc.id)));
        }
        let design = DMatrix::from_fn(ratings.len(), p, |r, j| ratings[r].covariates[j]);
        Ok(Self {
            sites,
            ratings,
            levels,
            q,
            design,
            dropped: 0,
        })
    }

    /// One rating per site, no covariates.
    pub fn single_ratings(sites: Vec<Site>, levels_observed: &[usize], levels: usize, q: usize) -> Result<Self> {
        let ratings = levels_observed
            .iter()
            .enumerate()
            .map(|(i, &level)| Rating {
                site: i,
                level,
                covariates: Vec::new(),
            })
            .collect();
        Self::new(sites, ratings, levels, q)
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    /// Number of ratings.
    pub fn n(&self) -> usize {
        self.ratings.len()
    }

    /// Number of unique locations.
    pub fn m(&self) -> usize {
        self.sites.len()
    }

    /// Number of ordinal levels `K`.
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    #[inline]
    pub fn rating_site(&self, r: usize) -> usize {
        self.ratings[r].site
    }

    #[inline]
    pub fn rating_category(&self, r: usize) -> usize {
        self.sites[self.ratings[r].site].category
    }

    pub fn level(&self, r: usize) -> usize {
        self.ratings[r].level
    }

    pub fn levels_vec(&self) -> Vec<usize> {
        self.ratings.iter().map(|r| r.level).collect()
    }

    /// Ratings as reals (for the Gaussian approximation).
    pub fn y(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.ratings.iter().map(|r| r.level as f64))
    }

    /// `n x p` design matrix `X` (no intercept).
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// `n x m` incidence `H`.
    pub fn h(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n(), self.m());
        for (r, rating) in self.ratings.iter().enumerate() {
            h[(r, rating.site)] = 1.0;
        }
        h
    }

    /// `m x Q` incidence `M`.
    pub fn m_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.m(), self.q);
        for (i, s) in self.sites.iter().enumerate() {
            m[(i, s.category)] = 1.0;
        }
        m
    }

    /// `M* = H M`, the rating-to-category incidence.
    pub fn m_star(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n(), self.q);
        for r in 0..self.n() {
            m[(r, self.rating_category(r))] = 1.0;
        }
        m
    }

    /// Ratings per location, `n_i`.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.m()];
        for r in &self.ratings {
            c[r.site] += 1;
        }
        c
    }

    /// Number of ratings at each ordinal level (index 0 is level 1).
    pub fn level_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.levels];
        for r in &self.ratings {
            c[r.level - 1] += 1;
        }
        c
    }

    /// Categories observed at least once.
    pub fn observed_categories(&self) -> Vec<bool> {
        let mut seen = vec![false; self.q];
        for s in &self.sites {
            seen[s.category] = true;
        }
        seen
    }
}
