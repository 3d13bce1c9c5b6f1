//! Land-use partition of the study region and location-to-category assignment.
//!
//! Categories are zero-based (`0..q`) throughout the library. Files and the
//! command line use the one-based labels `1..=Q`.

use nalgebra::DMatrix;
use rstar::primitives::GeomWithData;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the study region. Coordinates are planar, in whatever unit the
/// data uses; decay rates carry the reciprocal unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(id: u64, x: f64, y: f64) -> Self {
        Self { id, x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parcel {
    pub centroid: Location,
    pub tax_code: String,
    pub category: usize,
}

/// Default labels for a three-way partition.
pub const DEFAULT_CATEGORY_NAMES: [&str; 3] = ["residential", "nonresidential", "other"];

type Entry = GeomWithData<[f64; 2], usize>;

/// Exact nearest-neighbour index over labelled points.
///
/// Backed by an R*-tree; results are identical to a brute-force scan, with
/// equidistant candidates ordered by ascending id.
#[derive(Clone, Debug)]
pub struct PointIndex {
    ids: Vec<u64>,
    categories: Vec<usize>,
    tree: RTree<Entry>,
}

impl PointIndex {
    pub fn new(points: impl IntoIterator<Item = (Location, usize)>) -> Self {
        let mut ids = Vec::new();
        let mut categories = Vec::new();
        let mut entries = Vec::new();
        for (i, (loc, cat)) in points.into_iter().enumerate() {
            ids.push(loc.id);
            categories.push(cat);
            entries.push(Entry::new([loc.x, loc.y], i));
        }
        Self {
            ids,
            categories,
            tree: RTree::bulk_load(entries),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `count` nearest points as `(slot, squared distance)`, ordered by
    /// distance then id.
    pub fn nearest(&self, x: f64, y: f64, count: usize) -> Vec<(usize, f64)> {
        let mut found: Vec<(usize, f64)> = Vec::with_capacity(count + 4);
        for (entry, d2) in self.tree.nearest_neighbor_iter_with_distance_2(&[x, y]) {
            if found.len() >= count && d2 > found[found.len() - 1].1 {
                break;
            }
            found.push((entry.data, d2));
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1).then(self.ids[a.0].cmp(&self.ids[b.0])));
        found.truncate(count);
        found
    }

    pub fn category(&self, slot: usize) -> usize {
        self.categories[slot]
    }

    pub fn id(&self, slot: usize) -> u64 {
        self.ids[slot]
    }

    /// Category of the nearest point, or `None` when empty.
    pub fn nearest_category(&self, x: f64, y: f64) -> Option<usize> {
        self.nearest(x, y, 1).first().map(|&(slot, _)| self.categories[slot])
    }
}

/// Outcome of checking a reported category against the parcel map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    /// The nearest parcel already agrees with the report.
    Congruent(usize),
    /// One of the next `k` nearest parcels agrees; the location takes its category.
    Reassigned(usize),
    /// No nearby parcel agrees: treated as a reporting error.
    Rejected,
}

impl Resolution {
    pub fn category(self) -> Option<usize> {
        match self {
            Resolution::Congruent(c) | Resolution::Reassigned(c) => Some(c),
            Resolution::Rejected => None,
        }
    }
}

/// The map `g(s)` from space to land-use categories, defined by the nearest
/// parcel centroid.
#[derive(Clone, Debug)]
pub struct LandUsePartition {
    q: usize,
    category_names: Vec<String>,
    parcels: Vec<Parcel>,
    index: PointIndex,
}

impl LandUsePartition {
    pub fn new(q: usize, parcels: Vec<Parcel>, category_names: Option<Vec<String>>) -> Result<Self> {
        if q == 0 {
            return Err(Error::Config("partition needs at least one category".into()));
        }
        let names = match category_names {
            Some(n) if n.len() != q => {
                return Err(Error::Config(format!(
                    "{} category names given for {q} categories",
                    n.len()
                )))
            }
            Some(n) => n,
            None if q == DEFAULT_CATEGORY_NAMES.len() => {
                DEFAULT_CATEGORY_NAMES.iter().map(|s| s.to_string()).collect()
            }
            None => (1..=q).map(|i| format!("category_{i}")).collect(),
        };
        for p in &parcels {
            if p.category >= q {
                return Err(Error::Config(format!(
                    "parcel {} has category {} outside 1..={q}",
                    p.centroid.id,
                    p.category + 1
                )));
            }
            if !p.centroid.is_finite() {
                return Err(Error::Config(format!(
                    "parcel {} has non-finite coordinates",
                    p.centroid.id
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = parcels.iter().find(|p| !seen.insert(p.centroid.id)) {
            return Err(Error::Config(format!("duplicate parcel id {}", dup.centroid.id)));
        }
        let index = PointIndex::new(parcels.iter().map(|p| (p.centroid, p.category)));
        Ok(Self {
            q,
            category_names: names,
            parcels,
            index,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn parcels(&self) -> &[Parcel] {
        &self.parcels
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    fn require_parcels(&self) -> Result<()> {
        if self.index.is_empty() {
            Err(Error::Config("land-use partition has no parcels".into()))
        } else {
            Ok(())
        }
    }

    /// Category of the parcel whose centroid is nearest to `loc`; ties go to
    /// the lowest parcel id.
    pub fn assign_category(&self, loc: &Location) -> Result<usize> {
        self.require_parcels()?;
        Ok(self.index.nearest_category(loc.x, loc.y).expect("non-empty index"))
    }

    /// Check `reported` against the nearest parcel and, failing that, the
    /// next `k` nearest parcels in order.
    pub fn resolve_incongruence(&self, loc: &Location, reported: usize, k: usize) -> Result<Resolution> {
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        self.require_parcels()?;
        let neighbours = self.index.nearest(loc.x, loc.y, k + 1);
        let nearest = self.index.category(neighbours[0].0);
        if nearest == reported {
            return Ok(Resolution::Congruent(nearest));
        }
        Ok(neighbours[1..]
            .iter()
            .map(|&(slot, _)| self.index.category(slot))
            .find(|&c| c == reported)
            .map_or(Resolution::Rejected, Resolution::Reassigned))
    }
}

/// Euclidean distance matrix.
pub fn pairwise_distances(locs: &[Location]) -> DMatrix<f64> {
    let n = locs.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = locs[i].distance(&locs[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}
