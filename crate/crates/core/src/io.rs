//! File formats: parcel and ratings CSVs, the tax-code category map, grids,
//! posterior draws (CSV and a compact binary form) and result tables.
//!
//! Every reader either returns a validated value or an error that names the
//! offending line.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::covariance::{CovParams, Decay, FilterCovParams, ModelKind, StationaryCovParams};
use crate::dataset::{Rating, RatingsDataset, Site};
use crate::error::{Error, Result};
use crate::mcmc::{ChainSummary, Draw, PosteriorDraws};
use crate::partition::{LandUsePartition, Location, Parcel, Resolution};
use crate::predict::{LatentSurface, PredictionGrid, WaicReport};

/// Parcels beyond the nearest one consulted when a reported category disagrees.
pub const DEFAULT_INCONGRUENCE_K: usize = 5;

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).flexible(true).from_reader(input)
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(line, e.to_string())
}

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::parse(1, format!("expected header starting with {}", expected.join(","))));
    }
    Ok(())
}

fn field<'r>(rec: &'r csv::StringRecord, i: usize, name: &str) -> Result<&'r str> {
    rec.get(i).ok_or_else(|| Error::parse(line_of(rec), format!("missing {name}")))
}

fn parse_f64(rec: &csv::StringRecord, i: usize, name: &str) -> Result<f64> {
    let s = field(rec, i, name)?;
    let v: f64 = s.parse().map_err(|_| Error::parse(line_of(rec), format!("{name} {s:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line_of(rec), format!("{name} must be finite")));
    }
    Ok(v)
}

fn parse_u64(rec: &csv::StringRecord, i: usize, name: &str) -> Result<u64> {
    let s = field(rec, i, name)?;
    s.parse().map_err(|_| Error::parse(line_of(rec), format!("{name} {s:?} is not a non-negative integer")))
}

/// Optional one-based category; returns it zero-based.
fn parse_category(rec: &csv::StringRecord, i: usize) -> Result<Option<usize>> {
    match rec.get(i) {
        None | Some("") => Ok(None),
        Some(s) => match s.parse::<usize>() {
            Ok(c) if c >= 1 => Ok(Some(c - 1)),
            _ => Err(Error::parse(line_of(rec), format!("category {s:?} is not an integer >= 1"))),
        },
    }
}

/// Tax-code to category assignments.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub q: usize,
    #[serde(default)]
    pub names: Option<Vec<String>>,
    /// One-based categories keyed by tax code.
    #[serde(default)]
    pub tax_codes: BTreeMap<String, usize>,
}

impl CategoryMap {
    pub fn parse(text: &str) -> Result<Self> {
        let map: CategoryMap = toml::from_str(text).map_err(|e| Error::Config(format!("category map: {e}")))?;
        if map.q == 0 {
            return Err(Error::Config("category map: q must be at least 1".into()));
        }
        if let Some(n) = &map.names {
            if n.len() != map.q {
                return Err(Error::Config(format!("category map: {} names for q = {}", n.len(), map.q)));
            }
        }
        if let Some((code, &c)) = map.tax_codes.iter().find(|(_, &c)| c == 0 || c > map.q) {
            return Err(Error::Config(format!("category map: tax code {code} maps to {c}, outside 1..={}", map.q)));
        }
        Ok(map)
    }

    /// Zero-based category of a tax code.
    pub fn category(&self, tax_code: &str) -> Option<usize> {
        self.tax_codes.get(tax_code).map(|c| c - 1)
    }
}

/// Parcels from CSV `parcel_id,x,y,tax_code,category`. An empty category is
/// looked up in `map` by tax code.
pub fn read_parcels<R: Read>(input: R, map: Option<&CategoryMap>) -> Result<Vec<Parcel>> {
    let mut rdr = csv_reader(input);
    check_header(rdr.headers().map_err(csv_err)?, &["parcel_id", "x", "y", "tax_code", "category"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        let id = parse_u64(&rec, 0, "parcel_id")?;
        let x = parse_f64(&rec, 1, "x")?;
        let y = parse_f64(&rec, 2, "y")?;
        let tax_code = field(&rec, 3, "tax_code")?.to_string();
        let category = match parse_category(&rec, 4)? {
            Some(c) => c,
            None => map
                .and_then(|m| m.category(&tax_code))
                .ok_or_else(|| Error::parse(line, format!("no category for tax code {tax_code:?}")))?,
        };
        if let Some(m) = map {
            if category >= m.q {
                return Err(Error::parse(line, format!("category {} outside 1..={}", category + 1, m.q)));
            }
        }
        out.push(Parcel {
            centroid: Location::new(id, x, y),
            tax_code,
            category,
        });
    }
    Ok(out)
}

/// Parcels plus category map into a partition.
pub fn load_partition<R: Read>(parcels: R, map: &CategoryMap) -> Result<LandUsePartition> {
    LandUsePartition::new(map.q, read_parcels(parcels, Some(map))?, map.names.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatingsOptions {
    pub levels: usize,
    pub q: usize,
    /// Recode `level -> K + 1 - level` before validation.
    pub reverse_scale: bool,
    pub incongruence_k: usize,
}

impl Default for RatingsOptions {
    fn default() -> Self {
        Self {
            levels: 5,
            q: 3,
            reverse_scale: false,
            incongruence_k: DEFAULT_INCONGRUENCE_K,
        }
    }
}

/// Ratings from CSV `location_id,x,y,rating,category[,cov_1..cov_p]`.
///
/// A missing category is assigned from `partition`. A reported category is
/// checked against the partition when one is given; rows the check rejects
/// are dropped and counted in [`RatingsDataset::dropped`].
pub fn read_ratings<R: Read>(input: R, partition: Option<&LandUsePartition>, opts: &RatingsOptions) -> Result<RatingsDataset> {
    if let Some(p) = partition {
        if p.q() != opts.q {
            return Err(Error::Config(format!("partition has {} categories, expected {}", p.q(), opts.q)));
        }
    }
    let mut rdr = csv_reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    check_header(&headers, &["location_id", "x", "y", "rating", "category"])?;
    let p = headers.len() - 5;
    let mut sites: Vec<Site> = Vec::new();
    let mut by_id: HashMap<u64, usize> = HashMap::new();
    let mut ratings = Vec::new();
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        if rec.len() != headers.len() {
            return Err(Error::parse(line, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let id = parse_u64(&rec, 0, "location_id")?;
        let loc = Location::new(id, parse_f64(&rec, 1, "x")?, parse_f64(&rec, 2, "y")?);
        let raw = parse_u64(&rec, 3, "rating")? as usize;
        if !(1..=opts.levels).contains(&raw) {
            return Err(Error::parse(line, format!("rating {raw} outside 1..={}", opts.levels)));
        }
        let level = if opts.reverse_scale { opts.levels + 1 - raw } else { raw };
        let reported = parse_category(&rec, 4)?;
        if let Some(c) = reported {
            if c >= opts.q {
                return Err(Error::parse(line, format!("category {} outside 1..={}", c + 1, opts.q)));
            }
        }
        let category = match (reported, partition) {
            (Some(c), None) => c,
            (None, Some(part)) => part.assign_category(&loc)?,
            (None, None) => return Err(Error::parse(line, "category missing and no parcel map given")),
            (Some(c), Some(part)) => match part.resolve_incongruence(&loc, c, opts.incongruence_k)? {
                Resolution::Congruent(c) | Resolution::Reassigned(c) => c,
                Resolution::Rejected => {
                    dropped += 1;
                    continue;
                }
            },
        };
        let covariates = (0..p).map(|j| parse_f64(&rec, 5 + j, &headers[5 + j])).collect::<Result<Vec<_>>>()?;
        let site = match by_id.get(&id) {
            Some(&s) => {
                let known = sites[s];
                if known.loc.x != loc.x || known.loc.y != loc.y {
                    return Err(Error::parse(line, format!("location {id} repeated with different coordinates")));
                }
                if known.category != category {
                    return Err(Error::parse(line, format!("location {id} repeated with a different category")));
                }
                s
            }
            None => {
                sites.push(Site::new(loc, category));
                by_id.insert(id, sites.len() - 1);
                sites.len() - 1
            }
        };
        ratings.push(Rating { site, level, covariates });
    }
    if dropped > 0 {
        log::info!("dropped {dropped} ratings whose category disagrees with the parcel map");
    }
    let mut ds = RatingsDataset::new(sites, ratings, opts.levels, opts.q)?;
    ds.dropped = dropped;
    Ok(ds)
}

/// Prediction grid from CSV `grid_id,x,y[,category]`.
pub fn read_grid<R: Read>(input: R, partition: Option<&LandUsePartition>, q: usize) -> Result<PredictionGrid> {
    let mut rdr = csv_reader(input);
    check_header(rdr.headers().map_err(csv_err)?, &["grid_id", "x", "y"])?;
    let mut sites = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        let loc = Location::new(parse_u64(&rec, 0, "grid_id")?, parse_f64(&rec, 1, "x")?, parse_f64(&rec, 2, "y")?);
        if !seen.insert(loc.id) {
            return Err(Error::parse(line, format!("duplicate grid id {}", loc.id)));
        }
        let category = match (parse_category(&rec, 3)?, partition) {
            (Some(c), _) if c >= q => return Err(Error::parse(line, format!("category {} outside 1..={q}", c + 1))),
            (Some(c), _) => c,
            (None, Some(part)) => part.assign_category(&loc)?,
            (None, None) => return Err(Error::parse(line, "category missing and no parcel map given")),
        };
        sites.push(Site::new(loc, category));
    }
    PredictionGrid::new(sites, q)
}

pub fn write_grid<W: Write>(out: W, grid: &PredictionGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["grid_id", "x", "y", "category"]).map_err(csv_err)?;
    for s in &grid.sites {
        w.write_record([s.loc.id.to_string(), s.loc.x.to_string(), s.loc.y.to_string(), (s.category + 1).to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Column structure of a draw table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DrawLayout {
    pub kind: ModelKind,
    pub p: usize,
    pub q: usize,
    pub levels: usize,
    pub n_latent: usize,
}

impl DrawLayout {
    pub fn of(draws: &PosteriorDraws) -> Self {
        Self {
            kind: draws.kind,
            p: draws.p,
            q: draws.q,
            levels: draws.levels,
            n_latent: draws.draws.first().and_then(|d| d.z.as_ref()).map_or(0, |z| z.len()),
        }
    }

    pub fn columns(&self) -> Vec<String> {
        let mut c = vec!["iter".to_string()];
        c.extend((1..=self.p).map(|i| format!("beta[{i}]")));
        c.extend((1..=self.q).map(|i| format!("delta[{i}]")));
        match self.kind {
            ModelKind::Filter => {
                for i in 1..=self.q {
                    for j in 1..=i {
                        c.push(format!("A[{i},{j}]"));
                    }
                }
                c.extend((1..=self.q).map(|i| format!("phi[{i}]")));
                c.extend((1..=self.q).map(|i| format!("sigma2[{i}]")));
            }
            ModelKind::Stationary => c.extend(["phi".to_string(), "tau2".to_string(), "scale".to_string()]),
        }
        c.extend((1..self.levels).map(|i| format!("gamma[{i}]")));
        c.extend((1..=self.n_latent).map(|i| format!("z[{i}]")));
        c
    }

    /// Recover the layout from column names; they must match [`DrawLayout::columns`] exactly.
    pub fn from_columns(cols: &[String]) -> Result<Self> {
        let count = |prefix: &str| cols.iter().filter(|c| c.starts_with(prefix)).count();
        let kind = if cols.iter().any(|c| c.starts_with("A[")) {
            ModelKind::Filter
        } else {
            ModelKind::Stationary
        };
        let q = count("delta[");
        let layout = Self {
            kind,
            p: count("beta["),
            q,
            levels: count("gamma[") + 1,
            n_latent: count("z["),
        };
        if q == 0 || layout.columns() != cols {
            return Err(Error::parse(1, "unrecognized draw column layout"));
        }
        Ok(layout)
    }

    pub fn encode(&self, d: &Draw) -> Vec<f64> {
        let mut row = vec![d.iter as f64];
        row.extend(&d.beta);
        row.extend(&d.delta);
        match &d.theta {
            CovParams::Filter(p) => {
                for i in 0..self.q {
                    for j in 0..=i {
                        row.push(p.a()[(i, j)]);
                    }
                }
                row.extend(p.phi().iter().map(|v| v.as_f64()));
                row.extend(p.sigma2());
            }
            CovParams::Stationary(p) => row.extend([p.phi, p.tau2, p.scale]),
        }
        row.extend(&d.gamma);
        if let Some(z) = &d.z {
            row.extend(z);
        }
        row
    }

    pub fn decode(&self, row: &[f64]) -> Result<Draw> {
        if row.len() != self.columns().len() {
            return Err(Error::Argument("draw row has the wrong length".into()));
        }
        let mut it = row.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let iter = take(1)[0];
        if !(iter >= 0.0 && iter.fract() == 0.0 && iter < 9.0e15) {
            return Err(Error::Argument(format!("invalid iteration index {iter}")));
        }
        let beta = take(self.p);
        let delta = take(self.q);
        let theta = match self.kind {
            ModelKind::Filter => {
                let q = self.q;
                let tri = take(q * (q + 1) / 2);
                let mut a = nalgebra::DMatrix::zeros(q, q);
                let mut k = 0;
                for i in 0..q {
                    for j in 0..=i {
                        a[(i, j)] = tri[k];
                        k += 1;
                    }
                }
                let phi = take(q).into_iter().map(Decay::from_f64).collect();
                CovParams::Filter(FilterCovParams::new(a, phi, take(q))?)
            }
            ModelKind::Stationary => {
                let v = take(3);
                CovParams::Stationary(StationaryCovParams::with_scale(v[0], v[1], v[2])?)
            }
        };
        let gamma = take(self.levels - 1);
        crate::ordinal::CutPoints::new(gamma.clone())?;
        let z = (self.n_latent > 0).then(|| take(self.n_latent));
        if beta.iter().chain(&delta).chain(z.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite coefficient or latent value".into()));
        }
        Ok(Draw {
            iter: iter as usize,
            beta,
            delta,
            theta,
            gamma,
            z,
        })
    }
}

fn check_uniform(draws: &PosteriorDraws, layout: &DrawLayout) -> Result<()> {
    let width = layout.columns().len();
    for d in &draws.draws {
        if d.theta.kind() != draws.kind || layout.encode(d).len() != width {
            return Err(Error::Argument(format!("draw at iteration {} does not match the table layout", d.iter)));
        }
    }
    Ok(())
}

/// One draw per line; floats use the shortest representation that parses
/// back to the same bits.
pub fn write_draws_csv<W: Write>(out: W, draws: &PosteriorDraws) -> Result<()> {
    let layout = DrawLayout::of(draws);
    check_uniform(draws, &layout)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(layout.columns()).map_err(csv_err)?;
    for d in &draws.draws {
        w.write_record(layout.encode(d).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws_csv<R: Read>(input: R) -> Result<PosteriorDraws> {
    let mut rdr = csv_reader(input);
    let cols: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let layout = DrawLayout::from_columns(&cols)?;
    let mut draws = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        if rec.len() != cols.len() {
            return Err(Error::parse(line, format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::parse(line, format!("{s:?} is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        draws.push(layout.decode(&row).map_err(|e| Error::parse(line, e.to_string()))?);
    }
    Ok(PosteriorDraws {
        kind: layout.kind,
        q: layout.q,
        p: layout.p,
        levels: layout.levels,
        draws,
        summary: ChainSummary::default(),
    })
}

/// Magic bytes opening a binary draw file.
pub const DRAWS_MAGIC: &[u8; 8] = b"LUDRAWS\0";
pub const DRAWS_VERSION: u32 = 1;
const MAX_COLUMNS: usize = 1 << 20;
const MAX_NAME_LEN: usize = 256;

/// Binary draws: magic, `u32` version, `u32` column count, each column name
/// as `u32` length plus UTF-8 bytes, `u64` row count, then the rows as
/// little-endian `f64`s.
pub fn write_draws_bin<W: Write>(mut out: W, draws: &PosteriorDraws) -> Result<()> {
    let layout = DrawLayout::of(draws);
    check_uniform(draws, &layout)?;
    let cols = layout.columns();
    out.write_all(DRAWS_MAGIC)?;
    out.write_all(&DRAWS_VERSION.to_le_bytes())?;
    out.write_all(&(cols.len() as u32).to_le_bytes())?;
    for c in &cols {
        out.write_all(&(c.len() as u32).to_le_bytes())?;
        out.write_all(c.as_bytes())?;
    }
    out.write_all(&(draws.len() as u64).to_le_bytes())?;
    for d in &draws.draws {
        for v in layout.encode(d) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Argument(format!("binary draws truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_draws_bin(bytes: &[u8]) -> Result<PosteriorDraws> {
    let mut cur = ByteCursor { buf: bytes, pos: 0 };
    if cur.take(8)? != DRAWS_MAGIC {
        return Err(Error::Argument("not a binary draw file".into()));
    }
    let version = cur.u32()?;
    if version != DRAWS_VERSION {
        return Err(Error::Argument(format!("unsupported binary draw version {version}")));
    }
    let ncols = cur.u32()? as usize;
    if ncols == 0 || ncols > MAX_COLUMNS {
        return Err(Error::Argument(format!("implausible column count {ncols}")));
    }
    let mut cols = Vec::with_capacity(ncols.min(1024));
    for _ in 0..ncols {
        let len = cur.u32()? as usize;
        if len > MAX_NAME_LEN {
            return Err(Error::Argument("column name too long".into()));
        }
        let name = std::str::from_utf8(cur.take(len)?).map_err(|_| Error::Argument("column name is not UTF-8".into()))?;
        cols.push(name.to_string());
    }
    let layout = DrawLayout::from_columns(&cols)?;
    let nrows = cur.u64()?;
    let remaining = (bytes.len() - cur.pos) as u64;
    if nrows.checked_mul(ncols as u64 * 8) != Some(remaining) {
        return Err(Error::Argument(format!("binary draws: {remaining} data bytes do not hold {nrows} rows")));
    }
    let mut draws = Vec::with_capacity(nrows as usize);
    let mut row = vec![0.0; ncols];
    for r in 0..nrows as usize {
        for v in row.iter_mut() {
            *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        }
        draws.push(layout.decode(&row).map_err(|e| Error::Argument(format!("row {}: {e}", r + 1)))?);
    }
    Ok(PosteriorDraws {
        kind: layout.kind,
        q: layout.q,
        p: layout.p,
        levels: layout.levels,
        draws,
        summary: ChainSummary::default(),
    })
}

pub fn read_draws_bin<R: Read>(mut input: R) -> Result<PosteriorDraws> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_draws_bin(&bytes)
}

/// CSV `grid_id,x,y,category,posterior_mean[,posterior_sd]`.
pub fn write_surface<W: Write>(out: W, grid: &PredictionGrid, surface: &LatentSurface) -> Result<()> {
    if surface.mean.len() != grid.len() || surface.sd.as_ref().is_some_and(|s| s.len() != grid.len()) {
        return Err(Error::Argument("surface length does not match the grid".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["grid_id", "x", "y", "category", "posterior_mean"];
    if surface.sd.is_some() {
        header.push("posterior_sd");
    }
    w.write_record(&header).map_err(csv_err)?;
    for (i, s) in grid.sites.iter().enumerate() {
        let mut rec = vec![
            s.loc.id.to_string(),
            s.loc.x.to_string(),
            s.loc.y.to_string(),
            (s.category + 1).to_string(),
            surface.mean[i].to_string(),
        ];
        if let Some(sd) = &surface.sd {
            rec.push(sd[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-rating WAIC contributions, CSV `rating,lppd,p_waic` (ratings one-based).
pub fn write_waic_pointwise<W: Write>(out: W, report: &WaicReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rating", "lppd", "p_waic"]).map_err(csv_err)?;
    for p in &report.pointwise {
        w.write_record([(p.rating + 1).to_string(), p.lppd.to_string(), p.p_waic.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Any serializable rows as CSV with a header.
pub fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>> {
    let mut rdr = csv_reader(input);
    rdr.deserialize().map(|r| r.map_err(csv_err)).collect()
}
