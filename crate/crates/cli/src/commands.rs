//! Subcommand implementations. Each writes its artifacts to the output
//! directory together with `run_config.toml` (the effective configuration)
//! and `run_manifest.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use landuse_core::approx_map::{approx_predict, fit_map, initial_map_theta, MapFitResult};
use landuse_core::io::{self, CategoryMap, RatingsOptions};
use landuse_core::mcmc::{run_chain, ChainSummary, PosteriorDraws};
use landuse_core::predict::{posterior_mean_surface, waic, PredictionGrid, SurfaceOptions};
use landuse_core::simulation::{run_study, scenario_grid, simulate_data, summarize};
use landuse_core::{rng, LandUsePartition, RatingsDataset};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Overrides, RunConfig, Source};

pub const MANIFEST: &str = "run_manifest.json";
pub const EFFECTIVE_CONFIG: &str = "run_config.toml";
pub const DRAWS_CSV: &str = "draws.csv";
pub const DRAWS_BIN: &str = "draws.bin";
pub const SURFACE: &str = "surface.csv";
pub const WAIC_JSON: &str = "waic.json";
pub const WAIC_POINTWISE: &str = "waic_pointwise.csv";
pub const MAP_FIT: &str = "map_fit.json";
pub const REPLICATIONS: &str = "replications.csv";
pub const COMPARE_SUMMARY: &str = "compare_summary.json";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_file: &'a str,
    config_sha256: String,
    wall_time_secs: f64,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    chain: Option<ChainSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    chain_runtime_secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dropped_ratings: Option<usize>,
}

fn version() -> &'static str {
    option_env!("LANDUSE_GIT_DESCRIBE").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

struct Run<'a> {
    cfg: RunConfig,
    command: &'a str,
    outputs: Vec<String>,
    started: Instant,
    chain: Option<ChainSummary>,
    dropped: Option<usize>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let text = self.cfg.to_toml()?;
        std::fs::write(self.path(EFFECTIVE_CONFIG), &text)?;
        let manifest = Manifest {
            command: self.command,
            version: version(),
            seed: self.cfg.seed,
            config_file: EFFECTIVE_CONFIG,
            config_sha256: hex::encode(Sha256::digest(text.as_bytes())),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
            chain_runtime_secs: self.chain.as_ref().map(|c| c.runtime_secs),
            chain: self.chain,
            dropped_ratings: self.dropped,
        };
        let mut out = serde_json::to_string_pretty(&manifest)?;
        out.push('\n');
        std::fs::write(self.cfg.output_dir.join(MANIFEST), out)?;
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn require<'p>(p: &'p Option<PathBuf>, what: &str) -> Result<&'p Path> {
    p.as_deref().ok_or_else(|| anyhow!("no {what} file configured (set paths.{what})"))
}

fn load_partition(cfg: &RunConfig) -> Result<Option<LandUsePartition>> {
    let Some(parcels) = &cfg.paths.parcels else {
        return Ok(None);
    };
    let map = match &cfg.paths.category_map {
        Some(p) => CategoryMap::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => CategoryMap {
            q: cfg.q,
            ..CategoryMap::default()
        },
    };
    if map.q != cfg.q {
        bail!("category map has q = {} but the run uses q = {}", map.q, cfg.q);
    }
    let part = io::load_partition(open(parcels)?, &map).with_context(|| format!("in {}", parcels.display()))?;
    Ok(Some(part))
}

fn load_ratings(cfg: &RunConfig, partition: Option<&LandUsePartition>) -> Result<RatingsDataset> {
    let path = require(&cfg.paths.ratings, "ratings")?;
    let opts = RatingsOptions {
        levels: cfg.levels,
        q: cfg.q,
        reverse_scale: cfg.reverse_scale,
        incongruence_k: cfg.incongruence_k,
    };
    io::read_ratings(open(path)?, partition, &opts).with_context(|| format!("in {}", path.display()))
}

fn load_grid(cfg: &RunConfig, partition: Option<&LandUsePartition>) -> Result<PredictionGrid> {
    let path = require(&cfg.paths.grid, "grid")?;
    io::read_grid(open(path)?, partition, cfg.q).with_context(|| format!("in {}", path.display()))
}

fn load_draws(cfg: &RunConfig) -> Result<PosteriorDraws> {
    let path = require(&cfg.paths.draws, "draws")?;
    let draws = if path.extension().is_some_and(|e| e == "bin") {
        io::read_draws_bin(open(path)?)
    } else {
        io::read_draws_csv(open(path)?)
    };
    draws.with_context(|| format!("in {}", path.display()))
}

pub fn run(command: &str, config: Option<&Path>, ov: &Overrides) -> Result<()> {
    let cfg = RunConfig::load(config, ov)?;
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let mut run = Run {
        cfg,
        command,
        outputs: Vec::new(),
        started: Instant::now(),
        chain: None,
        dropped: None,
    };
    match command {
        "simulate" => simulate(&mut run)?,
        "fit-mcmc" => fit_mcmc(&mut run)?,
        "fit-map" => fit_map_cmd(&mut run)?,
        "predict" => predict(&mut run)?,
        "waic" => waic_cmd(&mut run)?,
        "compare" => compare(&mut run)?,
        other => bail!("unknown command {other}"),
    }
    run.finish()
}

/// Writes `ratings.csv` (training data), `grid.csv` and `truth.csv`.
fn simulate(run: &mut Run<'_>) -> Result<()> {
    let mut scenario = run.cfg.scenario.clone();
    scenario.field_seed = run.cfg.seed;
    scenario.validate()?;
    let grid = scenario_grid(&scenario)?;
    let data = simulate_data(&scenario, &grid, scenario.field_seed)?;
    let mut w = csv::Writer::from_writer(run.create("ratings.csv")?);
    w.write_record(["location_id", "x", "y", "rating", "category"])?;
    for (r, rating) in data.train.ratings().iter().enumerate() {
        let s = data.train.sites()[rating.site];
        w.write_record([
            s.loc.id.to_string(),
            s.loc.x.to_string(),
            s.loc.y.to_string(),
            data.train.level(r).to_string(),
            (s.category + 1).to_string(),
        ])?;
    }
    w.flush()?;
    io::write_grid(run.create("grid.csv")?, &grid)?;
    let mut w = csv::Writer::from_writer(run.create("truth.csv")?);
    w.write_record(["grid_id", "truth"])?;
    for (s, t) in grid.sites.iter().zip(&data.truth) {
        w.write_record([s.loc.id.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn fit_mcmc(run: &mut Run<'_>) -> Result<()> {
    let partition = load_partition(&run.cfg)?;
    let ds = load_ratings(&run.cfg, partition.as_ref())?;
    run.dropped = Some(ds.dropped);
    let mut rng = rng::stream(run.cfg.seed, "mcmc/chain");
    let draws = run_chain(&ds, &run.cfg.chain, &run.cfg.priors, None, &mut rng)?;
    io::write_draws_csv(run.create(DRAWS_CSV)?, &draws)?;
    io::write_draws_bin(run.create(DRAWS_BIN)?, &draws)?;
    log::info!(
        "stored {} draws; acceptance {:.3}",
        draws.len(),
        draws.summary.acceptance_rate
    );
    run.chain = Some(draws.summary);
    Ok(())
}

/// Writes `map_fit.json`, plus `surface.csv` when a grid is configured.
fn fit_map_cmd(run: &mut Run<'_>) -> Result<()> {
    let partition = load_partition(&run.cfg)?;
    let ds = load_ratings(&run.cfg, partition.as_ref())?;
    run.dropped = Some(ds.dropped);
    let init = initial_map_theta(&ds, run.cfg.model, &run.cfg.independent_components)?;
    let fit = fit_map(&ds, &init, &run.cfg.priors, &run.cfg.map)?;
    log::info!(
        "MAP log posterior {:.4} after {} iterations (converged: {})",
        fit.log_posterior,
        fit.iterations,
        fit.converged
    );
    run.write_json(MAP_FIT, &fit)?;
    if run.cfg.paths.grid.is_some() {
        let grid = load_grid(&run.cfg, partition.as_ref())?;
        let surface = approx_predict(&fit, &ds, &grid, run.cfg.predict.with_sd)?;
        io::write_surface(run.create(SURFACE)?, &grid, &surface)?;
    }
    Ok(())
}

fn predict(run: &mut Run<'_>) -> Result<()> {
    let partition = load_partition(&run.cfg)?;
    let ds = load_ratings(&run.cfg, partition.as_ref())?;
    let grid = load_grid(&run.cfg, partition.as_ref())?;
    grid.check_disjoint(&ds)?;
    let surface = match run.cfg.predict.source {
        Source::Map => {
            let path = require(&run.cfg.paths.map_fit, "map_fit")?;
            let fit: MapFitResult =
                serde_json::from_reader(open(path)?).with_context(|| format!("in {}", path.display()))?;
            approx_predict(&fit, &ds, &grid, run.cfg.predict.with_sd)?
        }
        Source::Mcmc => {
            let draws = load_draws(&run.cfg)?.thinned(run.cfg.predict.thin);
            let opts = SurfaceOptions {
                block_size: run.cfg.predict.block_size,
                with_sd: run.cfg.predict.with_sd,
            };
            posterior_mean_surface(&draws, &ds, &grid, &opts)?
        }
    };
    io::write_surface(run.create(SURFACE)?, &grid, &surface)?;
    Ok(())
}

#[derive(Serialize)]
struct WaicOutput<'a> {
    #[serde(flatten)]
    report: &'a landuse_core::predict::WaicReport,
    model: landuse_core::ModelKind,
    pointwise_table: &'a str,
}

fn waic_cmd(run: &mut Run<'_>) -> Result<()> {
    let partition = load_partition(&run.cfg)?;
    let ds = load_ratings(&run.cfg, partition.as_ref())?;
    let draws = load_draws(&run.cfg)?.thinned(run.cfg.waic.thin);
    let report = waic(&draws, &ds, run.cfg.seed)?;
    log::info!("WAIC {:.4} (lppd {:.4}, p_waic {:.4})", report.waic, report.lppd, report.p_waic);
    io::write_waic_pointwise(run.create(WAIC_POINTWISE)?, &report)?;
    let out = WaicOutput {
        report: &report,
        model: draws.kind,
        pointwise_table: WAIC_POINTWISE,
    };
    run.write_json(WAIC_JSON, &out)
}

fn compare(run: &mut Run<'_>) -> Result<()> {
    let mut scenario = run.cfg.scenario.clone();
    scenario.field_seed = run.cfg.seed;
    let results = run_study(&scenario)?;
    io::write_rows(run.create(REPLICATIONS)?, &results)?;
    let summary = summarize(&results)?;
    log::info!(
        "filter wins: MAE {:.3}, Pearson {:.3} over {} replications",
        summary.mae_win_rate,
        summary.pearson_win_rate,
        summary.replications - summary.excluded
    );
    run.write_json(COMPARE_SUMMARY, &summary)
}
