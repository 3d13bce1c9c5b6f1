//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use landuse_core::approx_map::MapConfig;
use landuse_core::mcmc::ChainConfig;
use landuse_core::simulation::SimScenario;
use landuse_core::{ModelKind, Priors};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub ratings: Option<PathBuf>,
    pub parcels: Option<PathBuf>,
    pub category_map: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    /// Posterior draws, `.bin` for the binary format and CSV otherwise.
    pub draws: Option<PathBuf>,
    pub map_fit: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Mcmc,
    Map,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSettings {
    pub source: Source,
    pub with_sd: bool,
    pub block_size: usize,
    /// Use every `thin`-th stored draw.
    pub thin: usize,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self {
            source: Source::Mcmc,
            with_sd: false,
            block_size: landuse_core::predict::DEFAULT_BLOCK_SIZE,
            thin: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaicSettings {
    pub thin: usize,
}

impl Default for WaicSettings {
    fn default() -> Self {
        Self { thin: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub levels: usize,
    pub q: usize,
    pub reverse_scale: bool,
    pub incongruence_k: usize,
    /// One-based categories with a spatially independent component.
    pub independent_components: Vec<usize>,
    pub output_dir: PathBuf,
    pub paths: Paths,
    pub priors: Priors,
    pub chain: ChainConfig,
    pub map: MapConfig,
    pub predict: PredictSettings,
    pub waic: WaicSettings,
    pub scenario: SimScenario,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Filter,
            seed: 0,
            levels: 5,
            q: 3,
            reverse_scale: false,
            incongruence_k: landuse_core::io::DEFAULT_INCONGRUENCE_K,
            independent_components: Vec::new(),
            output_dir: PathBuf::from("."),
            paths: Paths::default(),
            priors: Priors::default(),
            chain: ChainConfig::default(),
            map: MapConfig::default(),
            predict: PredictSettings::default(),
            waic: WaicSettings::default(),
            scenario: SimScenario::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub thin: Option<usize>,
    pub burn_in: Option<usize>,
    pub iters: Option<usize>,
    pub reverse_scale: bool,
    pub output_dir: Option<PathBuf>,
    pub source: Option<Source>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).context("invalid run configuration")
    }

    /// Load `path` (or defaults), resolve relative paths against its
    /// directory, then apply the overrides.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let mut cfg = Self::parse(&text).with_context(|| format!("in {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new("."));
                for f in [
                    &mut cfg.paths.ratings,
                    &mut cfg.paths.parcels,
                    &mut cfg.paths.category_map,
                    &mut cfg.paths.grid,
                    &mut cfg.paths.draws,
                    &mut cfg.paths.map_fit,
                ] {
                    resolve(base, f);
                }
                if cfg.output_dir.is_relative() {
                    cfg.output_dir = base.join(&cfg.output_dir);
                }
                cfg
            }
            None => Self::default(),
        };
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(m) = ov.model {
            cfg.model = m;
        }
        if let Some(t) = ov.thin {
            cfg.chain.thin = t;
        }
        if let Some(b) = ov.burn_in {
            cfg.chain.burn_in = b;
        }
        if let Some(i) = ov.iters {
            cfg.chain.n_iter = i;
        }
        if ov.reverse_scale {
            cfg.reverse_scale = true;
        }
        if let Some(d) = &ov.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = ov.source {
            cfg.predict.source = s;
        }
        // The top-level model, seed and component choices drive every stage.
        cfg.chain.model_kind = cfg.model;
        cfg.chain.seed = cfg.seed;
        cfg.chain.independent_components = cfg.independent_components.clone();
        cfg.map.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            bail!("levels must be at least 2");
        }
        if self.q == 0 {
            bail!("q must be at least 1");
        }
        if self.predict.thin == 0 || self.waic.thin == 0 {
            bail!("thin must be at least 1");
        }
        self.priors.validate()?;
        self.chain.validate()?;
        self.map.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing run configuration")
    }
}
