//! Run configuration: a strict JSON schema whose paths are resolved against
//! the config file's directory and checked when loaded.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use scr_core::geometry::GeoPoint;
use scr_core::model::{FormulaSpec, ModelFormula};

/// A model given either as `"D~a; p0~1; sigma~session"` or as a formula triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Text(String),
    Triple(FormulaSpec),
}

impl ModelSpec {
    pub fn formula(&self) -> scr_core::Result<ModelFormula> {
        match self {
            ModelSpec::Text(t) => ModelFormula::parse(t),
            ModelSpec::Triple(s) => ModelFormula::from_spec(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpaceConfig {
    /// Metres added around the trap bounding box.
    pub buffer: f64,
    /// Lattice spacing in metres.
    pub spacing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdwConfig {
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default = "default_k")]
    pub k_neighbors: usize,
}

impl Default for IdwConfig {
    fn default() -> Self {
        Self {
            power: default_power(),
            k_neighbors: default_k(),
        }
    }
}

fn default_power() -> f64 {
    2.0
}
fn default_k() -> usize {
    12
}
fn default_true() -> bool {
    true
}
fn default_starts() -> usize {
    3
}
fn default_level() -> f64 {
    0.95
}
fn default_alpha() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub traps: PathBuf,
    #[serde(default)]
    pub encounters: Option<PathBuf>,
    /// Covariate tables; the scope of each is read from its header.
    #[serde(default)]
    pub covariates: Vec<PathBuf>,
    #[serde(default)]
    pub graph: Option<PathBuf>,
    #[serde(default)]
    pub posts: Option<PathBuf>,
    /// Named map of formula triples for `rank`.
    #[serde(default)]
    pub catalogue: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub statespace: StateSpaceConfig,
    /// Projection origin for lon/lat traps; the trap centroid when absent.
    #[serde(default)]
    pub origin: Option<GeoPoint>,
    /// Session count; inferred from the encounters when absent.
    #[serde(default)]
    pub sessions: Option<usize>,
    /// Occasions per session; inferred from the encounters when absent.
    #[serde(default)]
    pub occasions: Option<usize>,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_starts")]
    pub n_starts: usize,
    #[serde(default = "default_level")]
    pub interval_level: f64,
    /// Centrality tuning values.
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
    /// UTC offset for posting-rhythm bins, e.g. `-06:00`.
    #[serde(default)]
    pub timezone: Option<String>,
    #[serde(default)]
    pub idw: IdwConfig,
}

fn resolve(base: &Path, p: &Path) -> Result<PathBuf> {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !joined.exists() {
        bail!("file not found: {}", joined.display());
    }
    joined
        .canonicalize()
        .with_context(|| format!("cannot resolve {}", joined.display()))
}

impl RunConfig {
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).context("invalid run config")?;
        cfg.traps = resolve(base, &cfg.traps)?;
        for p in [&mut cfg.encounters, &mut cfg.graph, &mut cfg.posts, &mut cfg.catalogue]
            .into_iter()
            .flatten()
        {
            *p = resolve(base, p)?;
        }
        for p in &mut cfg.covariates {
            *p = resolve(base, p)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base).with_context(|| format!("in config {}", path.display()))
    }

    fn validate(&self) -> Result<()> {
        if !(self.statespace.buffer > 0.0 && self.statespace.spacing > 0.0) {
            bail!("statespace buffer and spacing must be positive");
        }
        if self.n_starts == 0 {
            bail!("n_starts must be at least 1");
        }
        if !(self.interval_level > 0.0 && self.interval_level < 1.0) {
            bail!("interval_level must lie in (0, 1), got {}", self.interval_level);
        }
        if let Some(o) = self.origin {
            GeoPoint::new(o.lon, o.lat)?;
        }
        if let Some(m) = &self.model {
            m.formula()?;
        }
        Ok(())
    }

    pub fn encounters(&self) -> Result<&Path> {
        self.encounters
            .as_deref()
            .context("the config has no `encounters` file")
    }

    pub fn formula(&self, override_text: Option<&str>) -> Result<ModelFormula> {
        match (override_text, &self.model) {
            (Some(t), _) => Ok(ModelFormula::parse(t)?),
            (None, Some(m)) => Ok(m.formula()?),
            (None, None) => bail!("no model given: set `model` in the config or pass --model"),
        }
    }
}
