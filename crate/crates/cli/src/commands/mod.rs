pub mod covariate;
pub mod fit;
pub mod predict;
pub mod rank;
pub mod simulate;
pub mod summary;

use anyhow::{bail, Context, Result};

use scr_core::covariates::table::read_covariate_csv;
use scr_core::covariates::{CovariateRegistry, CovariateSurface, Dims, Scope};
use scr_core::encounters::{ingest_encounters, read_encounter_csv, EncounterData, IngestOptions};
use scr_core::geometry::{build_state_space, StateSpace, TrapArray};
use scr_core::inference::FitOptions;
use scr_core::likelihood::LikelihoodContext;
use scr_core::model::{build_design, DesignOptions, ModelFormula};

use crate::config::RunConfig;

/// Traps and the state space built around them.
pub struct Geometry {
    pub traps: TrapArray,
    pub space: StateSpace,
}

impl Geometry {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let traps = TrapArray::read_csv_path(&cfg.traps, cfg.origin)
            .with_context(|| format!("reading traps {}", cfg.traps.display()))?;
        let (space, _) = build_state_space(&traps, cfg.statespace.buffer, cfg.statespace.spacing)?;
        Ok(Self { traps, space })
    }

    pub fn trap_ids(&self) -> Vec<String> {
        self.traps.traps().iter().map(|t| t.id.clone()).collect()
    }
}

/// Everything a fit needs apart from the formula.
pub struct Problem {
    pub geometry: Geometry,
    pub data: EncounterData,
    pub registry: CovariateRegistry,
    pub dims: Dims,
    pub standardize: bool,
}

impl Problem {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let geometry = Geometry::load(cfg)?;
        let path = cfg.encounters()?;
        let file = std::fs::File::open(path).with_context(|| format!("cannot open encounters {}", path.display()))?;
        let records = read_encounter_csv(file).with_context(|| format!("reading encounters {}", path.display()))?;
        let opts = IngestOptions {
            n_occasions: cfg.occasions,
            n_sessions: cfg.sessions,
        };
        let data = ingest_encounters(&records, &geometry.traps, &opts)
            .with_context(|| format!("ingesting {}", path.display()))?;
        let dims = Dims {
            n_points: geometry.space.len(),
            n_traps: geometry.traps.len(),
            n_occasions: data.n_occasions(),
            n_sessions: data.n_sessions(),
        };
        let registry = load_registry(cfg, &geometry, &dims)?;
        log::info!(
            "{} traps, {} state-space points, {} sessions x {} occasions, detected per session {:?}",
            dims.n_traps,
            dims.n_points,
            dims.n_sessions,
            dims.n_occasions,
            data.n_per_session()
        );
        Ok(Self {
            geometry,
            data,
            registry,
            dims,
            standardize: cfg.standardize,
        })
    }

    pub fn context(&self, formula: &ModelFormula) -> scr_core::Result<LikelihoodContext> {
        let design = build_design(
            formula,
            &self.registry,
            self.dims,
            DesignOptions {
                standardize: self.standardize,
            },
        )?;
        LikelihoodContext::new(design, self.data.clone(), &self.geometry.traps, &self.geometry.space)
    }
}

/// Trap-file columns plus every covariate table, rejecting a name defined
/// twice on the same scope.
pub fn load_registry(cfg: &RunConfig, geometry: &Geometry, dims: &Dims) -> Result<CovariateRegistry> {
    let mut registry = CovariateRegistry::new();
    let mut add = |s: CovariateSurface, source: &str| -> Result<()> {
        if registry.scopes(&s.name).contains(&s.scope) {
            bail!(
                "covariate `{}` ({} scope) is defined twice; second definition in {source}",
                s.name,
                s.scope
            );
        }
        registry.insert(s);
        Ok(())
    };
    for (name, values) in &geometry.traps.covariates {
        add(
            CovariateSurface::new(name, Scope::Trap, values.clone())?,
            "the trap file",
        )?;
    }
    let ids = geometry.trap_ids();
    for path in &cfg.covariates {
        let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        let surfaces =
            read_covariate_csv(file, dims, &ids).with_context(|| format!("reading covariates {}", path.display()))?;
        for s in surfaces {
            add(s, &path.display().to_string())?;
        }
    }
    Ok(registry)
}

pub fn fit_options(cfg: &RunConfig) -> FitOptions {
    FitOptions {
        n_starts: cfg.n_starts,
        seed: cfg.seed,
        ..Default::default()
    }
}
