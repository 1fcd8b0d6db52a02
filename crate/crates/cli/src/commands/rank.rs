use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use scr_core::inference::FitResult;
use scr_core::model::FormulaSpec;
use scr_core::selection::{self, fit_catalogue, rank, Candidate, ModelCatalogue};

use super::{fit_options, Problem};
use crate::config::RunConfig;
use crate::output::{ensure_dir, print_stdout, write_csv_with, write_json, Provenance};

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Model catalogue overriding the config: a named map of formula triples.
    #[arg(long)]
    pub catalogue: Option<PathBuf>,
    /// Fit seed overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for ranking.csv and fits.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ModelFit<'a> {
    formula: FormulaSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<&'a FitResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct FitsArtifact<'a> {
    provenance: &'a Provenance,
    models: BTreeMap<&'a str, ModelFit<'a>>,
}

pub fn run(args: &RankArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(path) = &args.catalogue {
        cfg.catalogue = Some(
            path.canonicalize()
                .with_context(|| format!("file not found: {}", path.display()))?,
        );
    }
    let path = cfg
        .catalogue
        .clone()
        .context("no model catalogue: set `catalogue` in the config or pass --catalogue")?;
    let file = std::fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
    let catalogue = ModelCatalogue::from_json(file).with_context(|| format!("reading catalogue {}", path.display()))?;
    let problem = Problem::load(&cfg)?;
    catalogue.validate(&problem.registry)?;
    log::info!("fitting {} models", catalogue.models.len());

    let results = fit_catalogue(&catalogue, |f| problem.context(f), &fit_options(&cfg));
    let candidates: Vec<Candidate> = results
        .iter()
        .map(|(name, f, r)| Candidate::from_fit(name, f, r))
        .collect();
    let prov = Provenance::new("rank", Some(cfg.seed), &cfg)?;

    ensure_dir(&args.out)?;
    let models = results
        .iter()
        .map(|(name, f, r)| {
            let entry = ModelFit {
                formula: f.to_spec(),
                fit: r.as_ref().ok(),
                error: r.as_ref().err().map(|e| e.to_string()),
            };
            (name.as_str(), entry)
        })
        .collect();
    write_json(
        &args.out.join("fits.json"),
        &FitsArtifact {
            provenance: &prov,
            models,
        },
    )?;

    let table = rank(&candidates)?;
    write_csv_with(&args.out.join("ranking.csv"), &prov, |buf| {
        Ok(selection::write_csv(&table, buf)?)
    })?;
    print_stdout(&selection::render_text(&table))?;
    Ok(())
}
