use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use scr_core::inference::{
    self, density_extremes, derived_home_range, predict_density, write_wald_csv, FitResult, M2_PER_KM2,
};
use scr_core::model::{FormulaSpec, ModelFormula};
use scr_core::simulate::session_lambdas;

use super::{fit_options, Problem};
use crate::config::RunConfig;
use crate::error::ModelFailure;
use crate::output::{ensure_dir, write_csv_with, write_json, Provenance};

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Formula overriding the config, e.g. "D~hab; p0~session; sigma~1".
    #[arg(long)]
    pub model: Option<String>,
    /// Fit seed overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for fit.json, wald.csv and derived.csv.
    #[arg(long)]
    pub out: PathBuf,
}

/// Per-session quantities derived from the estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedRow {
    pub session: usize,
    pub n_detected: usize,
    pub sigma: f64,
    pub r95: f64,
    pub area95: f64,
    /// Expected population in the state space.
    pub lambda: f64,
    /// Individuals per km², averaged over the state space.
    pub density_mean: f64,
    pub density_min: f64,
    pub density_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_traps: usize,
    pub n_points: usize,
    pub cell_area: f64,
    pub n_sessions: usize,
    pub n_occasions: usize,
    pub n_per_session: Vec<usize>,
}

/// Contents of fit.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub provenance: Provenance,
    pub model: FormulaSpec,
    pub data: DataSummary,
    pub fit: FitResult,
    pub derived: Vec<DerivedRow>,
}

pub fn derived_rows(
    problem: &Problem,
    fit: &FitResult,
    design: &scr_core::model::DesignBundle,
) -> Result<Vec<DerivedRow>> {
    let lambdas = session_lambdas(design, &problem.geometry.space, &fit.theta());
    let area = problem.geometry.space.total_area();
    let n = problem.data.n_per_session();
    (0..problem.dims.n_sessions)
        .map(|g| {
            let hr = derived_home_range(fit, design, g);
            let surface = predict_density(fit, design, g, 0.95)?;
            let (lo, hi) = density_extremes(&surface).context("empty density surface")?;
            Ok(DerivedRow {
                session: g + 1,
                n_detected: n[g],
                sigma: hr.sigma,
                r95: hr.r95,
                area95: hr.area95,
                lambda: lambdas[g],
                density_mean: lambdas[g] / area * M2_PER_KM2,
                density_min: lo.density,
                density_max: hi.density,
            })
        })
        .collect()
}

pub fn run(args: &FitArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let formula = cfg.formula(args.model.as_deref())?;
    // record the formula actually fitted
    cfg.model = Some(crate::config::ModelSpec::Triple(formula.to_spec()));
    let problem = Problem::load(&cfg)?;
    let ctx = problem.context(&formula)?;
    let fit = inference::fit(&ctx, &formula, &fit_options(&cfg)).context("fitting failed")?;
    let derived = derived_rows(&problem, &fit, ctx.design())?;
    let prov = Provenance::new("fit", Some(cfg.seed), &cfg)?;
    let artifact = FitArtifact {
        provenance: prov.clone(),
        model: formula.to_spec(),
        data: DataSummary {
            n_traps: problem.dims.n_traps,
            n_points: problem.dims.n_points,
            cell_area: problem.geometry.space.cell_area(),
            n_sessions: problem.dims.n_sessions,
            n_occasions: problem.dims.n_occasions,
            n_per_session: problem.data.n_per_session(),
        },
        fit,
        derived,
    };
    write_artifacts(&args.out, &artifact)?;
    report(&artifact.fit, &formula);
    if !artifact.fit.converged() {
        return Err(ModelFailure(format!(
            "fit did not converge ({:?}, gradient norm {:.3e}); artifacts written to {}",
            artifact.fit.diagnostics.status,
            artifact.fit.diagnostics.gradient_norm,
            args.out.display()
        ))
        .into());
    }
    Ok(())
}

pub fn write_artifacts(out: &Path, artifact: &FitArtifact) -> Result<()> {
    ensure_dir(out)?;
    write_json(&out.join("fit.json"), artifact)?;
    let prov = &artifact.provenance;
    write_csv_with(&out.join("wald.csv"), prov, |buf| {
        Ok(write_wald_csv(&artifact.fit.wald, buf)?)
    })?;
    write_csv_with(&out.join("derived.csv"), prov, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for row in &artifact.derived {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    })
}

fn report(fit: &FitResult, formula: &ModelFormula) {
    println!("model  {formula}");
    println!("nll    {:.4}  (logL {:.4})", fit.nll, -fit.nll);
    println!("K      {}", fit.k);
    println!("AIC    {:.4}", fit.aic);
    println!(
        "status {:?} after {} iterations",
        fit.diagnostics.status, fit.diagnostics.iterations
    );
    if !fit.diagnostics.se_defined {
        println!(
            "warning: standard errors undefined ({})",
            fit.diagnostics.hessian_note.as_deref().unwrap_or("singular Hessian")
        );
    }
}
