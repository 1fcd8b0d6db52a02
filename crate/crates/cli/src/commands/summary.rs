use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use scr_core::encounters::{summarize, CaptureSummary};

use super::fit::FitArtifact;
use super::Problem;
use crate::config::RunConfig;
use std::fmt::Write;

use crate::output::{opt, print_stdout};

#[derive(Debug, Args)]
pub struct SummaryArgs {
    /// Summarize the capture data of a run configuration.
    #[arg(long, conflicts_with = "fit")]
    pub config: Option<PathBuf>,
    /// Print the coefficient table and derived quantities of a fit.json.
    #[arg(long)]
    pub fit: Option<PathBuf>,
}

#[derive(Serialize)]
struct DataReport {
    n_traps: usize,
    n_points: usize,
    statespace_area_km2: f64,
    n_sessions: usize,
    n_occasions: usize,
    covariates: Vec<String>,
    captures: CaptureSummary,
}

pub fn run(args: &SummaryArgs) -> Result<()> {
    match (&args.config, &args.fit) {
        (Some(path), None) => {
            let cfg = RunConfig::load(path)?;
            let p = Problem::load(&cfg)?;
            let report = DataReport {
                n_traps: p.dims.n_traps,
                n_points: p.dims.n_points,
                statespace_area_km2: p.geometry.space.total_area() / 1e6,
                n_sessions: p.dims.n_sessions,
                n_occasions: p.dims.n_occasions,
                covariates: p.registry.iter().map(|s| format!("{} ({})", s.name, s.scope)).collect(),
                captures: summarize(&p.data, &p.geometry.traps),
            };
            print_stdout(&(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let a: FitArtifact =
                serde_json::from_str(&text).with_context(|| format!("{} is not a fit.json", path.display()))?;
            let f = &a.fit;
            let mut out = String::new();
            writeln!(
                out,
                "model: D{}; p0{}; sigma{}",
                a.model.density, a.model.p0, a.model.sigma
            )?;
            writeln!(
                out,
                "logL {:.4}  K {}  AIC {:.4}  converged {}",
                -f.nll,
                f.k,
                f.aic,
                f.converged()
            )?;
            writeln!(out)?;
            writeln!(
                out,
                "{:<32} {:>12} {:>10} {:>10} {:>10}",
                "", "Estimate", "SE", "z", "P(>|z|)"
            )?;
            for r in &f.wald {
                let fmt = |v: Option<f64>, dp: usize| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.dp$}"));
                writeln!(
                    out,
                    "{:<32} {:>12.4} {:>10} {:>10} {:>10}",
                    r.name,
                    r.estimate,
                    fmt(r.se, 4),
                    fmt(r.z, 3),
                    fmt(r.p_value, 4)
                )?;
            }
            writeln!(out)?;
            writeln!(
                out,
                "{:>7} {:>5} {:>10} {:>10} {:>12} {:>10} {:>10}",
                "session", "n", "sigma", "r95", "A95", "lambda", "D/km2"
            )?;
            for d in &a.derived {
                writeln!(
                    out,
                    "{:>7} {:>5} {:>10.2} {:>10.2} {:>12.4e} {:>10.2} {:>10}",
                    d.session,
                    d.n_detected,
                    d.sigma,
                    d.r95,
                    d.area95,
                    d.lambda,
                    opt(Some((d.density_mean * 1e4).round() / 1e4))
                )?;
            }
            print_stdout(&out)?;
        }
        _ => bail!("give exactly one of --config or --fit"),
    }
    Ok(())
}
