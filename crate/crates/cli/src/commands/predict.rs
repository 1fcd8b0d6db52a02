use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use scr_core::inference::{
    derived_home_range, predict_density, predict_density_at, predict_detection, predictor_covariates, DensityPrediction,
};
use scr_core::model::{DesignBundle, ModelFormula, Predictor};

use super::fit::FitArtifact;
use super::Problem;
use crate::config::RunConfig;
use crate::output::{ensure_dir, opt, write_csv_with, Provenance};

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// fit.json written by `fit`; its embedded config locates the inputs.
    #[arg(long)]
    pub fit: PathBuf,
    /// Interval level overriding the one recorded with the fit.
    #[arg(long)]
    pub level: Option<f64>,
    /// CSV of raw covariate values (one column per density covariate, optional
    /// `session`) at which to predict density.
    #[arg(long)]
    pub at: Option<PathBuf>,
    /// Largest distance for the detection curve, metres; defaults to 3 sigma.
    #[arg(long)]
    pub max_distance: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Mean raw value of each covariate a predictor uses.
fn covariate_means(design: &DesignBundle, predictor: Predictor) -> BTreeMap<String, f64> {
    predictor_covariates(design, predictor)
        .into_iter()
        .filter_map(|(name, _)| {
            let s = design.surface(&name, predictor)?;
            let mean = s.values.iter().map(|v| s.to_raw(*v)).sum::<f64>() / s.values.len() as f64;
            Some((name, mean))
        })
        .collect()
}

fn prediction_cells(p: &DensityPrediction) -> [String; 4] {
    [p.density.to_string(), opt(p.se), opt(p.lwr), opt(p.upr)]
}

pub fn run(args: &PredictArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.fit).with_context(|| format!("cannot read {}", args.fit.display()))?;
    let artifact: FitArtifact =
        serde_json::from_str(&text).with_context(|| format!("{} is not a fit.json", args.fit.display()))?;
    let cfg: RunConfig =
        serde_json::from_value(artifact.provenance.config.clone()).context("fit.json has no usable run config")?;
    let level = args.level.unwrap_or(cfg.interval_level);
    let formula = ModelFormula::from_spec(&artifact.model)?;
    let problem = Problem::load(&cfg)?;
    let ctx = problem.context(&formula)?;
    let design = ctx.design();
    if design.names() != artifact.fit.names {
        bail!(
            "the inputs no longer match the fit: coefficients {:?} vs {:?}",
            design.names(),
            artifact.fit.names
        );
    }
    let fit = &artifact.fit;
    let prov = Provenance::new(
        "predict",
        artifact.provenance.seed,
        &serde_json::json!({ "fit": args.fit, "level": level, "config": cfg }),
    )?;
    ensure_dir(&args.out)?;

    let sessions = problem.dims.n_sessions;
    let points = problem.geometry.space.points();
    let surfaces = (0..sessions)
        .map(|g| predict_density(fit, design, g, level))
        .collect::<scr_core::Result<Vec<_>>>()?;
    write_csv_with(&args.out.join("density.csv"), &prov, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["session", "point_id", "x", "y", "density", "se", "lwr", "upr"])?;
        for (g, surface) in surfaces.iter().enumerate() {
            for (u, (p, pred)) in points.iter().zip(surface).enumerate() {
                let mut row = vec![
                    (g + 1).to_string(),
                    (u + 1).to_string(),
                    p.x.to_string(),
                    p.y.to_string(),
                ];
                row.extend(prediction_cells(pred));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    })?;

    let p0_at = covariate_means(design, Predictor::P0);
    write_csv_with(&args.out.join("detection.csv"), &prov, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["session", "distance", "p"])?;
        for g in 0..sessions {
            let sigma = derived_home_range(fit, design, g).sigma;
            let max = args.max_distance.unwrap_or(3.0 * sigma);
            let steps = args.steps.max(1);
            let d: Vec<f64> = (0..=steps).map(|i| max * i as f64 / steps as f64).collect();
            let curve = predict_detection(fit, design, g, &p0_at, &d)?;
            for (d, p) in curve.distances.iter().zip(&curve.p) {
                w.write_record([(g + 1).to_string(), d.to_string(), p.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;

    write_csv_with(&args.out.join("home_range.csv"), &prov, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for g in 0..sessions {
            w.serialize(derived_home_range(fit, design, g))?;
        }
        w.flush()?;
        Ok(())
    })?;

    if let Some(at) = &args.at {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(at)
            .with_context(|| format!("cannot read {}", at.display()))?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut raw = BTreeMap::new();
            let mut session = 1usize;
            for (h, v) in header.iter().zip(rec.iter()) {
                if h == "session" {
                    session = v
                        .parse()
                        .with_context(|| format!("{} row {}: bad session `{v}`", at.display(), line + 2))?;
                } else {
                    let x: f64 = v
                        .parse()
                        .with_context(|| format!("{} row {}: bad `{h}` value `{v}`", at.display(), line + 2))?;
                    raw.insert(h.clone(), x);
                }
            }
            if !(1..=sessions).contains(&session) {
                bail!(
                    "{} row {}: session {session} outside 1..={sessions}",
                    at.display(),
                    line + 2
                );
            }
            let pred = predict_density_at(fit, design, session - 1, std::slice::from_ref(&raw), level)?[0];
            rows.push((rec.iter().map(str::to_string).collect::<Vec<_>>(), pred));
        }
        write_csv_with(&args.out.join("density_at.csv"), &prov, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            let mut h = header.clone();
            h.extend(["density", "se", "lwr", "upr", "extrapolated"].map(String::from));
            w.write_record(&h)?;
            for (cells, pred) in &rows {
                let mut row = cells.clone();
                row.extend(prediction_cells(pred));
                row.push(pred.extrapolated.to_string());
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        })?;
        if rows.iter().any(|(_, p)| p.extrapolated) {
            log::warn!("some requested covariate values lie outside the fitted range");
        }
    }
    Ok(())
}
