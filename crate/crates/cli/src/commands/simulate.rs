use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use scr_core::covariates::table::write_covariate_csv;
use scr_core::covariates::{CovariateSurface, Dims, Scope};
use scr_core::inference::FitOptions;
use scr_core::simulate::{recovery_study, replicate_rng, session_lambdas, simulate, SimConfig};

use crate::config::{IdwConfig, ModelSpec, RunConfig, StateSpaceConfig};
use crate::output::{ensure_dir, write_csv_with, write_json, Provenance};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Encounter CSV to write; traps, covariates and a run config for `fit`
    /// are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Truth file; defaults to truth.json beside the encounters.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Seed overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also run a simulate-and-refit study with this many replicates (recovery.json).
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthArtifact {
    pub provenance: Provenance,
    /// True coefficients in packed order.
    pub parameters: BTreeMap<String, f64>,
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    /// Expected population per session.
    pub lambda: Vec<f64>,
    /// Realized population per session.
    pub population: Vec<usize>,
    pub detected: Vec<usize>,
}

fn scope_file(scope: Scope) -> &'static str {
    match scope {
        Scope::Trap => "covariates_trap.csv",
        Scope::StateSpace => "covariates_statespace.csv",
        Scope::Occasion => "covariates_occasion.csv",
        Scope::Session => "covariates_session.csv",
        Scope::TrapOccasion => "covariates_trap_occasion.csv",
        Scope::SessionOccasion => "covariates_session_occasion.csv",
    }
}

fn file_name(p: &Path) -> Result<String> {
    Ok(p.file_name()
        .context("output path has no file name")?
        .to_string_lossy()
        .into_owned())
}

pub fn run(args: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))?;
    let mut sim: SimConfig =
        serde_json::from_str(&text).with_context(|| format!("invalid simulation config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        sim.seed = seed;
    }
    let model = sim.build()?;
    let prov = Provenance::new("simulate", Some(sim.seed), &sim)?;
    let (population, data) = simulate(&model, &mut replicate_rng(sim.seed, 0))?;
    let detected = data.n_per_session();
    if detected.iter().all(|n| *n == 0) {
        bail!("no individual was detected in any session; raise lambda, p0 or sigma");
    }

    let dir = args.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir = if dir.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        dir
    };
    ensure_dir(&dir)?;
    write_csv_with(&args.out, &prov, |buf| Ok(data.write_csv(&model.traps, buf)?))?;
    write_csv_with(&dir.join("traps.csv"), &prov, |buf| Ok(model.traps.write_csv(buf)?))?;

    let dims = Dims {
        n_points: model.space.len(),
        n_traps: model.traps.len(),
        n_occasions: sim.occasions,
        n_sessions: sim.sessions,
    };
    let ids: Vec<String> = model.traps.traps().iter().map(|t| t.id.clone()).collect();
    let mut by_scope: BTreeMap<Scope, Vec<&CovariateSurface>> = BTreeMap::new();
    for s in model.registry.iter() {
        by_scope.entry(s.scope).or_default().push(s);
    }
    let mut covariate_files = Vec::new();
    for (scope, surfaces) in &by_scope {
        let name = scope_file(*scope);
        write_csv_with(&dir.join(name), &prov, |buf| {
            Ok(write_covariate_csv(buf, surfaces, &dims, &ids)?)
        })?;
        covariate_files.push(PathBuf::from(name));
    }

    // run config that refits the true model to the simulated data
    let run_cfg = RunConfig {
        traps: "traps.csv".into(),
        encounters: Some(file_name(&args.out)?.into()),
        covariates: covariate_files,
        graph: None,
        posts: None,
        catalogue: None,
        model: Some(ModelSpec::Triple(model.formula.to_spec())),
        statespace: StateSpaceConfig {
            buffer: sim.buffer,
            spacing: sim.statespace_spacing,
        },
        origin: None,
        sessions: Some(sim.sessions),
        occasions: Some(sim.occasions),
        standardize: sim.standardize,
        seed: sim.seed,
        n_starts: 3,
        interval_level: 0.95,
        alpha: vec![0.0, 0.5, 1.0],
        timezone: None,
        idw: IdwConfig::default(),
    };
    write_json(&dir.join("run.json"), &run_cfg)?;

    let names = model.design.names();
    let truth = TruthArtifact {
        provenance: prov.clone(),
        parameters: names.iter().cloned().zip(model.theta.iter().copied()).collect(),
        names,
        theta: model.theta.clone(),
        lambda: session_lambdas(&model.design, &model.space, &model.theta),
        population: population.sizes(),
        detected: detected.clone(),
    };
    let truth_path = args.truth.clone().unwrap_or_else(|| dir.join("truth.json"));
    write_json(&truth_path, &truth)?;
    println!("population {:?}, detected {:?}", truth.population, detected);

    if let Some(r) = args.replicates {
        let opts = FitOptions {
            seed: sim.seed,
            ..Default::default()
        };
        let report = recovery_study(&model, sim.seed, r, &opts)?;
        #[derive(Serialize)]
        struct Recovery<'a> {
            provenance: &'a Provenance,
            report: &'a scr_core::simulate::RecoveryReport,
        }
        write_json(
            &dir.join("recovery.json"),
            &Recovery {
                provenance: &prov,
                report: &report,
            },
        )?;
        println!(
            "{:<18} {:>10} {:>10} {:>9} {:>9}",
            "parameter", "truth", "mean", "rel.bias", "coverage"
        );
        for p in &report.parameters {
            println!(
                "{:<18} {:>10.4} {:>10.4} {:>9.4} {:>9.3}",
                p.name,
                p.truth,
                p.mean_estimate,
                p.natural_relative_bias.unwrap_or(f64::NAN),
                p.coverage
            );
        }
        if report.n_failed > 0 {
            log::warn!("{} of {r} replicate fits failed", report.n_failed);
        }
    }
    Ok(())
}
