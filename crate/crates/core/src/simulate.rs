//! Simulation of populations and encounter histories, and the parameter
//! recovery study built on it.
//!
//! Activity centres are drawn on the discrete state-space points with
//! probability proportional to the density, so the simulator is an exact
//! generative counterpart of the discretized likelihood.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{CovariateRegistry, CovariateSurface, Dims, Scope};
use crate::encounters::{EncounterData, SessionBlock};
use crate::error::{Result, ScrError};
use crate::geometry::{build_state_space, PlanePoint, StateSpace, TrapArray};
use crate::inference::{fit, FitOptions};
use crate::likelihood::LikelihoodContext;
use crate::model::{build_design, link_p0, link_sigma, DesignBundle, DesignOptions, FormulaSpec, ModelFormula};

/// Largest expected population per session the simulator accepts.
pub const MAX_LAMBDA: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapGrid {
    pub rows: usize,
    pub cols: usize,
    /// Metres between neighbouring traps.
    pub spacing: f64,
}

/// Deterministic covariate shapes for simulated landscapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// x coordinate, on traps and state-space points.
    Easting,
    /// y coordinate, on traps and state-space points.
    Northing,
    /// Distance from the trap-array centre, on traps and state-space points.
    Radial,
    /// `sin(2 pi k / K)` over occasions.
    Diurnal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCovariate {
    pub name: String,
    pub pattern: Pattern,
}

fn default_true() -> bool {
    true
}

/// JSON simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub sessions: usize,
    pub occasions: usize,
    pub traps: TrapGrid,
    /// State-space buffer around the trap bounding box, metres.
    pub buffer: f64,
    /// State-space lattice spacing, metres.
    pub statespace_spacing: f64,
    pub formula: FormulaSpec,
    /// True coefficients by name (e.g. `p0.(Intercept)`), on the link scale.
    pub truth: BTreeMap<String, f64>,
    /// When set, replaces `d0.(Intercept)` so that session 1 has this expected population.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub covariates: Vec<SyntheticCovariate>,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

/// Everything needed to simulate and refit: geometry, covariates, design and truth.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub traps: TrapArray,
    pub space: StateSpace,
    pub registry: CovariateRegistry,
    pub formula: ModelFormula,
    pub design: DesignBundle,
    /// True parameters in packed order.
    pub theta: Vec<f64>,
}

impl SimConfig {
    pub fn build(&self) -> Result<SimModel> {
        if self.sessions == 0 || self.occasions == 0 {
            return Err(ScrError::InvalidInput(
                "simulation needs at least one session and one occasion".into(),
            ));
        }
        let traps = TrapArray::grid(self.traps.rows, self.traps.cols, self.traps.spacing)?;
        let (space, warnings) = build_state_space(&traps, self.buffer, self.statespace_spacing)?;
        for w in warnings {
            log::warn!("{w}");
        }
        let registry = synthetic_registry(&self.covariates, &traps, &space, self.occasions)?;
        let formula = ModelFormula::from_spec(&self.formula)?;
        formula.validate(&registry)?;
        let dims = Dims {
            n_points: space.len(),
            n_traps: traps.len(),
            n_occasions: self.occasions,
            n_sessions: self.sessions,
        };
        let design = build_design(
            &formula,
            &registry,
            dims,
            DesignOptions {
                standardize: self.standardize,
            },
        )?;
        let names = design.names();
        let unknown: Vec<&String> = self.truth.keys().filter(|k| !names.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(ScrError::InvalidInput(format!(
                "truth names {unknown:?} are not coefficients of the model {names:?}"
            )));
        }
        let (na, ng, _) = design.sizes();
        let mut theta = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            match self.truth.get(name) {
                Some(v) => theta.push(*v),
                None if i == na + ng && self.lambda.is_some() => theta.push(0.0),
                None => return Err(ScrError::InvalidInput(format!("truth is missing coefficient `{name}`"))),
            }
        }
        if let Some(lambda) = self.lambda {
            if !(lambda > 0.0) {
                return Err(ScrError::InvalidInput(format!("lambda must be positive, got {lambda}")));
            }
            // shift the density intercept so that session 1 integrates to lambda
            let current = session_lambdas(&design, &space, &theta)[0];
            theta[na + ng] += (lambda / current).ln();
        }
        Ok(SimModel {
            traps,
            space,
            registry,
            formula,
            design,
            theta,
        })
    }
}

/// Builds the registry for the synthetic covariates. Spatial patterns are
/// defined on both traps and state-space points.
pub fn synthetic_registry(
    covariates: &[SyntheticCovariate],
    traps: &TrapArray,
    space: &StateSpace,
    occasions: usize,
) -> Result<CovariateRegistry> {
    let pts = traps.points();
    let n = pts.len() as f64;
    let centre = PlanePoint::new(
        pts.iter().map(|p| p.x).sum::<f64>() / n,
        pts.iter().map(|p| p.y).sum::<f64>() / n,
    );
    let mut reg = CovariateRegistry::new();
    for c in covariates {
        let mut add = |scope: Scope, values: Vec<f64>| -> Result<()> {
            reg.insert(CovariateSurface::new(&c.name, scope, values)?);
            Ok(())
        };
        let value: fn(&PlanePoint, &PlanePoint) -> f64 = match c.pattern {
            Pattern::Easting => |p, _| p.x,
            Pattern::Northing => |p, _| p.y,
            Pattern::Radial => |p, o| p.dist(o),
            Pattern::Diurnal => {
                add(
                    Scope::Occasion,
                    (0..occasions)
                        .map(|k| (2.0 * PI * k as f64 / occasions as f64).sin())
                        .collect(),
                )?;
                continue;
            }
        };
        add(Scope::Trap, pts.iter().map(|p| value(p, &centre)).collect())?;
        add(
            Scope::StateSpace,
            space.points().iter().map(|p| value(p, &centre)).collect(),
        )?;
    }
    Ok(reg)
}

/// Expected population per session, `lambda_g = sum_u d(s_u) * cell_area`.
pub fn session_lambdas(design: &DesignBundle, space: &StateSpace, theta: &[f64]) -> Vec<f64> {
    let (na, ng, _) = design.sizes();
    let eta = design.density.eta(&theta[na + ng..]);
    let gn = design.dims.n_points;
    (0..design.dims.n_sessions)
        .map(|g| {
            eta[g * gn..(g + 1) * gn]
                .iter()
                .map(|e| crate::model::link_density(*e) * space.cell_area())
                .sum()
        })
        .collect()
}

/// Activity centres (state-space point indices) per session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub centres: Vec<Vec<usize>>,
}

impl Population {
    pub fn sizes(&self) -> Vec<usize> {
        self.centres.iter().map(Vec::len).collect()
    }
}

/// `N_g ~ Poisson(lambda_g)`; centres drawn with probability proportional to `d(s_u)`.
pub fn simulate_population<R: Rng>(model: &SimModel, rng: &mut R) -> Result<Population> {
    let (na, ng, _) = model.design.sizes();
    let eta = model.design.density.eta(&model.theta[na + ng..]);
    let gn = model.design.dims.n_points;
    let mut centres = Vec::with_capacity(model.design.dims.n_sessions);
    for g in 0..model.design.dims.n_sessions {
        let weights: Vec<f64> = eta[g * gn..(g + 1) * gn]
            .iter()
            .map(|e| crate::model::link_density(*e) * model.space.cell_area())
            .collect();
        let lambda: f64 = weights.iter().sum();
        if !(lambda <= MAX_LAMBDA) {
            return Err(ScrError::PopulationTooLarge(lambda));
        }
        let n = Poisson::new(lambda)
            .map_err(|e| ScrError::InvalidInput(format!("session {}: {e}", g + 1)))?
            .sample(rng) as usize;
        let index =
            WeightedIndex::new(&weights).map_err(|e| ScrError::InvalidInput(format!("density weights: {e}")))?;
        centres.push((0..n).map(|_| index.sample(rng)).collect());
    }
    Ok(Population { centres })
}

/// Bernoulli detections with half-normal probability; undetected individuals
/// are dropped. Individuals are labelled `s<session>-<index>` by their
/// position in the population.
pub fn simulate_encounters<R: Rng>(model: &SimModel, population: &Population, rng: &mut R) -> Result<EncounterData> {
    let dims = model.design.dims;
    let (jn, kn) = (dims.n_traps, dims.n_occasions);
    let (na, _, _) = model.design.sizes();
    let p0_eta = model.design.p0.eta(&model.theta[..na]);
    let (_, ng, _) = model.design.sizes();
    let sigma_eta = model.design.sigma.eta(&model.theta[na..na + ng]);
    let traps = model.traps.points();
    let mut sessions = Vec::with_capacity(dims.n_sessions);
    for (g, centres) in population.centres.iter().enumerate() {
        let sigma = link_sigma(sigma_eta[g]);
        let mut ids = Vec::new();
        let mut caps = Vec::new();
        for (i, &u) in centres.iter().enumerate() {
            let s = model.space.points()[u];
            let mut c = Vec::new();
            for (j, t) in traps.iter().enumerate() {
                let h = (-t.dist_sq(&s) / (2.0 * sigma * sigma)).exp();
                for k in 0..kn {
                    let p = link_p0(p0_eta[(g * jn + j) * kn + k]) * h;
                    if rng.random::<f64>() < p {
                        c.push((j, k));
                    }
                }
            }
            if !c.is_empty() {
                ids.push(format!("s{}-{:06}", g + 1, i));
                caps.push(c);
            }
        }
        sessions.push(SessionBlock::new(g + 1, ids, jn, kn, caps)?);
    }
    Ok(EncounterData { sessions })
}

/// Generator for replicate `replicate` of a study seeded with `seed`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// One simulated data set.
pub fn simulate<R: Rng>(model: &SimModel, rng: &mut R) -> Result<(Population, EncounterData)> {
    let pop = simulate_population(model, rng)?;
    let data = simulate_encounters(model, &pop, rng)?;
    Ok((pop, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub n_detected: Vec<usize>,
    pub converged: bool,
    pub nll: Option<f64>,
    pub estimates: Option<Vec<f64>>,
    pub se: Option<Vec<Option<f64>>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecovery {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Bias of the back-transformed estimate relative to the back-transformed
    /// truth, for intercepts (p0 logistic, sigma and density exponential).
    pub natural_relative_bias: Option<f64>,
    pub empirical_sd: f64,
    pub mean_se: f64,
    /// Mean SE over empirical SD; near 1 when SEs are calibrated.
    pub se_ratio: f64,
    /// Share of replicates whose 95% Wald interval covers the truth.
    pub coverage: f64,
    /// Share of replicates with the estimate within 3 SE of the truth.
    pub within_3se: f64,
    pub n_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub seed: u64,
    pub replicates: usize,
    pub n_failed: usize,
    pub parameters: Vec<ParameterRecovery>,
    pub outcomes: Vec<ReplicateOutcome>,
}

impl RecoveryReport {
    pub fn parameter(&self, name: &str) -> Option<&ParameterRecovery> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Simulates `replicates` data sets and fits the generating formula to each.
/// Replicates run in parallel; each has its own stream, so results do not
/// depend on scheduling. Failed fits are recorded and excluded from summaries.
pub fn recovery_study(model: &SimModel, seed: u64, replicates: usize, opts: &FitOptions) -> Result<RecoveryReport> {
    if replicates < 10 {
        return Err(ScrError::InvalidInput(format!(
            "a recovery study needs at least 10 replicates, got {replicates}"
        )));
    }
    let outcomes: Vec<ReplicateOutcome> = (0..replicates)
        .into_par_iter()
        .map(|r| run_replicate(model, seed, r, opts))
        .collect();
    let names = model.design.names();
    let (na, ng, _) = model.design.sizes();
    let used: Vec<&ReplicateOutcome> = outcomes
        .iter()
        .filter(|o| o.converged && o.estimates.is_some())
        .collect();
    let parameters = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let truth = model.theta[i];
            let est: Vec<f64> = used.iter().map(|o| o.estimates.as_ref().unwrap()[i]).collect();
            let ses: Vec<Option<f64>> = used.iter().map(|o| o.se.as_ref().and_then(|s| s[i])).collect();
            let n = est.len() as f64;
            let mean = est.iter().sum::<f64>() / n;
            let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let defined: Vec<(f64, f64)> = est.iter().zip(&ses).filter_map(|(e, s)| s.map(|s| (*e, s))).collect();
            let nd = defined.len() as f64;
            let mean_se = defined.iter().map(|(_, s)| s).sum::<f64>() / nd;
            let coverage = defined
                .iter()
                .filter(|(e, s)| (e - truth).abs() <= crate::inference::Z_95 * s)
                .count() as f64
                / nd;
            let within_3se = defined.iter().filter(|(e, s)| (e - truth).abs() <= 3.0 * s).count() as f64 / nd;
            let back: Option<fn(f64) -> f64> = if i == 0 {
                Some(link_p0)
            } else if i == na || i == na + ng {
                Some(f64::exp)
            } else {
                None
            };
            let natural_relative_bias = back.map(|f| {
                let t = f(truth);
                (est.iter().map(|e| f(*e)).sum::<f64>() / n - t) / t
            });
            ParameterRecovery {
                name: name.clone(),
                truth,
                mean_estimate: mean,
                bias: mean - truth,
                natural_relative_bias,
                empirical_sd: sd,
                mean_se,
                se_ratio: mean_se / sd,
                coverage,
                within_3se,
                n_used: defined.len(),
            }
        })
        .collect();
    Ok(RecoveryReport {
        seed,
        replicates,
        n_failed: outcomes.len() - used.len(),
        parameters,
        outcomes,
    })
}

fn run_replicate(model: &SimModel, seed: u64, r: usize, opts: &FitOptions) -> ReplicateOutcome {
    let mut rng = replicate_rng(seed, r as u64);
    let mut out = ReplicateOutcome {
        replicate: r,
        n_detected: Vec::new(),
        converged: false,
        nll: None,
        estimates: None,
        se: None,
        error: None,
    };
    let data = match simulate(model, &mut rng) {
        Ok((_, d)) => d,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.n_detected = data.n_per_session();
    let fitted = LikelihoodContext::new(model.design.clone(), data, &model.traps, &model.space).and_then(|ctx| {
        let opts = FitOptions {
            seed: opts.seed ^ r as u64,
            ..opts.clone()
        };
        fit(&ctx, &model.formula, &opts)
    });
    match fitted {
        Ok(f) => {
            out.converged = f.converged();
            out.nll = Some(f.nll);
            out.se = Some(f.wald.iter().map(|w| w.se).collect());
            out.estimates = Some(f.theta());
            if !f.converged() {
                out.error = Some(format!("did not converge: {:?}", f.diagnostics.status));
            }
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::logit;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn config(formula: FormulaSpec, truth: &[(&str, f64)]) -> SimConfig {
        SimConfig {
            seed: 1,
            sessions: 2,
            occasions: 4,
            traps: TrapGrid {
                rows: 4,
                cols: 4,
                spacing: 10.0,
            },
            buffer: 30.0,
            statespace_spacing: 10.0,
            formula,
            truth: truth.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            lambda: Some(50.0),
            covariates: vec![SyntheticCovariate {
                name: "east".into(),
                pattern: Pattern::Easting,
            }],
            standardize: true,
        }
    }

    fn null_spec() -> FormulaSpec {
        ModelFormula::null().to_spec()
    }

    fn null_model() -> SimModel {
        config(
            null_spec(),
            &[("p0.(Intercept)", logit(0.3)), ("sig.(Intercept)", 15f64.ln())],
        )
        .build()
        .unwrap()
    }

    #[test]
    fn lambda_calibration() {
        let m = null_model();
        let l = session_lambdas(&m.design, &m.space, &m.theta);
        assert!((l[0] - 50.0).abs() < 1e-9 && (l[1] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn missing_or_unknown_truth_rejected() {
        let mut c = config(null_spec(), &[("p0.(Intercept)", 0.0)]);
        assert!(c.build().is_err());
        c.truth.insert("sig.(Intercept)".into(), 1.0);
        c.truth.insert("nope".into(), 1.0);
        assert!(c.build().is_err());
    }

    #[test]
    fn population_guard() {
        let mut c = config(null_spec(), &[("p0.(Intercept)", 0.0), ("sig.(Intercept)", 1.0)]);
        c.lambda = Some(2e7);
        let m = c.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            simulate_population(&m, &mut rng),
            Err(ScrError::PopulationTooLarge(_))
        ));
    }

    #[test]
    fn poisson_mean_and_uniform_centres() {
        let m = null_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reps = 1000;
        let mut total = 0usize;
        let mut counts = vec![0usize; m.space.len()];
        for _ in 0..reps {
            let pop = simulate_population(&m, &mut rng).unwrap();
            total += pop.centres[0].len();
            for &u in &pop.centres[0] {
                counts[u] += 1;
            }
        }
        let mean = total as f64 / reps as f64;
        assert!(
            (mean - 50.0).abs() < 3.0 * (50.0f64 / reps as f64).sqrt(),
            "mean {mean}"
        );
        let n: usize = counts.iter().sum();
        let expected = n as f64 / counts.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let crit = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 {chi2} vs {crit}");
    }

    #[test]
    fn fixed_seed_reproducible() {
        let m = null_model();
        let a = simulate(&m, &mut replicate_rng(3, 5)).unwrap();
        let b = simulate(&m, &mut replicate_rng(3, 5)).unwrap();
        assert_eq!(a, b);
        let c = simulate(&m, &mut replicate_rng(3, 6)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn certain_detection_limit() {
        let mut c = config(null_spec(), &[("p0.(Intercept)", 45.0), ("sig.(Intercept)", 30.0)]);
        c.traps = TrapGrid {
            rows: 1,
            cols: 1,
            spacing: 10.0,
        };
        c.buffer = 20.0;
        let m = c.build().unwrap();
        let (pop, data) = simulate(&m, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (g, s) in data.sessions.iter().enumerate() {
            assert_eq!(s.n_detected(), pop.centres[g].len());
            for i in 0..s.n_detected() {
                assert_eq!(s.captures(i).len(), 4);
            }
        }
    }

    #[test]
    fn observed_never_exceeds_population() {
        let m = null_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (pop, data) = simulate(&m, &mut rng).unwrap();
            for (p, n) in pop.sizes().iter().zip(data.n_per_session()) {
                assert!(n <= *p);
            }
        }
    }

    #[test]
    fn detection_frequency_matches_half_normal() {
        // single trap at the origin; one centre at distance d
        let m = null_model();
        let traps = m.traps.points();
        let (u, d) = m
            .space
            .points()
            .iter()
            .enumerate()
            .map(|(u, p)| (u, p.dist(&traps[0])))
            .find(|(_, d)| (*d - 20.0).abs() < 1e-9)
            .unwrap();
        let pop = Population {
            centres: vec![vec![u; 25_000], vec![]],
        };
        let data = simulate_encounters(&m, &pop, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let hits: usize = data.sessions[0]
            .all_captures()
            .iter()
            .flatten()
            .filter(|(j, _)| *j == 0)
            .count();
        let trials = 25_000.0 * 4.0;
        let p = crate::likelihood::detection_prob(0.3, 15.0, d);
        let se = (p * (1.0 - p) / trials).sqrt();
        assert!(
            (hits as f64 / trials - p).abs() < 3.0 * se,
            "{} vs {p}",
            hits as f64 / trials
        );
    }

    #[test]
    fn density_covariate_shapes_centres() {
        let spec = FormulaSpec {
            density: "~east".into(),
            p0: "~1".into(),
            sigma: "~1".into(),
        };
        let m = config(
            spec,
            &[("p0.(Intercept)", 0.0), ("sig.(Intercept)", 2.0), ("d.beta.east", 1.0)],
        )
        .build()
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut counts = vec![0.0; m.space.len()];
        for _ in 0..200 {
            for &u in &simulate_population(&m, &mut rng).unwrap().centres[0] {
                counts[u] += 1.0;
            }
        }
        let (na, ng, _) = m.design.sizes();
        let d = m.design.density.eta(&m.theta[na + ng..]);
        let rho = spearman(&counts, &d[..m.space.len()]);
        assert!(rho > 0.5, "rank correlation {rho}");
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn true_parameters_give_finite_nll() {
        let m = null_model();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let (_, data) = simulate(&m, &mut rng).unwrap();
            let ctx = LikelihoodContext::new(m.design.clone(), data, &m.traps, &m.space).unwrap();
            assert!(ctx.total_nll(&m.theta).unwrap().is_finite());
        }
    }

    #[test]
    fn recovery_needs_ten_replicates() {
        assert!(recovery_study(&null_model(), 1, 5, &FitOptions::default()).is_err());
    }
}
