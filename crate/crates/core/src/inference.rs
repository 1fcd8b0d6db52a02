//! Maximum-likelihood fitting, Wald inference and derived quantities.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::covariates::Scope;
use crate::error::{Result, ScrError};
use crate::likelihood::LikelihoodContext;
use crate::model::{link_p0, logit, DesignBundle, ModelFormula, ParameterVector, Predictor};
use crate::optim::{minimize, BfgsOptions, OptimStatus};

/// Chi-square(2) 0.95 quantile as used for the 95% home-range radius.
pub const CHI2_95_2DF: f64 = 5.99;
/// Normal quantile for the 95% intervals.
pub const Z_95: f64 = 1.96;
/// Square metres per square kilometre.
pub const M2_PER_KM2: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub n_starts: usize,
    /// Standard deviation of the normal jitter added to starts after the first.
    pub jitter_sd: f64,
    pub seed: u64,
    pub bfgs: BfgsOptions,
    /// Overrides the default start.
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_starts: 3,
            jitter_sd: 0.5,
            seed: 0,
            bfgs: BfgsOptions::default(),
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub start: Vec<f64>,
    /// `None` when the start could not be evaluated.
    pub nll: Option<f64>,
    pub iterations: usize,
    pub status: OptimStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub status: OptimStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub best_start: usize,
    pub starts: Vec<StartRecord>,
    /// False when the Hessian was singular or produced negative variances.
    pub se_defined: bool,
    pub hessian_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub name: String,
    pub estimate: f64,
    /// `None` marks an undefined standard error.
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub formula: String,
    pub names: Vec<String>,
    pub estimates: ParameterVector,
    pub nll: f64,
    pub k: usize,
    pub aic: f64,
    /// Inverse of the observed information; `None` when the Hessian is singular.
    pub vcov: Option<Vec<Vec<f64>>>,
    pub wald: Vec<WaldRow>,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    pub fn theta(&self) -> Vec<f64> {
        self.estimates.pack()
    }

    pub fn converged(&self) -> bool {
        self.diagnostics.converged
    }

    pub fn vcov_matrix(&self) -> Option<DMatrix<f64>> {
        let v = self.vcov.as_ref()?;
        Some(DMatrix::from_fn(v.len(), v.len(), |i, j| v[i][j]))
    }

    pub fn se(&self, index: usize) -> Option<f64> {
        self.wald.get(index)?.se
    }
}

pub fn aic(nll: f64, k: usize) -> f64 {
    2.0 * nll + 2.0 * k as f64
}

/// All coefficients zero except the intercepts: p0 = 0.01, sigma = half the
/// mean trap spacing times five, density = mean detected count over the area.
pub fn default_start(ctx: &LikelihoodContext) -> Vec<f64> {
    let (na, ng, nb) = ctx.design().sizes();
    let mut theta = vec![0.0; na + ng + nb];
    theta[0] = logit(0.01);
    let spacing = ctx.trap_spacing().unwrap_or_else(|| ctx.total_area().sqrt() / 10.0);
    theta[na] = (spacing / 2.0 * 5.0).ln();
    let counts = ctx.data().n_per_session();
    let mean_n = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
    theta[na + ng] = (mean_n.max(1.0) / ctx.total_area()).ln();
    theta
}

/// Multi-start BFGS fit. Non-convergence is reported through
/// `diagnostics.converged`; an error means no start could be evaluated.
pub fn fit(ctx: &LikelihoodContext, formula: &ModelFormula, opts: &FitOptions) -> Result<FitResult> {
    let base = match &opts.start {
        Some(s) if s.len() != ctx.n_params() => {
            return Err(ScrError::InvalidInput(format!(
                "start has {} values, model has {} parameters",
                s.len(),
                ctx.n_params()
            )))
        }
        Some(s) => s.clone(),
        None => default_start(ctx),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let jitter = Normal::new(0.0, opts.jitter_sd).map_err(|e| ScrError::InvalidInput(format!("jitter sd: {e}")))?;
    let starts: Vec<Vec<f64>> = (0..opts.n_starts.max(1))
        .map(|i| {
            if i == 0 {
                base.clone()
            } else {
                base.iter().map(|b| b + jitter.sample(&mut rng)).collect()
            }
        })
        .collect();

    let mut records = Vec::with_capacity(starts.len());
    let mut best: Option<(usize, crate::optim::BfgsResult)> = None;
    let mut evaluations = 0;
    for (i, start) in starts.iter().enumerate() {
        let r = minimize(|t| ctx.total_nll_grad(t), start, &opts.bfgs);
        log::debug!(
            "start {i}: nll {} after {} iterations ({:?})",
            r.f,
            r.iterations,
            r.status
        );
        evaluations += r.evaluations;
        records.push(StartRecord {
            start: start.clone(),
            nll: r.f.is_finite().then_some(r.f),
            iterations: r.iterations,
            status: r.status,
        });
        // converged starts beat unconverged ones, then lower nll; ties keep the earlier start
        let better = match &best {
            None => true,
            Some((_, b)) => {
                r.f.is_finite()
                    && (r.status.converged() && !b.status.converged()
                        || r.status.converged() == b.status.converged() && r.f < b.f
                        || !b.f.is_finite())
            }
        };
        if better {
            best = Some((i, r));
        }
    }
    let (best_start, opt) = best.expect("at least one start");
    if !opt.f.is_finite() {
        // surface the evaluation error for the default start
        ctx.total_nll(&base)?;
        return Err(ScrError::NonFinite {
            session: 0,
            individual: None,
            detail: "no start produced a finite negative log-likelihood".into(),
        });
    }

    let names = ctx.design().names();
    let hessian = numerical_hessian(|t| ctx.total_nll_grad(t).map(|r| r.1), &opt.x)?;
    let (vcov, se_defined, hessian_note) = invert_hessian(&hessian);
    let wald = wald_table(&names, &opt.x, vcov.as_ref());
    let k = opt.x.len();
    let status = opt.status;
    Ok(FitResult {
        formula: formula.to_string(),
        names,
        estimates: ParameterVector::unpack(&opt.x, ctx.design().sizes())?,
        nll: opt.f,
        k,
        aic: aic(opt.f, k),
        vcov: vcov.map(|m| (0..k).map(|i| (0..k).map(|j| m[(i, j)]).collect()).collect()),
        wald,
        diagnostics: Diagnostics {
            converged: status.converged(),
            status,
            iterations: opt.iterations,
            evaluations,
            gradient_norm: opt.grad_norm(),
            best_start,
            starts: records,
            se_defined,
            hessian_note,
        },
    })
}

/// Central differences of an analytic gradient with step
/// `max(1e-4, 1e-4 |theta_i|)`, symmetrized.
pub fn numerical_hessian<F>(mut grad: F, theta: &[f64]) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = theta.len();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let step = 1e-4f64.max(1e-4 * theta[i].abs());
        let mut up = theta.to_vec();
        up[i] += step;
        let mut dn = theta.to_vec();
        dn[i] -= step;
        let gu = grad(&up)?;
        let gd = grad(&dn)?;
        for j in 0..n {
            h[(i, j)] = (gu[j] - gd[j]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Inverse Hessian; the flag is false when it is singular or has a
/// non-positive variance.
pub fn invert_hessian(h: &DMatrix<f64>) -> (Option<DMatrix<f64>>, bool, Option<String>) {
    let Some(inv) = h.clone().try_inverse() else {
        return (None, false, Some("Hessian is singular".into()));
    };
    let inv = (&inv + inv.transpose()) * 0.5;
    if inv.iter().any(|v| !v.is_finite()) {
        return (None, false, Some("Hessian inverse is not finite".into()));
    }
    let bad: Vec<usize> = (0..inv.nrows()).filter(|&i| inv[(i, i)] <= 0.0).collect();
    if bad.is_empty() {
        (Some(inv), true, None)
    } else {
        let note = format!("non-positive variance for parameter(s) {bad:?}; Hessian is not positive definite");
        (Some(inv), false, Some(note))
    }
}

/// Two-tailed normal p-value `2 (1 - Phi(|z|))`.
pub fn two_tailed_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub fn wald_row(name: &str, estimate: f64, se: Option<f64>) -> WaldRow {
    let se = se.filter(|s| s.is_finite() && *s > 0.0);
    let z = se.map(|s| estimate / s);
    WaldRow {
        name: name.to_string(),
        estimate,
        se,
        z,
        p_value: z.map(two_tailed_p),
    }
}

pub fn wald_table(names: &[String], theta: &[f64], vcov: Option<&DMatrix<f64>>) -> Vec<WaldRow> {
    names
        .iter()
        .zip(theta)
        .enumerate()
        .map(|(i, (name, &est))| {
            let se = vcov.map(|v| v[(i, i)]).filter(|v| *v > 0.0).map(f64::sqrt);
            wald_row(name, est, se)
        })
        .collect()
}

/// Writes the Wald table with columns `Estimate,SE,z,P(>|z|)`; undefined values are `NA`.
pub fn write_wald_csv<W: Write>(rows: &[WaldRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["", "Estimate", "SE", "z", "P(>|z|)"])?;
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    for r in rows {
        w.write_record([
            r.name.clone(),
            format!("{:.6}", r.estimate),
            opt(r.se),
            opt(r.z),
            opt(r.p_value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomeRange {
    /// One-based session number.
    pub session: usize,
    pub sigma: f64,
    pub r95: f64,
    pub area95: f64,
}

/// `r95 = sigma * sqrt(5.99)`, `area95 = pi * r95^2`.
pub fn home_range(session: usize, sigma: f64) -> HomeRange {
    let r95 = sigma * CHI2_95_2DF.sqrt();
    HomeRange {
        session,
        sigma,
        r95,
        area95: PI * r95 * r95,
    }
}

/// Home range for zero-based session `g`.
pub fn derived_home_range(fit: &FitResult, design: &DesignBundle, g: usize) -> HomeRange {
    let eta = design.sigma.eta(&fit.estimates.gamma)[g];
    home_range(g + 1, crate::model::link_sigma(eta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityPrediction {
    /// Individuals per km².
    pub density: f64,
    /// Delta-method standard error on the natural scale (per km²).
    pub se: Option<f64>,
    pub lwr: Option<f64>,
    pub upr: Option<f64>,
    /// Some covariate lies outside the range seen when fitting.
    pub extrapolated: bool,
}

/// Coefficient block (offset, length) of a predictor in the packed vector.
fn block(design: &DesignBundle, predictor: Predictor) -> (usize, usize) {
    let (na, ng, nb) = design.sizes();
    match predictor {
        Predictor::P0 => (0, na),
        Predictor::Sigma => (na, ng),
        Predictor::Density => (na + ng, nb),
    }
}

/// Linear-predictor row for session `g` from raw covariate values.
/// Returns the row and whether any value lies outside the fitted range.
pub fn predictor_row(
    design: &DesignBundle,
    predictor: Predictor,
    g: usize,
    raw: &BTreeMap<String, f64>,
) -> Result<(Vec<f64>, bool)> {
    let names = &design.get(predictor).names;
    let session_prefix = format!("{}.session ", predictor.session_prefix());
    let cov_prefix = format!("{}.", predictor.covariate_prefix());
    let mut extrapolated = false;
    let mut row = Vec::with_capacity(names.len());
    for name in names {
        if name == predictor.intercept_name() {
            row.push(1.0);
        } else if let Some(level) = name.strip_prefix(&session_prefix) {
            let level: usize = level
                .parse()
                .map_err(|_| ScrError::Formula(format!("bad column name {name}")))?;
            row.push(if level == g + 1 { 1.0 } else { 0.0 });
        } else if let Some(cov) = name.strip_prefix(&cov_prefix) {
            let surface = design
                .surface(cov, predictor)
                .ok_or_else(|| ScrError::UnknownCovariate(cov.into()))?;
            let value = *raw.get(cov).ok_or_else(|| ScrError::UnknownCovariate(cov.into()))?;
            let (lo, hi) = surface
                .values
                .iter()
                .map(|v| surface.to_raw(*v))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            extrapolated |= value < lo - 1e-12 * lo.abs() || value > hi + 1e-12 * hi.abs();
            row.push(surface.from_raw(value));
        } else {
            return Err(ScrError::Formula(format!("unrecognised column {name}")));
        }
    }
    Ok((row, extrapolated))
}

/// Point estimate and link-scale standard error of `row · coef`.
fn link_estimate(fit: &FitResult, design: &DesignBundle, predictor: Predictor, row: &[f64]) -> (f64, Option<f64>) {
    let theta = fit.theta();
    let (off, len) = block(design, predictor);
    let eta: f64 = row.iter().zip(&theta[off..off + len]).map(|(x, b)| x * b).sum();
    let se = fit.vcov.as_ref().filter(|_| fit.diagnostics.se_defined).and_then(|v| {
        let mut var = 0.0;
        for (a, xa) in row.iter().enumerate() {
            for (b, xb) in row.iter().enumerate() {
                var += xa * xb * v[off + a][off + b];
            }
        }
        (var >= 0.0).then(|| var.sqrt())
    });
    (eta, se)
}

/// Two-sided normal quantile for a confidence level; 0.95 gives exactly 1.96.
pub fn interval_z(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ScrError::InvalidInput(format!(
            "interval level must lie in (0, 1), got {level}"
        )));
    }
    if (level - 0.95).abs() < 1e-12 {
        return Ok(Z_95);
    }
    use statrs::distribution::{ContinuousCDF, Normal};
    Ok(Normal::standard().inverse_cdf(0.5 + level / 2.0))
}

fn density_from_link(eta: f64, se: Option<f64>, z: f64, extrapolated: bool) -> DensityPrediction {
    let d = eta.exp() * M2_PER_KM2;
    DensityPrediction {
        density: d,
        se: se.map(|s| d * s),
        lwr: se.map(|s| (eta - z * s).exp() * M2_PER_KM2),
        upr: se.map(|s| (eta + z * s).exp() * M2_PER_KM2),
        extrapolated,
    }
}

/// Density surface over the fitted state space for zero-based session `g`,
/// with intervals at confidence `level`.
pub fn predict_density(fit: &FitResult, design: &DesignBundle, g: usize, level: f64) -> Result<Vec<DensityPrediction>> {
    let z = interval_z(level)?;
    let gn = design.dims.n_points;
    let x = &design.density.matrix;
    Ok((0..gn)
        .map(|u| {
            let row: Vec<f64> = (0..x.ncols()).map(|c| x[(g * gn + u, c)]).collect();
            let (eta, se) = link_estimate(fit, design, Predictor::Density, &row);
            density_from_link(eta, se, z, false)
        })
        .collect())
}

/// Density at new raw covariate values.
pub fn predict_density_at(
    fit: &FitResult,
    design: &DesignBundle,
    g: usize,
    values: &[BTreeMap<String, f64>],
    level: f64,
) -> Result<Vec<DensityPrediction>> {
    let z = interval_z(level)?;
    values
        .iter()
        .map(|raw| {
            let (row, extrapolated) = predictor_row(design, Predictor::Density, g, raw)?;
            let (eta, se) = link_estimate(fit, design, Predictor::Density, &row);
            Ok(density_from_link(eta, se, z, extrapolated))
        })
        .collect()
}

/// Smallest and largest density of a surface.
pub fn density_extremes(surface: &[DensityPrediction]) -> Option<(DensityPrediction, DensityPrediction)> {
    let min = surface.iter().min_by(|a, b| a.density.total_cmp(&b.density))?;
    let max = surface.iter().max_by(|a, b| a.density.total_cmp(&b.density))?;
    Some((*min, *max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCurve {
    pub session: usize,
    pub p0: f64,
    pub sigma: f64,
    pub distances: Vec<f64>,
    pub p: Vec<f64>,
}

/// `p(d) = p0 exp(-d^2 / (2 sigma^2))` for zero-based session `g`, with p0 at
/// the given raw covariate values.
pub fn predict_detection(
    fit: &FitResult,
    design: &DesignBundle,
    g: usize,
    raw: &BTreeMap<String, f64>,
    distances: &[f64],
) -> Result<DetectionCurve> {
    let (row, _) = predictor_row(design, Predictor::P0, g, raw)?;
    let (eta, _) = link_estimate(fit, design, Predictor::P0, &row);
    let p0 = link_p0(eta);
    let sigma = derived_home_range(fit, design, g).sigma;
    Ok(DetectionCurve {
        session: g + 1,
        p0,
        sigma,
        distances: distances.to_vec(),
        p: distances
            .iter()
            .map(|&d| crate::likelihood::detection_prob(p0, sigma, d))
            .collect(),
    })
}

/// Baseline detection per occasion at trap `j` of session `g`, from the fitted design.
pub fn p0_by_occasion(fit: &FitResult, design: &DesignBundle, g: usize, j: usize) -> Vec<f64> {
    let eta = design.p0.eta(&fit.estimates.alpha);
    let (jn, kn) = (design.dims.n_traps, design.dims.n_occasions);
    (0..kn).map(|k| link_p0(eta[(g * jn + j) * kn + k])).collect()
}

/// Covariates used by a predictor, with the scope they were taken from.
pub fn predictor_covariates(design: &DesignBundle, predictor: Predictor) -> Vec<(String, Scope)> {
    let prefix = format!("{}.", predictor.covariate_prefix());
    design
        .get(predictor)
        .names
        .iter()
        .filter_map(|n| n.strip_prefix(&prefix))
        .filter_map(|c| design.surface(c, predictor).map(|s| (c.to_string(), s.scope)))
        .collect()
}
