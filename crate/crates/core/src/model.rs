//! Model formulas, link functions, design matrices and the packed parameter
//! vector for the three linear predictors:
//!
//! ```text
//! logit(p0)   = alpha_0 + sum_k alpha_k cov_k
//! log(sigma)  = gamma_0 + sum_k gamma_k cov_k
//! log(d(s))   = beta_0  + sum_k beta_k  cov_k
//! ```
//!
//! Parameters are packed `[alpha | gamma | beta]`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariates::{CovariateRegistry, CovariateSurface, Dims, Scope};
use crate::error::{Result, ScrError};

/// Linear predictors are clamped to `[-ETA_CLAMP, ETA_CLAMP]` before the inverse link.
pub const ETA_CLAMP: f64 = 40.0;

#[inline]
pub fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

/// Inverse logit of the clamped predictor.
pub fn link_p0(eta: f64) -> f64 {
    let e = clamp_eta(eta);
    if e >= 0.0 {
        1.0 / (1.0 + (-e).exp())
    } else {
        let x = e.exp();
        x / (1.0 + x)
    }
}

/// `ln p0` and `ln(1 - p0)` without cancellation.
pub fn log_p0_pair(eta: f64) -> (f64, f64) {
    let e = clamp_eta(eta);
    (-softplus(-e), -softplus(e))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Spatial scale in metres.
pub fn link_sigma(eta: f64) -> f64 {
    clamp_eta(eta).exp()
}

/// Intensity per square metre.
pub fn link_density(eta: f64) -> f64 {
    clamp_eta(eta).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    P0,
    Sigma,
    Density,
}

impl Predictor {
    pub const ALL: [Predictor; 3] = [Predictor::P0, Predictor::Sigma, Predictor::Density];

    pub fn allowed_scopes(self) -> &'static [Scope] {
        match self {
            Predictor::P0 => &[
                Scope::Trap,
                Scope::Occasion,
                Scope::Session,
                Scope::TrapOccasion,
                Scope::SessionOccasion,
            ],
            Predictor::Sigma => &[Scope::Session],
            Predictor::Density => &[Scope::StateSpace, Scope::Session],
        }
    }

    pub(crate) fn intercept_name(self) -> &'static str {
        match self {
            Predictor::P0 => "p0.(Intercept)",
            Predictor::Sigma => "sig.(Intercept)",
            Predictor::Density => "d0.(Intercept)",
        }
    }

    pub(crate) fn session_prefix(self) -> &'static str {
        match self {
            Predictor::P0 => "p0",
            Predictor::Sigma => "sig",
            Predictor::Density => "d",
        }
    }

    pub(crate) fn covariate_prefix(self) -> &'static str {
        match self {
            Predictor::P0 => "t.beta",
            Predictor::Sigma => "sig.beta",
            Predictor::Density => "d.beta",
        }
    }
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Predictor::P0 => "p0",
            Predictor::Sigma => "sigma",
            Predictor::Density => "density",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    /// Treatment-coded session factor, session 1 as reference.
    Session,
    Covariate(String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Session => f.write_str("session"),
            Term::Covariate(c) => f.write_str(c),
        }
    }
}

/// Right-hand sides of the three predictors; intercepts are implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ModelFormula {
    pub density: Vec<Term>,
    pub p0: Vec<Term>,
    pub sigma: Vec<Term>,
}

/// JSON form: `{ "density": "~...", "p0": "~...", "sigma": "~..." }`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormulaSpec {
    pub density: String,
    pub p0: String,
    pub sigma: String,
}

fn parse_rhs(rhs: &str) -> Result<Vec<Term>> {
    let rhs = rhs.trim();
    let rhs = rhs.strip_prefix('~').unwrap_or(rhs).trim();
    if rhs.is_empty() {
        return Err(ScrError::Formula("empty right-hand side".into()));
    }
    let mut terms = Vec::new();
    for tok in rhs.split('+').map(str::trim) {
        let term = match tok {
            "" => return Err(ScrError::Formula(format!("empty term in `{rhs}`"))),
            "1" => continue,
            "session" => Term::Session,
            name if name.chars().all(|c| c.is_alphanumeric() || "_.-".contains(c)) => Term::Covariate(name.to_string()),
            bad => return Err(ScrError::Formula(format!("invalid term `{bad}`"))),
        };
        if terms.contains(&term) {
            return Err(ScrError::Formula(format!("term `{term}` repeated")));
        }
        terms.push(term);
    }
    Ok(terms)
}

fn rhs_string(terms: &[Term]) -> String {
    if terms.is_empty() {
        "~1".into()
    } else {
        format!("~{}", terms.iter().map(Term::to_string).collect::<Vec<_>>().join(" + "))
    }
}

impl ModelFormula {
    /// Parses `"D~a+b; p0~c+session; sigma~session"`. Missing predictors default to `~1`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut formula = ModelFormula::default();
        let mut seen = Vec::new();
        for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (lhs, rhs) = part
                .split_once('~')
                .ok_or_else(|| ScrError::Formula(format!("`{part}` has no `~`")))?;
            let predictor = match lhs.trim().to_ascii_lowercase().as_str() {
                "d" | "density" => Predictor::Density,
                "p0" => Predictor::P0,
                "sigma" | "sig" => Predictor::Sigma,
                other => return Err(ScrError::Formula(format!("unknown predictor `{other}`"))),
            };
            if seen.contains(&predictor) {
                return Err(ScrError::Formula(format!("predictor {predictor} given twice")));
            }
            seen.push(predictor);
            *formula.terms_mut(predictor) = parse_rhs(rhs)?;
        }
        Ok(formula)
    }

    pub fn from_spec(spec: &FormulaSpec) -> Result<Self> {
        Ok(Self {
            density: parse_rhs(&spec.density)?,
            p0: parse_rhs(&spec.p0)?,
            sigma: parse_rhs(&spec.sigma)?,
        })
    }

    pub fn to_spec(&self) -> FormulaSpec {
        FormulaSpec {
            density: rhs_string(&self.density),
            p0: rhs_string(&self.p0),
            sigma: rhs_string(&self.sigma),
        }
    }

    pub fn null() -> Self {
        Self::default()
    }

    pub fn terms(&self, predictor: Predictor) -> &[Term] {
        match predictor {
            Predictor::P0 => &self.p0,
            Predictor::Sigma => &self.sigma,
            Predictor::Density => &self.density,
        }
    }

    fn terms_mut(&mut self, predictor: Predictor) -> &mut Vec<Term> {
        match predictor {
            Predictor::P0 => &mut self.p0,
            Predictor::Sigma => &mut self.sigma,
            Predictor::Density => &mut self.density,
        }
    }

    /// Number of coefficients for one predictor.
    pub fn n_columns(&self, predictor: Predictor, n_sessions: usize) -> usize {
        1 + self
            .terms(predictor)
            .iter()
            .map(|t| match t {
                Term::Session => n_sessions.saturating_sub(1),
                Term::Covariate(_) => 1,
            })
            .sum::<usize>()
    }

    /// Total parameter count K.
    pub fn n_params(&self, n_sessions: usize) -> usize {
        Predictor::ALL.iter().map(|&p| self.n_columns(p, n_sessions)).sum()
    }

    /// Checks every covariate exists in the registry with a scope the predictor accepts.
    pub fn validate(&self, registry: &CovariateRegistry) -> Result<()> {
        for predictor in Predictor::ALL {
            for term in self.terms(predictor) {
                let Term::Covariate(name) = term else { continue };
                if !registry.contains(name) {
                    return Err(ScrError::UnknownCovariate(name.clone()));
                }
                if registry.get(name, predictor.allowed_scopes()).is_none() {
                    let scopes = registry
                        .scopes(name)
                        .iter()
                        .map(Scope::to_string)
                        .collect::<Vec<_>>()
                        .join("/");
                    return Err(ScrError::IllegalScope {
                        name: name.clone(),
                        scope: scopes,
                        predictor: predictor.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "D{}; p0{}; sigma{}",
            rhs_string(&self.density),
            rhs_string(&self.p0),
            rhs_string(&self.sigma)
        )
    }
}

/// Parses and validates against `registry`.
pub fn parse_formula(text: &str, registry: &CovariateRegistry) -> Result<ModelFormula> {
    let f = ModelFormula::parse(text)?;
    f.validate(registry)?;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ParameterVector {
    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.gamma);
        v.extend_from_slice(&self.beta);
        v
    }

    /// Splits `theta` into blocks of `sizes = (alpha, gamma, beta)` lengths.
    pub fn unpack(theta: &[f64], sizes: (usize, usize, usize)) -> Result<Self> {
        let (a, g, b) = sizes;
        if theta.len() != a + g + b {
            return Err(ScrError::InvalidInput(format!(
                "parameter vector has {} entries, expected {}",
                theta.len(),
                a + g + b
            )));
        }
        Ok(Self {
            alpha: theta[..a].to_vec(),
            gamma: theta[a..a + g].to_vec(),
            beta: theta[a + g..].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len() + self.gamma.len() + self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Realized design for one predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
}

impl DesignMatrix {
    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn eta(&self, coef: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(coef)).as_slice().to_vec()
    }
}

/// Design matrices for all three predictors.
///
/// Row layouts: p0 `(g * J + j) * K + k`; sigma `g`; density `g * G + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBundle {
    pub p0: DesignMatrix,
    pub sigma: DesignMatrix,
    pub density: DesignMatrix,
    pub dims: Dims,
    /// Surfaces as they entered the design (after optional standardization).
    pub surfaces: Vec<CovariateSurface>,
}

impl DesignBundle {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.p0.ncols(), self.sigma.ncols(), self.density.ncols())
    }

    pub fn n_params(&self) -> usize {
        self.p0.ncols() + self.sigma.ncols() + self.density.ncols()
    }

    /// Coefficient names in packed order.
    pub fn names(&self) -> Vec<String> {
        let mut v = self.p0.names.clone();
        v.extend(self.sigma.names.iter().cloned());
        v.extend(self.density.names.iter().cloned());
        v
    }

    pub fn get(&self, predictor: Predictor) -> &DesignMatrix {
        match predictor {
            Predictor::P0 => &self.p0,
            Predictor::Sigma => &self.sigma,
            Predictor::Density => &self.density,
        }
    }

    pub fn surface(&self, name: &str, predictor: Predictor) -> Option<&CovariateSurface> {
        self.surfaces
            .iter()
            .find(|s| s.name == name && predictor.allowed_scopes().contains(&s.scope))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignOptions {
    /// Standardize every covariate used by the formula before building columns.
    pub standardize: bool,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self { standardize: true }
    }
}

/// Row-layout index of a design row for one predictor.
#[derive(Debug, Clone, Copy)]
enum Row {
    P0 { g: usize, j: usize, k: usize },
    Sigma { g: usize },
    Density { g: usize, u: usize },
}

fn covariate_value(surface: &CovariateSurface, row: Row, dims: &Dims) -> f64 {
    let v = &surface.values;
    let k_n = dims.n_occasions;
    match (surface.scope, row) {
        (Scope::Trap, Row::P0 { j, .. }) => v[j],
        (Scope::Occasion, Row::P0 { k, .. }) => v[k],
        (Scope::Session, Row::P0 { g, .. } | Row::Sigma { g } | Row::Density { g, .. }) => v[g],
        (Scope::TrapOccasion, Row::P0 { j, k, .. }) => v[j * k_n + k],
        (Scope::SessionOccasion, Row::P0 { g, k, .. }) => v[g * k_n + k],
        (Scope::StateSpace, Row::Density { u, .. }) => v[u],
        (scope, row) => unreachable!("scope {scope} cannot index {row:?}"),
    }
}

fn build_one(
    predictor: Predictor,
    terms: &[Term],
    surfaces: &[(&Term, CovariateSurface)],
    dims: &Dims,
) -> Result<DesignMatrix> {
    let rows: Vec<Row> = match predictor {
        Predictor::P0 => (0..dims.n_sessions)
            .flat_map(|g| (0..dims.n_traps).flat_map(move |j| (0..dims.n_occasions).map(move |k| Row::P0 { g, j, k })))
            .collect(),
        Predictor::Sigma => (0..dims.n_sessions).map(|g| Row::Sigma { g }).collect(),
        Predictor::Density => (0..dims.n_sessions)
            .flat_map(|g| (0..dims.n_points).map(move |u| Row::Density { g, u }))
            .collect(),
    };
    let session_of = |r: &Row| match *r {
        Row::P0 { g, .. } | Row::Sigma { g } | Row::Density { g, .. } => g,
    };
    let mut names = vec![predictor.intercept_name().to_string()];
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; rows.len()]];
    for term in terms {
        match term {
            Term::Session => {
                for level in 1..dims.n_sessions {
                    names.push(format!("{}.session {}", predictor.session_prefix(), level + 1));
                    columns.push(
                        rows.iter()
                            .map(|r| if session_of(r) == level { 1.0 } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Term::Covariate(name) => {
                let surface = surfaces
                    .iter()
                    .find(|(t, _)| *t == term)
                    .map(|(_, s)| s)
                    .ok_or_else(|| ScrError::UnknownCovariate(name.clone()))?;
                names.push(format!("{}.{}", predictor.covariate_prefix(), name));
                columns.push(rows.iter().map(|&r| covariate_value(surface, r, dims)).collect());
            }
        }
    }
    check_rank(predictor, &columns, &names)?;
    let matrix = DMatrix::from_fn(rows.len(), columns.len(), |r, c| columns[c][r]);
    Ok(DesignMatrix { matrix, names })
}

/// Modified Gram-Schmidt; a column whose residual norm collapses relative to
/// its own norm is collinear with those before it.
fn check_rank(predictor: Predictor, columns: &[Vec<f64>], names: &[String]) -> Result<()> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut collinear = Vec::new();
    for (col, name) in columns.iter().zip(names) {
        let original = norm(col);
        let mut r = col.clone();
        for q in &basis {
            let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let rn = norm(&r);
        if original == 0.0 || rn <= 1e-9 * original {
            collinear.push(name.clone());
        } else {
            basis.push(r.into_iter().map(|x| x / rn).collect());
        }
    }
    if collinear.is_empty() {
        Ok(())
    } else {
        Err(ScrError::RankDeficient {
            predictor: predictor.to_string(),
            columns: collinear,
        })
    }
}

/// Realizes the formula against the registry for the given problem dimensions.
pub fn build_design(
    formula: &ModelFormula,
    registry: &CovariateRegistry,
    dims: Dims,
    opts: DesignOptions,
) -> Result<DesignBundle> {
    formula.validate(registry)?;
    let mut used: Vec<CovariateSurface> = Vec::new();
    let mut mats = Vec::new();
    for predictor in Predictor::ALL {
        let mut surfaces = Vec::new();
        for term in formula.terms(predictor) {
            let Term::Covariate(name) = term else { continue };
            let raw = registry
                .get(name, predictor.allowed_scopes())
                .ok_or_else(|| ScrError::UnknownCovariate(name.clone()))?;
            raw.check_shape(&dims)?;
            let s = if opts.standardize {
                crate::covariates::standardize(raw)?
            } else {
                raw.clone()
            };
            if !used.iter().any(|u| u.name == s.name && u.scope == s.scope) {
                used.push(s.clone());
            }
            surfaces.push((term, s));
        }
        mats.push(build_one(predictor, formula.terms(predictor), &surfaces, &dims)?);
    }
    let density = mats.pop().expect("three predictors");
    let sigma = mats.pop().expect("three predictors");
    let p0 = mats.pop().expect("three predictors");
    Ok(DesignBundle {
        p0,
        sigma,
        density,
        dims,
        surfaces: used,
    })
}
