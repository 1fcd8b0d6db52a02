//! Covariate surfaces, the registry the model draws from, and the
//! constructions for posting-rhythm and network-centrality covariates.

pub mod centrality;
pub mod table;
pub mod tweetogram;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrError};

/// Index set a covariate is defined on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// One value per trap.
    Trap,
    /// One value per state-space point.
    StateSpace,
    /// One value per occasion, shared by all sessions.
    Occasion,
    /// One value per session.
    Session,
    /// `J × K`, trap-major.
    TrapOccasion,
    /// `sessions × K`, session-major.
    SessionOccasion,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scope::Trap => "trap",
            Scope::StateSpace => "statespace",
            Scope::Occasion => "occasion",
            Scope::Session => "session",
            Scope::TrapOccasion => "trap x occasion",
            Scope::SessionOccasion => "session x occasion",
        };
        f.write_str(s)
    }
}

/// Problem dimensions used to check covariate shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_points: usize,
    pub n_traps: usize,
    pub n_occasions: usize,
    pub n_sessions: usize,
}

impl Scope {
    pub fn expected_len(self, dims: &Dims) -> usize {
        match self {
            Scope::Trap => dims.n_traps,
            Scope::StateSpace => dims.n_points,
            Scope::Occasion => dims.n_occasions,
            Scope::Session => dims.n_sessions,
            Scope::TrapOccasion => dims.n_traps * dims.n_occasions,
            Scope::SessionOccasion => dims.n_sessions * dims.n_occasions,
        }
    }
}

/// Mean and sample standard deviation removed by [`standardize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSurface {
    pub name: String,
    pub scope: Scope,
    pub values: Vec<f64>,
    pub standardization: Option<Standardization>,
}

impl CovariateSurface {
    pub fn new(name: impl Into<String>, scope: Scope, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(ScrError::InvalidInput(format!(
                "covariate `{name}` contains non-finite value {bad}"
            )));
        }
        Ok(Self {
            name,
            scope,
            values,
            standardization: None,
        })
    }

    pub fn check_shape(&self, dims: &Dims) -> Result<()> {
        let want = self.scope.expected_len(dims);
        if self.values.len() != want {
            return Err(ScrError::InvalidInput(format!(
                "covariate `{}` ({} scope) has {} values, expected {want}",
                self.name,
                self.scope,
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Maps a standardized value back to the raw scale.
    pub fn to_raw(&self, z: f64) -> f64 {
        self.standardization.map_or(z, |s| z * s.sd + s.mean)
    }

    /// Maps a raw value onto the scale the surface currently uses.
    pub fn from_raw(&self, x: f64) -> f64 {
        self.standardization.map_or(x, |s| (x - s.mean) / s.sd)
    }
}

/// Centres and scales to mean 0 and sample standard deviation 1 (n − 1 denominator).
///
/// Surfaces that are already standardized are re-standardized from their
/// current values, and the stored transform composes with the original one.
pub fn standardize(surface: &CovariateSurface) -> Result<CovariateSurface> {
    let v = &surface.values;
    let first = v.first().copied();
    if v.len() < 2 || v.iter().all(|&x| Some(x) == first) {
        return Err(ScrError::DegenerateCovariate(surface.name.clone()));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let values = v.iter().map(|x| (x - mean) / sd).collect();
    let standardization = match surface.standardization {
        None => Standardization { mean, sd },
        Some(prev) => Standardization {
            mean: prev.mean + prev.sd * mean,
            sd: prev.sd * sd,
        },
    };
    Ok(CovariateSurface {
        name: surface.name.clone(),
        scope: surface.scope,
        values,
        standardization: Some(standardization),
    })
}

/// Named covariates; a name may carry one surface per scope (a proximity
/// covariate, for example, exists on traps and on the state space).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateRegistry {
    surfaces: BTreeMap<String, Vec<CovariateSurface>>,
}

impl CovariateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the surface with the same name and scope.
    pub fn insert(&mut self, surface: CovariateSurface) {
        let slot = self.surfaces.entry(surface.name.clone()).or_default();
        slot.retain(|s| s.scope != surface.scope);
        slot.push(surface);
        slot.sort_by_key(|s| s.scope);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.surfaces.contains_key(name)
    }

    pub fn scopes(&self, name: &str) -> Vec<Scope> {
        self.surfaces
            .get(name)
            .map(|v| v.iter().map(|s| s.scope).collect())
            .unwrap_or_default()
    }

    /// First surface for `name` whose scope is in `allowed`.
    pub fn get(&self, name: &str, allowed: &[Scope]) -> Option<&CovariateSurface> {
        self.surfaces.get(name)?.iter().find(|s| allowed.contains(&s.scope))
    }

    pub fn iter(&self) -> impl Iterator<Item = &CovariateSurface> {
        self.surfaces.values().flatten()
    }

    pub fn check_shapes(&self, dims: &Dims) -> Result<()> {
        self.iter().try_for_each(|s| s.check_shape(dims))
    }

    /// Standardized copy of every surface with at least two distinct values;
    /// constant surfaces are kept as they are.
    pub fn standardized(&self) -> Self {
        let mut out = Self::new();
        for s in self.iter() {
            out.insert(standardize(s).unwrap_or_else(|_| s.clone()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn standardize_one_two_three() {
        // mean 2, sample sd 1
        let s = CovariateSurface::new("x", Scope::Trap, vec![1.0, 2.0, 3.0]).unwrap();
        let z = standardize(&s).unwrap();
        assert_eq!(z.values, vec![-1.0, 0.0, 1.0]);
        assert_eq!(z.standardization, Some(Standardization { mean: 2.0, sd: 1.0 }));
    }

    #[test]
    fn standardize_idempotent_and_centred() {
        let s = CovariateSurface::new("x", Scope::StateSpace, vec![3.1, -2.0, 8.5, 0.25, 4.0, 4.0]).unwrap();
        let z = standardize(&s).unwrap();
        let mean = z.values.iter().sum::<f64>() / z.values.len() as f64;
        assert!(mean.abs() < 1e-12);
        let zz = standardize(&z).unwrap();
        for (a, b) in z.values.iter().zip(&zz.values) {
            assert!((a - b).abs() < 1e-12);
        }
        let st = zz.standardization.unwrap();
        let orig = z.standardization.unwrap();
        assert_relative_eq!(st.mean, orig.mean, epsilon = 1e-12);
        assert_relative_eq!(st.sd, orig.sd, max_relative = 1e-12);
        for (raw, zv) in s.values.iter().zip(&zz.values) {
            assert_relative_eq!(zz.to_raw(*zv), *raw, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_surface_is_degenerate() {
        let s = CovariateSurface::new("c", Scope::Trap, vec![2.0; 4]).unwrap();
        assert!(matches!(standardize(&s), Err(ScrError::DegenerateCovariate(_))));
    }

    #[test]
    fn registry_lookup_by_scope() {
        let mut reg = CovariateRegistry::new();
        reg.insert(CovariateSurface::new("prox", Scope::Trap, vec![1.0, 2.0]).unwrap());
        reg.insert(CovariateSurface::new("prox", Scope::StateSpace, vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(reg.get("prox", &[Scope::StateSpace]).unwrap().values.len(), 3);
        assert_eq!(
            reg.get("prox", &[Scope::Trap, Scope::Occasion]).unwrap().values.len(),
            2
        );
        assert!(reg.get("prox", &[Scope::Session]).is_none());
        assert_eq!(reg.scopes("prox"), vec![Scope::Trap, Scope::StateSpace]);
    }

    #[test]
    fn shape_check() {
        let dims = Dims {
            n_points: 10,
            n_traps: 3,
            n_occasions: 24,
            n_sessions: 3,
        };
        let ok = CovariateSurface::new("t", Scope::TrapOccasion, vec![0.0; 72]).unwrap();
        assert!(ok.check_shape(&dims).is_ok());
        let bad = CovariateSurface::new("t", Scope::Occasion, vec![0.0; 23]).unwrap();
        assert!(bad.check_shape(&dims).is_err());
        assert!(CovariateSurface::new("n", Scope::Trap, vec![f64::NAN]).is_err());
    }
}
