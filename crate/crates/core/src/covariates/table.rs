//! Covariate tables on disk. The index columns in the header fix the scope:
//!
//! | index columns          | scope               |
//! |------------------------|---------------------|
//! | `trap_id`              | trap                |
//! | `point_id`             | state space         |
//! | `occasion`             | occasion            |
//! | `session`              | session             |
//! | `session,occasion`     | session × occasion  |
//! | `trap_id,occasion`     | trap × occasion     |
//!
//! Every other column is a covariate. Sessions, occasions and points are
//! 1-based; `x`, `y` and `cell_area` beside `point_id` are ignored so a
//! written state space can be read back as a covariate table.

use std::collections::HashMap;
use std::io::{Read, Write};

use super::{CovariateSurface, Dims, Scope};
use crate::error::{Result, ScrError};

const INDEX_COLUMNS: [&str; 4] = ["trap_id", "point_id", "occasion", "session"];

fn scope_of(index: &[&str]) -> Result<Scope> {
    let has = |c: &str| index.contains(&c);
    Ok(
        match (has("trap_id"), has("point_id"), has("session"), has("occasion")) {
            (true, false, false, false) => Scope::Trap,
            (false, true, false, false) => Scope::StateSpace,
            (false, false, false, true) => Scope::Occasion,
            (false, false, true, false) => Scope::Session,
            (false, false, true, true) => Scope::SessionOccasion,
            (true, false, false, true) => Scope::TrapOccasion,
            _ => {
                return Err(ScrError::InvalidInput(format!(
                    "covariate table index columns [{}] do not name a supported scope",
                    index.join(", ")
                )))
            }
        },
    )
}

fn one_based(text: &str, what: &str, max: usize, row: usize) -> Result<usize> {
    match text.parse::<usize>() {
        Ok(i) if (1..=max).contains(&i) => Ok(i - 1),
        _ => Err(ScrError::InvalidInput(format!(
            "covariate table row {row}: {what} `{text}` outside 1..={max}"
        ))),
    }
}

/// Reads every value column of a covariate table as raw surfaces, checking
/// that each index combination appears exactly once.
pub fn read_covariate_csv<R: Read>(reader: R, dims: &Dims, trap_ids: &[String]) -> Result<Vec<CovariateSurface>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index: Vec<&str> = headers.iter().filter(|h| INDEX_COLUMNS.contains(h)).collect();
    let scope = scope_of(&index)?;
    let col = |name: &str| headers.iter().position(|h| h == name);
    let ignored: &[&str] = if scope == Scope::StateSpace {
        &["x", "y", "cell_area"]
    } else {
        &[]
    };
    let value_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !INDEX_COLUMNS.contains(h) && !ignored.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if value_cols.is_empty() {
        return Err(ScrError::InvalidInput("covariate table has no value columns".into()));
    }
    let trap_lookup: HashMap<&str, usize> = trap_ids.iter().enumerate().map(|(j, id)| (id.as_str(), j)).collect();
    let n = scope.expected_len(dims);
    let mut values = vec![vec![f64::NAN; n]; value_cols.len()];
    let mut seen = vec![false; n];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        let get = |name: &str| rec.get(col(name).unwrap()).unwrap_or("");
        let trap = || -> Result<usize> {
            trap_lookup.get(get("trap_id")).copied().ok_or_else(|| {
                ScrError::InvalidInput(format!("covariate table row {row}: unknown trap `{}`", get("trap_id")))
            })
        };
        let k = dims.n_occasions;
        let pos = match scope {
            Scope::Trap => trap()?,
            Scope::StateSpace => one_based(get("point_id"), "point_id", dims.n_points, row)?,
            Scope::Occasion => one_based(get("occasion"), "occasion", k, row)?,
            Scope::Session => one_based(get("session"), "session", dims.n_sessions, row)?,
            Scope::SessionOccasion => {
                one_based(get("session"), "session", dims.n_sessions, row)? * k
                    + one_based(get("occasion"), "occasion", k, row)?
            }
            Scope::TrapOccasion => trap()? * k + one_based(get("occasion"), "occasion", k, row)?,
        };
        if std::mem::replace(&mut seen[pos], true) {
            return Err(ScrError::InvalidInput(format!(
                "covariate table row {row}: duplicate index"
            )));
        }
        for (v, (c, name)) in values.iter_mut().zip(&value_cols) {
            let text = rec.get(*c).unwrap_or("");
            v[pos] = text.parse().map_err(|_| {
                ScrError::InvalidInput(format!("covariate table row {row}: bad `{name}` value `{text}`"))
            })?;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(ScrError::InvalidInput(format!(
            "covariate table ({scope} scope) has {} of {n} rows; first missing index is {}",
            seen.iter().filter(|s| **s).count(),
            missing + 1
        )));
    }
    value_cols
        .into_iter()
        .zip(values)
        .map(|((_, name), v)| CovariateSurface::new(name, scope, v))
        .collect()
}

/// Writes surfaces sharing one scope on their raw scale.
pub fn write_covariate_csv<W: Write>(
    writer: W,
    surfaces: &[&CovariateSurface],
    dims: &Dims,
    trap_ids: &[String],
) -> Result<()> {
    let Some(first) = surfaces.first() else {
        return Err(ScrError::Empty("no covariates to write".into()));
    };
    let scope = first.scope;
    if let Some(other) = surfaces.iter().find(|s| s.scope != scope) {
        return Err(ScrError::InvalidInput(format!(
            "cannot write `{}` ({}) and `{}` ({}) in one table",
            first.name, scope, other.name, other.scope
        )));
    }
    for s in surfaces {
        s.check_shape(dims)?;
    }
    if matches!(scope, Scope::Trap | Scope::TrapOccasion) && trap_ids.len() != dims.n_traps {
        return Err(ScrError::InvalidInput(
            "trap id list does not match the trap count".into(),
        ));
    }
    let k = dims.n_occasions;
    let index: &[&str] = match scope {
        Scope::Trap => &["trap_id"],
        Scope::StateSpace => &["point_id"],
        Scope::Occasion => &["occasion"],
        Scope::Session => &["session"],
        Scope::SessionOccasion => &["session", "occasion"],
        Scope::TrapOccasion => &["trap_id", "occasion"],
    };
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = index
        .iter()
        .copied()
        .chain(surfaces.iter().map(|s| s.name.as_str()))
        .collect();
    w.write_record(&header)?;
    for pos in 0..scope.expected_len(dims) {
        let mut row = match scope {
            Scope::Trap => vec![trap_ids[pos].clone()],
            Scope::StateSpace | Scope::Occasion | Scope::Session => vec![(pos + 1).to_string()],
            Scope::SessionOccasion => vec![(pos / k + 1).to_string(), (pos % k + 1).to_string()],
            Scope::TrapOccasion => vec![trap_ids[pos / k].clone(), (pos % k + 1).to_string()],
        };
        row.extend(surfaces.iter().map(|s| s.to_raw(s.values[pos]).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
