//! AIC ranking of candidate models with Akaike weights.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::CovariateRegistry;
use crate::error::{Result, ScrError};
use crate::inference::{aic, fit, FitOptions, FitResult};
use crate::likelihood::{compensated_sum, LikelihoodContext};
use crate::model::{FormulaSpec, ModelFormula};

/// Weights below this render in scientific notation.
const SCI_THRESHOLD: f64 = 1e-4;

pub const HEADER: [&str; 10] = [
    "Model", "Density", "p0", "sigma", "logL", "K", "AIC", "ΔAIC", "Ω", "CumWt",
];

/// Named candidate formulas; names are unique by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelCatalogue {
    pub models: BTreeMap<String, ModelFormula>,
}

impl ModelCatalogue {
    /// Reads `{ "name": { "density": "~..", "p0": "~..", "sigma": "~.." }, ... }`.
    pub fn from_json<R: Read>(reader: R) -> Result<Self> {
        let raw: BTreeMap<String, FormulaSpec> = serde_json::from_reader(reader)?;
        if raw.is_empty() {
            return Err(ScrError::Empty("model catalogue has no models".into()));
        }
        let models = raw
            .iter()
            .map(|(name, spec)| {
                ModelFormula::from_spec(spec)
                    .map(|f| (name.clone(), f))
                    .map_err(|e| ScrError::Formula(format!("model `{name}`: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { models })
    }

    pub fn validate(&self, registry: &CovariateRegistry) -> Result<()> {
        if self.models.is_empty() {
            return Err(ScrError::Empty("model catalogue has no models".into()));
        }
        for (name, f) in &self.models {
            f.validate(registry)
                .map_err(|e| ScrError::Formula(format!("model `{name}`: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Fitted { nll: f64, k: usize },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    pub formula: FormulaSpec,
    pub outcome: Outcome,
}

impl Candidate {
    /// Unconverged fits count as failures.
    pub fn from_fit(name: &str, formula: &ModelFormula, result: &Result<FitResult>) -> Self {
        let outcome = match result {
            Ok(r) if r.converged() => Outcome::Fitted { nll: r.nll, k: r.k },
            Ok(r) => Outcome::Failed {
                reason: format!(
                    "did not converge ({:?}, gradient norm {:.3e})",
                    r.diagnostics.status, r.diagnostics.gradient_norm
                ),
            },
            Err(e) => Outcome::Failed { reason: e.to_string() },
        };
        Self {
            name: name.to_string(),
            formula: formula.to_spec(),
            outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub name: String,
    pub formula: FormulaSpec,
    pub nll: f64,
    pub k: usize,
    pub aic: f64,
    pub delta_aic: f64,
    pub weight: f64,
    pub cum_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedModel {
    pub name: String,
    pub formula: FormulaSpec,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub rows: Vec<RankingRow>,
    pub failed: Vec<FailedModel>,
}

/// Ranks by AIC (ties: fewer parameters, then name); failed fits are listed
/// separately and carry no weight.
pub fn rank(candidates: &[Candidate]) -> Result<RankingTable> {
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for c in candidates {
        match &c.outcome {
            Outcome::Fitted { nll, k } if nll.is_finite() => rows.push(RankingRow {
                name: c.name.clone(),
                formula: c.formula.clone(),
                nll: *nll,
                k: *k,
                aic: aic(*nll, *k),
                delta_aic: 0.0,
                weight: 0.0,
                cum_weight: 0.0,
            }),
            Outcome::Fitted { nll, .. } => failed.push(FailedModel {
                name: c.name.clone(),
                formula: c.formula.clone(),
                reason: format!("non-finite negative log-likelihood {nll}"),
            }),
            Outcome::Failed { reason } => failed.push(FailedModel {
                name: c.name.clone(),
                formula: c.formula.clone(),
                reason: reason.clone(),
            }),
        }
    }
    if rows.is_empty() {
        return Err(ScrError::AllFitsFailed);
    }
    rows.sort_by(|a, b| {
        a.aic
            .total_cmp(&b.aic)
            .then(a.k.cmp(&b.k))
            .then_with(|| a.name.cmp(&b.name))
    });
    failed.sort_by(|a, b| a.name.cmp(&b.name));

    let best = rows[0].aic;
    // Δ ≥ 0, so exp(-Δ/2) ≤ 1 with the best model at exactly 1: no all-zero underflow.
    let rel: Vec<f64> = rows.iter().map(|r| (-(r.aic - best) / 2.0).exp()).collect();
    let total = compensated_sum(rel.iter().copied());
    let mut cum = 0.0;
    let mut comp = 0.0;
    for (row, r) in rows.iter_mut().zip(&rel) {
        row.delta_aic = row.aic - best;
        row.weight = r / total;
        // Kahan-summed running total
        let y = row.weight - comp;
        let t = cum + y;
        comp = (t - cum) - y;
        cum = t;
        row.cum_weight = cum;
    }
    Ok(RankingTable { rows, failed })
}

/// Fits every model of the catalogue concurrently. `build` constructs the
/// likelihood context for one formula.
pub fn fit_catalogue<B>(
    catalogue: &ModelCatalogue,
    build: B,
    opts: &FitOptions,
) -> Vec<(String, ModelFormula, Result<FitResult>)>
where
    B: Fn(&ModelFormula) -> Result<LikelihoodContext> + Sync,
{
    let models: Vec<(&String, &ModelFormula)> = catalogue.models.iter().collect();
    models
        .par_iter()
        .map(|(name, f)| {
            let result = build(f).and_then(|ctx| fit(&ctx, f, opts));
            if let Err(e) = &result {
                log::warn!("model `{name}` failed: {e}");
            }
            ((*name).clone(), (*f).clone(), result)
        })
        .collect()
}

/// Fixed decimals, or `d.dddddde±XX` for weights below 1e-4 (including underflowed zeros).
pub fn format_weight(w: f64) -> String {
    if w < SCI_THRESHOLD {
        format_sci(w)
    } else {
        format!("{w:.7}")
    }
}

/// C-style `%.6e`.
pub fn format_sci(x: f64) -> String {
    let s = format!("{x:.6e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    format!("{mantissa}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
}

fn row_cells(r: &RankingRow) -> [String; 10] {
    [
        r.name.clone(),
        r.formula.density.clone(),
        r.formula.p0.clone(),
        r.formula.sigma.clone(),
        format!("{:.2}", r.nll),
        r.k.to_string(),
        format!("{:.2}", r.aic),
        format!("{:.5}", r.delta_aic),
        format_weight(r.weight),
        format!("{:.7}", r.cum_weight),
    ]
}

/// CSV with the columns of [`HEADER`]; failed fits are not part of the table.
pub fn write_csv<W: Write>(table: &RankingTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for r in &table.rows {
        w.write_record(row_cells(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`] (at its printed precision).
pub fn read_csv<R: Read>(reader: R) -> Result<RankingTable> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(ScrError::InvalidInput(format!(
            "ranking header {header:?} does not match {HEADER:?}"
        )));
    }
    let num = |s: &str, col: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| ScrError::InvalidInput(format!("bad {col} value `{s}`")))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(RankingRow {
            name: rec[0].to_string(),
            formula: FormulaSpec {
                density: rec[1].to_string(),
                p0: rec[2].to_string(),
                sigma: rec[3].to_string(),
            },
            nll: num(&rec[4], "logL")?,
            k: rec[5]
                .parse()
                .map_err(|_| ScrError::InvalidInput(format!("bad K value `{}`", &rec[5])))?,
            aic: num(&rec[6], "AIC")?,
            delta_aic: num(&rec[7], "ΔAIC")?,
            weight: num(&rec[8], "Ω")?,
            cum_weight: num(&rec[9], "CumWt")?,
        });
    }
    Ok(RankingTable {
        rows,
        failed: Vec::new(),
    })
}

/// Aligned plain-text table followed by any failed fits.
pub fn render_text(table: &RankingTable) -> String {
    let cells: Vec<[String; 10]> = table.rows.iter().map(row_cells).collect();
    let mut widths: Vec<usize> = HEADER.iter().map(|h| h.chars().count()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |items: Vec<&str>| -> String {
        items
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| {
                let pad = w - s.chars().count();
                // formulas left-aligned, numbers right-aligned
                if i < 4 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(HEADER.to_vec());
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    if !table.failed.is_empty() {
        out.push_str("\nFailed fits (excluded from weights):\n");
        for f in &table.failed {
            out.push_str(&format!("  {}: {}\n", f.name, f.reason));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(name: &str, nll: f64, k: usize) -> Candidate {
        Candidate {
            name: name.into(),
            formula: ModelFormula::null().to_spec(),
            outcome: Outcome::Fitted { nll, k },
        }
    }

    #[test]
    fn best_and_null_rows() {
        let t = rank(&[cand("null", 19123.79, 3), cand("best", 16956.01, 10)]).unwrap();
        assert_eq!(t.rows[0].name, "best");
        assert!((t.rows[0].aic - 33932.02).abs() < 1e-9);
        assert!((t.rows[1].aic - 38253.58).abs() < 1e-9);
        assert!((t.rows[1].delta_aic - 4321.56).abs() < 1e-9);
        assert!((t.rows[1].delta_aic - 4321.56967).abs() < 0.02);
        assert_eq!(t.rows[0].weight, 1.0);
        assert_eq!(format_weight(t.rows[1].weight), "0.000000e+00");
        assert_eq!(t.rows[1].cum_weight, 1.0);
    }

    #[test]
    fn ties_and_single_model() {
        let t = rank(&[cand("a", 10.0, 2), cand("b", 10.0, 2)]).unwrap();
        assert_eq!(t.rows[0].weight, 0.5);
        assert_eq!(t.rows[1].weight, 0.5);
        assert_eq!(t.rows[0].name, "a");
        // equal AIC, fewer parameters first
        let t = rank(&[cand("big", 9.0, 3), cand("small", 10.0, 2)]).unwrap();
        assert_eq!(t.rows[0].name, "small");
        let t = rank(&[cand("only", 5.0, 1)]).unwrap();
        assert_eq!(
            (t.rows[0].delta_aic, t.rows[0].weight, t.rows[0].cum_weight),
            (0.0, 1.0, 1.0)
        );
    }

    #[test]
    fn failures_are_listed_not_weighted() {
        let bad = Candidate {
            name: "bad".into(),
            formula: ModelFormula::null().to_spec(),
            outcome: Outcome::Failed {
                reason: "did not converge".into(),
            },
        };
        let t = rank(&[cand("ok", 1.0, 1), bad.clone()]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.failed[0].name, "bad");
        assert!(render_text(&t).contains("bad: did not converge"));
        assert!(matches!(rank(&[bad]), Err(ScrError::AllFitsFailed)));
        assert!(matches!(rank(&[]), Err(ScrError::AllFitsFailed)));
    }

    #[test]
    fn sci_formatting() {
        assert_eq!(format_sci(0.0), "0.000000e+00");
        assert_eq!(format_sci(9.999993e-01), "9.999993e-01");
        assert_eq!(format_sci(1.5e-120), "1.500000e-120");
        assert_eq!(format_weight(0.25), "0.2500000");
        assert_eq!(format_weight(5e-5), "5.000000e-05");
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let t = rank(&[
            cand("best", 16956.01, 10),
            cand("session", 19044.19, 9),
            cand("null", 19123.79, 3),
            cand("close", 16957.2, 10),
        ])
        .unwrap();
        let mut a = Vec::new();
        write_csv(&t, &mut a).unwrap();
        let parsed = read_csv(a.as_slice()).unwrap();
        let mut b = Vec::new();
        write_csv(&parsed, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("Model,Density,p0,sigma,logL,K,AIC,ΔAIC,Ω,CumWt\n"));
    }

    #[test]
    fn catalogue_json() {
        let json = r#"{"null": {"density": "~1", "p0": "~1", "sigma": "~1"},
                       "sess": {"density": "~session", "p0": "~session", "sigma": "~session"}}"#;
        let c = ModelCatalogue::from_json(json.as_bytes()).unwrap();
        assert_eq!(c.models.len(), 2);
        assert_eq!(c.models["sess"].n_params(3), 9);
        assert!(ModelCatalogue::from_json("{}".as_bytes()).is_err());
        assert!(ModelCatalogue::from_json(r#"{"x": {"density": "~1", "p0": "~1"}}"#.as_bytes()).is_err());
        assert!(ModelCatalogue::from_json(
            r#"{"x": {"density": "~1", "p0": "~1", "sigma": "~1", "extra": "~1"}}"#.as_bytes()
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn weights_invariants(nlls in prop::collection::vec((0.0f64..5000.0, 1usize..12), 1..12)) {
            let cands: Vec<Candidate> = nlls.iter().enumerate().map(|(i, (n, k))| cand(&format!("m{i:02}"), *n, *k)).collect();
            let t = rank(&cands).unwrap();
            let total: f64 = t.rows.iter().map(|r| r.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert_eq!(t.rows[0].delta_aic, 0.0);
            prop_assert!(t.rows.windows(2).all(|w| w[1].cum_weight >= w[0].cum_weight && w[1].aic >= w[0].aic));
            prop_assert!((t.rows.last().unwrap().cum_weight - 1.0).abs() < 1e-12);

            // catalogue order does not matter
            let mut rev = cands.clone();
            rev.reverse();
            prop_assert_eq!(&rank(&rev).unwrap(), &t);

            // a strictly worse model leaves the existing order unchanged
            let mut more = cands.clone();
            more.push(cand("worse", 1e6, 1));
            let t2 = rank(&more).unwrap();
            let names: Vec<&str> = t2.rows.iter().map(|r| r.name.as_str()).filter(|n| *n != "worse").collect();
            prop_assert_eq!(names, t.rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>());
        }
    }
}
