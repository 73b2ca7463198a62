//! Tukey-type trend test: one GLM slope per (endpoint, dose scaling), combined
//! in a joint max-t test through stacked estimating equations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::contrasts::{DoseScaling, ScalingKind};
use crate::data::{BinarizedMatrix, Dataset};
use crate::error::{invalid, Error, Result};
use crate::fit::{fit_glm, glm_information, glm_score, sym_inverse, Family, GlmOptions};
use crate::mvn::Df;
use crate::simult::{max_t_excluding, SimOptions, SimTestResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCell {
    pub label: String,
    pub endpoint: String,
    pub scaling: ScalingKind,
    pub family: Family,
    pub slope: f64,
    /// Model-based standard error of the slope.
    pub se: f64,
    /// Fit failed or separation suspected; the cell is left out of the max.
    pub excluded: bool,
}

#[derive(Debug, Clone)]
pub struct TrendStack {
    pub cells: Vec<TrendCell>,
    /// Covariance used for inference: model-based variances on the diagonal,
    /// sandwich correlations off the diagonal.
    pub cov: DMatrix<f64>,
    /// Full sandwich covariance of the stacked slopes.
    pub sandwich_cov: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Binary columns get a logistic model, other columns quasi-Poisson.
pub fn default_family(column: &[f64]) -> Family {
    if column.iter().all(|&v| v == 0.0 || v == 1.0) {
        Family::BinomialLogit
    } else {
        Family::QuasiPoissonLog
    }
}

struct CellFit {
    slope: f64,
    se: f64,
    /// Row 1 of the bread times the scores: per-subject slope influence.
    influence: Vec<f64>,
}

fn fit_cell(x: &DMatrix<f64>, y: &[f64], family: Family) -> Result<(CellFit, bool, Vec<String>)> {
    let fit = fit_glm(
        x,
        y,
        family,
        vec!["(Intercept)".into(), "dose".into()],
        &GlmOptions::default(),
    )?;
    let bad = !fit.converged || fit.separated.iter().any(|&s| s);
    let bread = sym_inverse(&glm_information(x, family, &fit.coef)).ok_or(Error::RankDeficient)?;
    let scores = glm_score(x, y, family, &fit.coef);
    let influence = (0..x.nrows())
        .map(|i| bread[(1, 0)] * scores[(i, 0)] + bread[(1, 1)] * scores[(i, 1)])
        .collect();
    let se = fit.se()[1];
    Ok((
        CellFit {
            slope: fit.coef[1],
            se,
            influence,
        },
        bad,
        fit.warnings,
    ))
}

/// Fits every (endpoint, scaling) cell. Doses enter through each scaling's
/// per-group values. `family = None` picks the family per endpoint.
pub fn tukey_trend_fit(
    d: &Dataset,
    endpoints: &BinarizedMatrix,
    scalings: &[DoseScaling],
    family: Option<Family>,
) -> Result<TrendStack> {
    if scalings.is_empty() || endpoints.n_endpoints() == 0 {
        return invalid("trend test needs at least one scaling and one endpoint");
    }
    if endpoints.n_subjects() != d.len() {
        return invalid("endpoint matrix does not match the dataset");
    }
    for s in scalings {
        if s.values.len() != d.n_groups() {
            return invalid("dose scaling does not match the number of groups");
        }
    }
    let distinct = (1..d.n_groups()).any(|g| scalings[0].values[g] != scalings[0].values[0]);
    if d.n_groups() < 2 || !distinct {
        return invalid("trend test needs at least two distinct doses");
    }

    let n = d.len();
    let mut cells = Vec::new();
    let mut fits = Vec::new();
    let mut warnings = Vec::new();
    for (label, column) in endpoints.labels.iter().zip(&endpoints.columns) {
        let fam = family.unwrap_or_else(|| default_family(column));
        for s in scalings {
            let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { s.values[d.records()[i].group] });
            let cell_label = format!("{label}.{}", s.short_name());
            let (fit, excluded) = match fit_cell(&x, column, fam) {
                Ok((fit, bad, w)) => {
                    warnings.extend(w.into_iter().map(|w| format!("{cell_label}: {w}")));
                    (Some(fit), bad)
                }
                Err(e) => {
                    warnings.push(format!("{cell_label}: fit failed: {e}"));
                    (None, true)
                }
            };
            if excluded {
                warnings.push(format!("{cell_label} excluded from the max"));
            }
            cells.push(TrendCell {
                label: cell_label,
                endpoint: label.clone(),
                scaling: s.kind,
                family: fam,
                slope: fit.as_ref().map_or(f64::NAN, |f| f.slope),
                se: fit.as_ref().map_or(f64::NAN, |f| f.se),
                excluded,
            });
            fits.push(fit);
        }
    }

    let m = cells.len();
    let sandwich_cov = DMatrix::from_fn(m, m, |a, b| match (&fits[a], &fits[b]) {
        (Some(fa), Some(fb)) => fa.influence.iter().zip(&fb.influence).map(|(u, v)| u * v).sum(),
        _ => f64::NAN,
    });
    let cov = DMatrix::from_fn(m, m, |a, b| {
        if a == b {
            return cells[a].se * cells[a].se;
        }
        let (sa, sb) = (sandwich_cov[(a, a)], sandwich_cov[(b, b)]);
        let rho = if sa > 0.0 && sb > 0.0 {
            (sandwich_cov[(a, b)] / (sa * sb).sqrt()).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        cells[a].se * cells[b].se * rho
    });
    Ok(TrendStack {
        cells,
        cov,
        sandwich_cov,
        warnings,
    })
}

impl DoseScaling {
    pub fn short_name(&self) -> &'static str {
        self.kind.short_name()
    }
}

/// Joint max-z test over all non-excluded cells.
pub fn tukey_trend_test(stack: &TrendStack, opts: &SimOptions) -> Result<SimTestResult> {
    let excluded: Vec<bool> = stack.cells.iter().map(|c| c.excluded).collect();
    if excluded.iter().all(|&e| e) {
        return invalid("no testable trend cell: every fit failed or separated");
    }
    let labels = stack.cells.iter().map(|c| c.label.clone()).collect();
    let slopes: Vec<f64> = stack.cells.iter().map(|c| c.slope).collect();
    let mut res = max_t_excluding(labels, &slopes, &stack.cov, Df::Asymptotic, &excluded, opts)?;
    res.warnings.splice(0..0, stack.warnings.iter().cloned());
    Ok(res)
}
