//! Parametric fits behind the comparator methods: linear model on
//! Freeman-Tukey scores, binomial / quasi-Poisson GLMs, proportional-odds and
//! baseline-category multinomial models.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mvn::{norm_quantile, Df};

mod glm;
mod lm;
mod multinom;
mod polr;

pub use glm::{fit_glm, glm_information, glm_loglik, glm_score, Family, GlmOptions};
pub use lm::{fit_lm, freeman_tukey};
pub use multinom::{fit_multinomial, MultinomialModel, MultinomialOptions};
pub use polr::{fit_prop_odds, PropOddsModel};

/// |coef| above this on a logit/log scale suggests separation.
pub const SEPARATION_COEF: f64 = 15.0;
/// Standard errors above this suggest separation.
pub const SEPARATION_SE: f64 = 100.0;

/// Maps group indices to coefficient indices for one response block. The
/// reference (control) group has no coefficient of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectBlock {
    /// Prefix for hypothesis labels, e.g. `"C2/C1: "`; empty for single-block fits.
    pub prefix: String,
    pub group_coef: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub coef_names: Vec<String>,
    pub coef: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub df_residual: Df,
    pub dispersion: f64,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: Option<f64>,
    /// Per-coefficient separation flags.
    pub separated: Vec<bool>,
    pub warnings: Vec<String>,
    pub blocks: Vec<EffectBlock>,
}

impl FitResult {
    pub fn se(&self) -> Vec<f64> {
        (0..self.coef.len()).map(|i| self.cov[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn coef_index(&self, name: &str) -> Option<usize> {
        self.coef_names.iter().position(|n| n == name)
    }

    pub fn require_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
            })
        }
    }

    /// Flags coefficients with |coef| > 15 or SE > 100 and records a warning.
    pub(crate) fn detect_separation(&mut self) {
        let se = self.se();
        self.separated = self
            .coef
            .iter()
            .zip(&se)
            .map(|(c, s)| c.abs() > SEPARATION_COEF || *s > SEPARATION_SE || !s.is_finite())
            .collect();
        let flagged: Vec<&str> = self
            .coef_names
            .iter()
            .zip(&self.separated)
            .filter(|(_, f)| **f)
            .map(|(n, _)| n.as_str())
            .collect();
        if !flagged.is_empty() {
            self.warnings
                .push(format!("separation suspected: {}", flagged.join(", ")));
        }
    }
}

/// Intercept plus one indicator per non-control group.
pub fn treatment_design(d: &Dataset) -> DMatrix<f64> {
    let k = d.n_groups();
    DMatrix::from_fn(d.len(), k, |i, j| {
        if j == 0 {
            1.0
        } else {
            f64::from(u8::from(d.records()[i].group == j))
        }
    })
}

/// Coefficient names and effect block matching [`treatment_design`].
pub(crate) fn treatment_layout(d: &Dataset) -> (Vec<String>, EffectBlock) {
    let mut names = vec!["(Intercept)".to_string()];
    names.extend(d.groups()[1..].iter().map(|g| format!("group{g}")));
    let group_coef = (0..d.n_groups()).map(|g| (g > 0).then_some(g)).collect();
    (
        names,
        EffectBlock {
            prefix: String::new(),
            group_coef,
        },
    )
}

/// Symmetric inverse via Cholesky, falling back to LU.
pub(crate) fn sym_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = match m.clone().cholesky() {
        Some(c) => c.inverse(),
        None => m.clone().try_inverse()?,
    };
    Some((&inv + inv.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub name: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    /// Zero standard error: the interval collapses to a point.
    pub degenerate: bool,
}

/// Two-sided Wald intervals at Bonferroni level `1 - (1 - level) / m`,
/// optionally exponentiated (odds-ratio scale).
pub fn wald_ci_bonferroni(
    fit: &FitResult,
    coefs: &[usize],
    level: f64,
    m: usize,
    exponentiate: bool,
) -> Result<Vec<WaldInterval>> {
    fit.require_converged()?;
    if !(level > 0.0 && level < 1.0) || m == 0 {
        return Err(Error::Invalid("level must lie in (0,1) and m >= 1".into()));
    }
    let z = norm_quantile(1.0 - (1.0 - level) / (2.0 * m as f64));
    let se = fit.se();
    Ok(coefs
        .iter()
        .map(|&i| {
            let (b, s) = (fit.coef[i], se[i]);
            let (lo, hi) = (b - z * s, b + z * s);
            let f = |v: f64| if exponentiate { v.exp() } else { v };
            WaldInterval {
                name: fit.coef_names[i].clone(),
                estimate: f(b),
                lower: f(lo),
                upper: f(hi),
                degenerate: s == 0.0,
            }
        })
        .collect())
}

#[cfg(test)]
pub(crate) mod test_data {
    use crate::data::{parse_table_csv, Dataset};

    pub const GREEN: &str = "dose,1,2,3\n1,9,4,1\n2,4,8,0\n3,7,6,0\n4,3,10,1\n5,6,4,4\n";

    pub fn green() -> Dataset {
        parse_table_csv(GREEN.as_bytes()).unwrap().expand().unwrap()
    }
}
