//! Single-step max-t inference for linear functions of estimated parameters:
//! adjusted p-values from multivariate normal / t tail probabilities and
//! simultaneous confidence intervals from the equicoordinate quantile.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contrasts::ContrastMatrix;
use crate::error::{invalid, Error, Result};
use crate::fit::FitResult;
use crate::mvn::{Df, MvIntegrator, MvnOptions};
use crate::Alternative;

/// Hypotheses whose variance falls below this fraction of the largest are
/// treated as degenerate.
pub const VAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTestResult {
    pub labels: Vec<String>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    /// `None` for degenerate hypotheses.
    pub statistic: Vec<Option<f64>>,
    pub raw_p: Vec<f64>,
    pub adjusted_p: Vec<f64>,
    /// `None` stands for an infinite bound.
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    pub degenerate: Vec<bool>,
    /// Correlation of the non-degenerate hypotheses, in label order.
    pub correlation: Vec<Vec<f64>>,
    pub df: Df,
    pub level: f64,
    pub critical_value: f64,
    /// Largest integration error estimate over all probabilities computed.
    pub error: f64,
    pub warnings: Vec<String>,
}

impl SimTestResult {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub alternative: Alternative,
    pub level: f64,
    pub mvn: MvnOptions,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            alternative: Alternative::Greater,
            level: 0.95,
            mvn: MvnOptions::default(),
        }
    }
}

/// Linear functions `L` of the fit coefficients, one row per (effect block,
/// contrast row). Treatment coding makes the control coefficient vanish.
pub fn contrast_hypotheses(fit: &FitResult, k: &ContrastMatrix) -> Result<(Vec<String>, DMatrix<f64>)> {
    k.validate()?;
    if fit.blocks.is_empty() {
        return invalid("fit has no group effects to contrast");
    }
    let p = fit.coef.len();
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for block in &fit.blocks {
        if block.group_coef.len() != k.n_groups() {
            return invalid(format!(
                "contrast matrix has {} groups but the fit has {}",
                k.n_groups(),
                block.group_coef.len()
            ));
        }
        for (label, coef) in k.labels.iter().zip(&k.coef) {
            let mut row = vec![0.0; p];
            for (g, c) in coef.iter().enumerate() {
                if let Some(j) = block.group_coef[g] {
                    row[j] += c;
                }
            }
            labels.push(format!("{}{label}", block.prefix));
            rows.push(row);
        }
    }
    let l = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    Ok((labels, l))
}

/// Max-t test of `K` applied to a fitted model. Refuses non-converged fits.
pub fn max_t_adjust(fit: &FitResult, k: &ContrastMatrix, opts: &SimOptions) -> Result<SimTestResult> {
    fit.require_converged()?;
    let (labels, l) = contrast_hypotheses(fit, k)?;
    let est = &l * DVector::from_column_slice(&fit.coef);
    let cov = &l * &fit.cov * l.transpose();
    let mut res = max_t(labels, est.as_slice(), &cov, fit.df_residual, opts)?;
    res.warnings.splice(0..0, fit.warnings.iter().cloned());
    Ok(res)
}

/// Max-t inference for estimates with joint covariance `cov` and a common df.
pub fn max_t(
    labels: Vec<String>,
    estimate: &[f64],
    cov: &DMatrix<f64>,
    df: Df,
    opts: &SimOptions,
) -> Result<SimTestResult> {
    max_t_excluding(labels, estimate, cov, df, &vec![false; estimate.len()], opts)
}

/// As [`max_t`], with `excluded` hypotheses reported as degenerate (p = 1)
/// and left out of the joint distribution.
pub fn max_t_excluding(
    labels: Vec<String>,
    estimate: &[f64],
    cov: &DMatrix<f64>,
    df: Df,
    excluded: &[bool],
    opts: &SimOptions,
) -> Result<SimTestResult> {
    let m = estimate.len();
    if labels.len() != m || cov.shape() != (m, m) || excluded.len() != m {
        return invalid("estimate, label and covariance dimensions differ");
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return invalid("level must lie in (0, 1)");
    }
    let included = |i: usize| !excluded[i];
    if (0..m)
        .filter(|&i| included(i))
        .any(|i| !estimate[i].is_finite() || (0..m).filter(|&j| included(j)).any(|j| !cov[(i, j)].is_finite()))
    {
        return invalid("non-finite estimate or covariance");
    }
    let alt = opts.alternative;
    let max_var = (0..m)
        .filter(|&i| included(i))
        .map(|i| cov[(i, i)])
        .fold(0.0f64, f64::max);
    let zero_var: Vec<bool> = (0..m)
        .map(|i| !(cov[(i, i)] > VAR_EPS * max_var) || max_var <= 0.0)
        .collect();
    let degenerate: Vec<bool> = (0..m).map(|i| excluded[i] || zero_var[i]).collect();
    let active: Vec<usize> = (0..m).filter(|&i| !degenerate[i]).collect();
    if active.is_empty() {
        return Err(Error::Invalid("no testable hypothesis: all variances are zero".into()));
    }
    let se: Vec<f64> = (0..m)
        .map(|i| {
            if cov[(i, i)].is_finite() {
                cov[(i, i)].max(0.0).sqrt()
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let r = DMatrix::from_fn(active.len(), active.len(), |a, b| {
        let (i, j) = (active[a], active[b]);
        if a == b {
            1.0
        } else {
            (cov[(i, j)] / (se[i] * se[j])).clamp(-1.0, 1.0)
        }
    });
    let integrator = MvIntegrator::new(&r, df, opts.mvn.clone())?;

    let mut warnings = Vec::new();
    for i in (0..m).filter(|&i| zero_var[i] && !excluded[i]) {
        warnings.push(format!("hypothesis `{}` has zero variance; reported p = 1", labels[i]));
    }
    let mut error = 0.0f64;
    let mut unconverged = false;
    let mut statistic = vec![None; m];
    let mut raw_p = vec![1.0; m];
    let mut adjusted_p = vec![1.0; m];
    for &i in &active {
        let t = estimate[i] / se[i];
        statistic[i] = Some(t);
        let o = alt.orient(t);
        raw_p[i] = match alt {
            Alternative::TwoSided => 2.0 * (1.0 - df.cdf(o)),
            _ => 1.0 - df.cdf(o),
        }
        .clamp(0.0, 1.0);
        let pr = integrator.max_cdf(o, alt)?;
        error = error.max(pr.error);
        unconverged |= !pr.converged;
        // never below the marginal p
        adjusted_p[i] = (1.0 - pr.value).clamp(raw_p[i], 1.0);
    }
    if unconverged {
        warnings.push(format!(
            "multivariate integration did not reach tolerance {}",
            opts.mvn.tol
        ));
    }

    let q = integrator.equicoordinate_quantile(opts.level, alt)?;
    let mut lower = vec![None; m];
    let mut upper = vec![None; m];
    // zero-variance rows get a point interval
    for i in (0..m).filter(|&i| !excluded[i]) {
        let (lo, hi) = (estimate[i] - q * se[i], estimate[i] + q * se[i]);
        match alt {
            Alternative::Greater => lower[i] = Some(lo),
            Alternative::Less => upper[i] = Some(hi),
            Alternative::TwoSided => {
                lower[i] = Some(lo);
                upper[i] = Some(hi);
            }
        }
    }

    Ok(SimTestResult {
        labels,
        estimate: estimate.to_vec(),
        se,
        statistic,
        raw_p,
        adjusted_p,
        lower,
        upper,
        degenerate,
        correlation: (0..r.nrows()).map(|i| r.row(i).iter().copied().collect()).collect(),
        df,
        level: opts.level,
        critical_value: q,
        error,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrasts::default_names;
    use crate::fit::test_data::green;
    use crate::fit::{
        fit_glm, fit_lm, fit_prop_odds, freeman_tukey, treatment_design, treatment_layout, Family, GlmOptions,
    };

    fn dunnett(k: usize) -> ContrastMatrix {
        ContrastMatrix::dunnett(&vec![10; k], &default_names(k)).unwrap()
    }

    fn ft_fit() -> FitResult {
        let d = green();
        let y: Vec<f64> = d.severities().iter().map(|&s| freeman_tukey(s).unwrap()).collect();
        let (names, block) = treatment_layout(&d);
        let mut fit = fit_lm(&treatment_design(&d), &y, names).unwrap();
        fit.blocks = vec![block];
        fit
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn freeman_tukey_dunnett() {
        let res = max_t_adjust(&ft_fit(), &dunnett(5), &SimOptions::default()).unwrap();
        assert_eq!(res.labels[0], "2 - 1");
        assert_close(&res.estimate, &[0.18475, 0.03458, 0.31374, 0.28239], 1e-4);
        assert_close(&res.se, &[0.17167, 0.16808, 0.16494, 0.16494], 1e-4);
        assert_close(&res.adjusted_p, &[0.3468, 0.7312, 0.0943, 0.1341], 0.005);
        assert!(res.upper.iter().all(Option::is_none));
    }

    #[test]
    fn quasi_poisson_dunnett() {
        let d = green();
        let y: Vec<f64> = d.severities().iter().map(|&s| s as f64).collect();
        let (names, block) = treatment_layout(&d);
        let mut fit = fit_glm(
            &treatment_design(&d),
            &y,
            Family::QuasiPoissonLog,
            names,
            &GlmOptions::default(),
        )
        .unwrap();
        fit.blocks = vec![block];
        let res = max_t_adjust(&fit, &dunnett(5), &SimOptions::default()).unwrap();
        assert_close(&res.estimate, &[0.15415, 0.02281, 0.26236, 0.26236], 1e-4);
        assert_close(&res.adjusted_p, &[0.367, 0.739, 0.105, 0.105], 0.005);
    }

    #[test]
    fn proportional_odds_dunnett() {
        let fit = fit_prop_odds(&green()).unwrap();
        let res = max_t_adjust(&fit, &dunnett(5), &SimOptions::default()).unwrap();
        assert_close(&res.estimate, &[0.9630, 0.2863, 1.4950, 1.3631], 0.01);
        assert_close(&res.adjusted_p, &[0.2686, 0.6510, 0.0767, 0.1324], 0.005);
    }

    #[test]
    fn row_scaling_leaves_statistics_unchanged() {
        let fit = ft_fit();
        let a = max_t_adjust(&fit, &dunnett(5), &SimOptions::default()).unwrap();
        let b = max_t_adjust(&fit, &dunnett(5).scale_row(2, 3.5), &SimOptions::default()).unwrap();
        for i in 0..4 {
            assert!((a.statistic[i].unwrap() - b.statistic[i].unwrap()).abs() < 1e-10);
            assert!((a.adjusted_p[i] - b.adjusted_p[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn single_hypothesis_equals_marginal() {
        let cov = DMatrix::from_element(1, 1, 0.25);
        let res = max_t(vec!["a".into()], &[0.6], &cov, Df::Finite(12.0), &SimOptions::default()).unwrap();
        assert!((res.adjusted_p[0] - res.raw_p[0]).abs() < 1e-12);
        let two = SimOptions {
            alternative: Alternative::TwoSided,
            ..Default::default()
        };
        let res = max_t(vec!["a".into()], &[0.6], &cov, Df::Asymptotic, &two).unwrap();
        assert!((res.adjusted_p[0] - 2.0 * (1.0 - crate::mvn::norm_cdf(1.2))).abs() < 1e-6);
    }

    #[test]
    fn degenerate_row_flagged() {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let res = max_t(
            vec!["a".into(), "b".into(), "c".into()],
            &[1.0, 2.0, 0.0],
            &cov,
            Df::Asymptotic,
            &SimOptions::default(),
        )
        .unwrap();
        assert!(res.degenerate[2] && !res.degenerate[0]);
        assert_eq!(res.adjusted_p[2], 1.0);
        assert_eq!(res.statistic[2], None);
        assert_eq!(res.correlation.len(), 2);
        assert!(res.warnings.iter().any(|w| w.contains("zero variance")));
        let zero = DMatrix::zeros(2, 2);
        assert!(max_t(
            vec!["a".into(), "b".into()],
            &[0.0, 0.0],
            &zero,
            Df::Asymptotic,
            &SimOptions::default()
        )
        .is_err());
    }

    #[test]
    fn refuses_unconverged_fit() {
        let mut fit = ft_fit();
        fit.converged = false;
        assert!(matches!(
            max_t_adjust(&fit, &dunnett(5), &SimOptions::default()),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn monotone_and_bonferroni_bounded() {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 2.0, 0.4, 0.2, 0.4, 1.5]);
        let est = [1.2, 2.5, 0.4];
        let res = max_t(
            vec!["a".into(), "b".into(), "c".into()],
            &est,
            &cov,
            Df::Finite(20.0),
            &SimOptions::default(),
        )
        .unwrap();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| res.statistic[b].unwrap().total_cmp(&res.statistic[a].unwrap()));
        for w in order.windows(2) {
            assert!(res.adjusted_p[w[0]] <= res.adjusted_p[w[1]] + 1e-12);
        }
        for i in 0..3 {
            assert!(res.adjusted_p[i] >= res.raw_p[i]);
            assert!(res.adjusted_p[i] <= (3.0 * res.raw_p[i]).min(1.0) + 2e-4);
        }
        // interval and test agree: lower bound > 0 iff adjusted p < 1 - level
        for i in 0..3 {
            assert_eq!(res.lower[i].unwrap() > 0.0, res.adjusted_p[i] < 0.05);
        }
    }
}
