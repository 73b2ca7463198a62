//! Nonparametric relative effects `P(X < Y) + P(X = Y) / 2` of each dose
//! group against the control, with Brunner-Munzel variances and joint
//! multivariate-t inference.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::contrasts::ContrastMatrix;
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::mvn::Df;
use crate::simult::{max_t, SimOptions, VAR_EPS};
use crate::Alternative;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelEffectResult {
    pub labels: Vec<String>,
    pub estimate: Vec<f64>,
    pub variance: Vec<f64>,
    /// Satterthwaite df per comparison.
    pub df: Vec<f64>,
    /// Common df used for the joint distribution (smallest per-comparison df).
    pub joint_df: f64,
    pub statistic: Vec<Option<f64>>,
    pub raw_p: Vec<f64>,
    pub adjusted_p: Vec<f64>,
    /// Simultaneous bounds, clipped to [0, 1].
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub critical_value: f64,
    pub error: f64,
    pub warnings: Vec<String>,
}

/// Normalized empirical distribution function of `sample` at `v`.
fn mid_cdf(sample: &[f64], v: f64) -> f64 {
    let (mut below, mut tied) = (0usize, 0usize);
    for &s in sample {
        if s < v {
            below += 1;
        } else if s == v {
            tied += 1;
        }
    }
    (below as f64 + 0.5 * tied as f64) / sample.len() as f64
}

/// `P(X < Y) + P(X = Y) / 2` estimated over all pairs.
pub fn relative_effect(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return invalid("relative effect needs two nonempty samples");
    }
    Ok(y.iter().map(|&v| mid_cdf(x, v)).sum::<f64>() / y.len() as f64)
}

fn sample_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.len() < 2 {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// Pairwise effects of every dose group against the control.
#[derive(Debug, Clone)]
pub struct ManyToOne {
    pub estimate: Vec<f64>,
    /// Joint covariance; off-diagonal terms come from the shared control.
    pub cov: DMatrix<f64>,
    pub df: Vec<f64>,
}

/// Brunner-Munzel placement variances for each control-vs-dose effect.
pub fn many_to_one(d: &Dataset) -> Result<ManyToOne> {
    if d.n_groups() < 2 {
        return invalid("relative effects need at least two groups");
    }
    let x = d.group_values(0);
    let n1 = x.len() as f64;
    let k = d.n_groups() - 1;
    let mut estimate = Vec::with_capacity(k);
    let mut df = Vec::with_capacity(k);
    let mut var = Vec::with_capacity(k);
    // control placements within each dose group
    let mut control_place = Vec::with_capacity(k);
    for g in 1..d.n_groups() {
        let y = d.group_values(g);
        let nj = y.len() as f64;
        let py: Vec<f64> = y.iter().map(|&v| mid_cdf(&x, v)).collect();
        let px: Vec<f64> = x.iter().map(|&v| mid_cdf(&y, v)).collect();
        estimate.push(py.iter().sum::<f64>() / nj);
        let (a, b) = (sample_var(&px) / n1, sample_var(&py) / nj);
        var.push(a + b);
        let den = a * a / (n1 - 1.0).max(1.0) + b * b / (nj - 1.0).max(1.0);
        df.push(if den > 0.0 {
            (a + b).powi(2) / den
        } else {
            f64::INFINITY
        });
        control_place.push(px);
    }
    let cov = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            var[i]
        } else {
            sample_cov(&control_place[i], &control_place[j]) / n1
        }
    });
    Ok(ManyToOne { estimate, cov, df })
}

/// Many-to-one relative effects combined by the rows of `k`. Each row must
/// weight the control negatively and the dose groups nonnegatively, so that
/// a row is a weighted mean of pairwise effects (Dunnett and Williams types).
pub fn releff_many_to_one(d: &Dataset, k: &ContrastMatrix, opts: &SimOptions) -> Result<RelEffectResult> {
    k.validate()?;
    if k.n_groups() != d.n_groups() {
        return invalid("contrast matrix does not match the number of groups");
    }
    let weights: Vec<Vec<f64>> = k
        .coef
        .iter()
        .map(|row| {
            if !(row[0] < 0.0) || row[1..].iter().any(|&c| c < 0.0) {
                return invalid("relative effects support many-to-one contrasts only");
            }
            Ok(row[1..].iter().map(|c| c / -row[0]).collect())
        })
        .collect::<Result<_>>()?;
    let mto = many_to_one(d)?;
    let m = weights.len();
    let w = DMatrix::from_fn(m, mto.estimate.len(), |i, j| weights[i][j]);
    let est: Vec<f64> = (0..m)
        .map(|i| (0..mto.estimate.len()).map(|j| w[(i, j)] * mto.estimate[j]).sum())
        .collect();
    let cov = &w * &mto.cov * w.transpose();
    let df_row: Vec<f64> = (0..m)
        .map(|i| {
            (0..mto.df.len())
                .filter(|&j| w[(i, j)] != 0.0)
                .map(|j| mto.df[j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    let max_var = (0..m).map(|i| cov[(i, i)]).fold(0.0f64, f64::max);
    let active: Vec<usize> = (0..m)
        .filter(|&i| cov[(i, i)] > VAR_EPS * max_var && max_var > 0.0)
        .collect();
    let joint_df = active.iter().map(|&i| df_row[i]).fold(f64::INFINITY, f64::min).max(1.0);
    let centered: Vec<f64> = est.iter().map(|e| e - 0.5).collect();
    let df = if joint_df.is_finite() {
        Df::Finite(joint_df)
    } else {
        Df::Asymptotic
    };
    let res = max_t(
        k.labels.iter().map(|l| format!("p({l})")).collect(),
        &centered,
        &cov,
        df,
        opts,
    )?;

    let clip = |v: f64| v.clamp(0.0, 1.0);
    Ok(RelEffectResult {
        labels: res.labels,
        lower: res.lower.iter().map(|b| b.map_or(0.0, |v| clip(v + 0.5))).collect(),
        upper: res.upper.iter().map(|b| b.map_or(1.0, |v| clip(v + 0.5))).collect(),
        estimate: est,
        variance: (0..m).map(|i| cov[(i, i)]).collect(),
        df: df_row,
        joint_df,
        statistic: res.statistic,
        raw_p: res.raw_p,
        adjusted_p: res.adjusted_p,
        degenerate: res.degenerate,
        critical_value: res.critical_value,
        error: res.error,
        warnings: res.warnings,
    })
}

/// Convenience wrapper for a one-sided or two-sided analysis at `level`.
pub fn releff_test(d: &Dataset, k: &ContrastMatrix, alternative: Alternative, level: f64) -> Result<RelEffectResult> {
    releff_many_to_one(
        d,
        k,
        &SimOptions {
            alternative,
            level,
            ..Default::default()
        },
    )
}
