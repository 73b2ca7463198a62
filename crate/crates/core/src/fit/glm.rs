use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{sym_inverse, FitResult};
use crate::error::{invalid, Error, Result};
use crate::mvn::Df;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Binary response, logit link.
    BinomialLogit,
    /// Count response, log link, Pearson dispersion.
    QuasiPoissonLog,
}

#[derive(Debug, Clone)]
pub struct GlmOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-10,
        }
    }
}

const MIN_WEIGHT: f64 = 1e-290;

impl Family {
    fn mean(self, eta: f64) -> f64 {
        match self {
            Family::BinomialLogit => 1.0 / (1.0 + (-eta).exp()),
            Family::QuasiPoissonLog => eta.exp(),
        }
    }

    /// Variance function; equals the IRLS weight for these canonical links.
    fn variance(self, mu: f64) -> f64 {
        match self {
            Family::BinomialLogit => mu * (1.0 - mu),
            Family::QuasiPoissonLog => mu,
        }
    }

    fn link(self, mu: f64) -> f64 {
        match self {
            Family::BinomialLogit => (mu / (1.0 - mu)).ln(),
            Family::QuasiPoissonLog => mu.ln(),
        }
    }

    fn deviance(self, y: &[f64], mu: &[f64]) -> f64 {
        let xlogy = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
        2.0 * y
            .iter()
            .zip(mu)
            .map(|(&y, &m)| match self {
                Family::BinomialLogit => xlogy(y, m) + xlogy(1.0 - y, 1.0 - m),
                Family::QuasiPoissonLog => xlogy(y, m) - (y - m),
            })
            .sum::<f64>()
    }

    fn check_response(self, y: &[f64]) -> Result<()> {
        match self {
            Family::BinomialLogit if y.iter().any(|&v| v != 0.0 && v != 1.0) => {
                invalid("binomial response must be 0/1")
            }
            Family::QuasiPoissonLog if y.iter().any(|&v| v < 0.0 || v.fract() != 0.0) => {
                invalid("quasi-Poisson response must be nonnegative integers")
            }
            _ => Ok(()),
        }
    }
}

/// (Quasi-)log-likelihood at `beta`.
pub fn glm_loglik(x: &DMatrix<f64>, y: &[f64], family: Family, beta: &[f64]) -> f64 {
    let eta = x * DVector::from_column_slice(beta);
    y.iter()
        .zip(eta.iter())
        .map(|(&y, &e)| match family {
            Family::BinomialLogit => y * e - softplus(e),
            Family::QuasiPoissonLog => y * e - e.exp() - ln_gamma(y + 1.0),
        })
        .sum()
}

fn softplus(e: f64) -> f64 {
    if e > 0.0 {
        e + (-e).exp().ln_1p()
    } else {
        e.exp().ln_1p()
    }
}

/// Per-observation score contributions `x_i (y_i - mu_i)` (rows), whose
/// column sums form the log-likelihood gradient.
pub fn glm_score(x: &DMatrix<f64>, y: &[f64], family: Family, beta: &[f64]) -> DMatrix<f64> {
    let eta = x * DVector::from_column_slice(beta);
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * (y[i] - family.mean(eta[i])))
}

/// Expected information `X' W X` at `beta`.
pub fn glm_information(x: &DMatrix<f64>, family: Family, beta: &[f64]) -> DMatrix<f64> {
    let eta = x * DVector::from_column_slice(beta);
    let w: Vec<f64> = eta
        .iter()
        .map(|&e| family.variance(family.mean(e)).max(MIN_WEIGHT))
        .collect();
    weighted_crossprod(x, &w)
}

fn weighted_crossprod(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i]);
    x.transpose() * xw
}

/// IRLS fit. Converges when either the relative deviance change or the
/// relative coefficient change drops below `tol`.
pub fn fit_glm(
    x: &DMatrix<f64>,
    y: &[f64],
    family: Family,
    coef_names: Vec<String>,
    opts: &GlmOptions,
) -> Result<FitResult> {
    let (n, p) = x.shape();
    if y.len() != n {
        return invalid("response length does not match design rows");
    }
    if n <= p {
        return invalid("need more observations than coefficients");
    }
    family.check_response(y)?;

    let mut mu: Vec<f64> = y
        .iter()
        .map(|&v| match family {
            Family::BinomialLogit => (v + 0.5) / 2.0,
            Family::QuasiPoissonLog => v + 0.1,
        })
        .collect();
    let mut eta: Vec<f64> = mu.iter().map(|&m| family.link(m)).collect();
    let mut dev = family.deviance(y, &mu);
    let mut beta: Option<DVector<f64>> = None;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        iterations = it;
        let w: Vec<f64> = mu.iter().map(|&m| family.variance(m).max(MIN_WEIGHT)).collect();
        let z = DVector::from_fn(n, |i, _| eta[i] + (y[i] - mu[i]) / w[i]);
        let xtwx = weighted_crossprod(x, &w);
        let xtwz = x.transpose() * DVector::from_fn(n, |i, _| w[i] * z[i]);
        let solved = xtwx
            .clone()
            .cholesky()
            .map(|c| c.solve(&xtwz))
            .or_else(|| xtwx.clone().lu().solve(&xtwz))
            .ok_or(Error::RankDeficient)?;

        let mut candidate = solved;
        let mut new_eta = x * &candidate;
        let mut new_mu: Vec<f64> = new_eta.iter().map(|&e| family.mean(e)).collect();
        let mut new_dev = family.deviance(y, &new_mu);
        // step halving on divergence
        if let Some(prev) = &beta {
            let mut halvings = 0;
            while (!new_dev.is_finite() || new_dev > dev * (1.0 + 1e-12) + 1e-12) && halvings < 10 {
                candidate = (&candidate + prev) * 0.5;
                new_eta = x * &candidate;
                new_mu = new_eta.iter().map(|&e| family.mean(e)).collect();
                new_dev = family.deviance(y, &new_mu);
                halvings += 1;
            }
        }
        if !new_dev.is_finite() {
            break;
        }
        let coef_change = match &beta {
            Some(prev) => (&candidate - prev).norm() / (candidate.norm() + 0.1),
            None => f64::INFINITY,
        };
        let dev_change = (new_dev - dev).abs() / (new_dev.abs() + 0.1);
        beta = Some(candidate);
        eta = new_eta.iter().copied().collect();
        mu = new_mu;
        dev = new_dev;
        if coef_change < opts.tol || dev_change < opts.tol {
            converged = true;
            break;
        }
    }

    let beta = beta.ok_or(Error::NotConverged { iterations })?;
    let info = glm_information(x, family, beta.as_slice());
    let inv = sym_inverse(&info).ok_or(Error::RankDeficient)?;
    let dispersion = match family {
        Family::BinomialLogit => 1.0,
        Family::QuasiPoissonLog => {
            let pearson: f64 = y
                .iter()
                .zip(&mu)
                .map(|(&y, &m)| (y - m).powi(2) / m.max(MIN_WEIGHT))
                .sum();
            pearson / (n - p) as f64
        }
    };
    let loglik = glm_loglik(x, y, family, beta.as_slice());
    let mut fit = FitResult {
        coef_names,
        coef: beta.iter().copied().collect(),
        cov: inv * dispersion,
        df_residual: Df::Asymptotic,
        dispersion,
        converged,
        iterations,
        loglik: Some(loglik),
        separated: vec![],
        warnings: vec![],
        blocks: vec![],
    };
    if !converged {
        fit.warnings
            .push(format!("IRLS did not converge in {iterations} iterations"));
    }
    fit.detect_separation();
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::test_data::green;
    use crate::fit::treatment_design;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("b{i}")).collect()
    }

    #[test]
    fn green_quasi_poisson() {
        let d = green();
        let y: Vec<f64> = d.severities().iter().map(|&s| s as f64).collect();
        let fit = fit_glm(
            &treatment_design(&d),
            &y,
            Family::QuasiPoissonLog,
            names(5),
            &GlmOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        let se = fit.se();
        assert!((fit.coef[1] - (20.0f64 / 12.0 / (20.0 / 14.0)).ln()).abs() < 1e-8);
        assert!((fit.coef[1] - 0.15415).abs() < 1e-5);
        assert!((se[1] - 0.15472).abs() < 1e-5);
        assert!(fit.separated.iter().all(|s| !s));
    }

    #[test]
    fn saturated_two_group_closed_forms() {
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { f64::from(u8::from(i >= 5)) });
        let yb = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let fit = fit_glm(&x, &yb, Family::BinomialLogit, names(2), &GlmOptions::default()).unwrap();
        let lor = (0.6f64 / 0.4).ln() - (0.2f64 / 0.8).ln();
        assert!((fit.coef[1] - lor).abs() < 1e-8);
        let yc = [0.0, 1.0, 2.0, 1.0, 1.0, 3.0, 2.0, 4.0, 2.0, 4.0];
        let fit = fit_glm(&x, &yc, Family::QuasiPoissonLog, names(2), &GlmOptions::default()).unwrap();
        assert!((fit.coef[1] - (15.0f64 / 5.0).ln()).abs() < 1e-8);
    }

    #[test]
    fn all_zero_binary_flags_separation() {
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { (i % 2) as f64 });
        let fit = fit_glm(&x, &[0.0; 8], Family::BinomialLogit, names(2), &GlmOptions::default()).unwrap();
        assert!(fit.warnings.iter().any(|w| w.contains("separation suspected")));
    }

    #[test]
    fn equal_means_give_zero_effects() {
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { f64::from(u8::from(i >= 4)) });
        let y = [1.0, 2.0, 0.0, 3.0, 3.0, 0.0, 2.0, 1.0];
        let fit = fit_glm(&x, &y, Family::QuasiPoissonLog, names(2), &GlmOptions::default()).unwrap();
        assert!(fit.coef[1].abs() < 1e-10);
    }

    #[test]
    fn gradient_vanishes_and_matches_finite_differences() {
        let x = DMatrix::from_fn(12, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / 4.0 });
        let y = [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        let fit = fit_glm(&x, &y, Family::BinomialLogit, names(2), &GlmOptions::default()).unwrap();
        let grad = glm_score(&x, &y, Family::BinomialLogit, &fit.coef).row_sum();
        assert!(grad.amax() < 1e-6);
        let at = [0.3, -0.4];
        let analytic = glm_score(&x, &y, Family::BinomialLogit, &at).row_sum();
        for j in 0..2 {
            let h = 1e-5;
            let mut up = at;
            let mut dn = at;
            up[j] += h;
            dn[j] -= h;
            let fd = (glm_loglik(&x, &y, Family::BinomialLogit, &up) - glm_loglik(&x, &y, Family::BinomialLogit, &dn))
                / (2.0 * h);
            assert!(((fd - analytic[j]) / analytic[j]).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_bad_response() {
        let x = DMatrix::from_element(4, 1, 1.0);
        assert!(fit_glm(
            &x,
            &[0.0, 2.0, 1.0, 0.0],
            Family::BinomialLogit,
            names(1),
            &GlmOptions::default()
        )
        .is_err());
        assert!(fit_glm(
            &x,
            &[0.0, -1.0, 1.0, 0.0],
            Family::QuasiPoissonLog,
            names(1),
            &GlmOptions::default()
        )
        .is_err());
    }
}
