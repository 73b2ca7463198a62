use nalgebra::{DMatrix, DVector};

use super::{sym_inverse, EffectBlock, FitResult};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::mvn::Df;

const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 10;

/// Cumulative logit model `logit P(Y <= j | g) = theta_j - beta_g` with
/// `beta_control = 0`, on grouped counts. Parameters are ordered
/// `(theta_1, ..., theta_{J-1}, beta_2, ..., beta_G)`.
#[derive(Debug, Clone)]
pub struct PropOddsModel {
    counts: Vec<Vec<f64>>,
    levels: Vec<i64>,
}

fn logistic(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

impl PropOddsModel {
    /// Uses observed grade levels only; unobserved levels carry no information
    /// about their thresholds.
    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        let table = d.collapse();
        let observed: Vec<usize> = (0..table.grades.len())
            .filter(|&j| table.counts.iter().any(|row| row[j] > 0))
            .collect();
        if observed.len() < 2 {
            return invalid("proportional-odds fit needs at least two observed grade levels");
        }
        let counts = table
            .counts
            .iter()
            .map(|row| observed.iter().map(|&j| row[j] as f64).collect())
            .collect();
        let levels = observed.iter().map(|&j| table.grades[j]).collect();
        Ok(Self { counts, levels })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn n_groups(&self) -> usize {
        self.counts.len()
    }

    pub fn n_params(&self) -> usize {
        self.n_levels() - 1 + self.n_groups() - 1
    }

    fn beta_index(&self, g: usize) -> Option<usize> {
        (g > 0).then(|| self.n_levels() - 1 + g - 1)
    }

    /// Thresholds bracketing category `j` for group `g`, as (upper, lower)
    /// arguments with their parameter indices.
    fn limits(&self, phi: &[f64], g: usize, j: usize) -> (f64, f64) {
        let eta = self.beta_index(g).map_or(0.0, |i| phi[i]);
        let a = if j + 1 < self.n_levels() {
            phi[j] - eta
        } else {
            f64::INFINITY
        };
        let b = if j > 0 { phi[j - 1] - eta } else { f64::NEG_INFINITY };
        (a, b)
    }

    pub fn loglik(&self, phi: &[f64]) -> f64 {
        let nt = self.n_levels() - 1;
        if phi[..nt].windows(2).any(|w| w[0] >= w[1]) {
            return f64::NEG_INFINITY;
        }
        let mut ll = 0.0;
        for g in 0..self.n_groups() {
            for j in 0..self.n_levels() {
                let c = self.counts[g][j];
                if c == 0.0 {
                    continue;
                }
                let (a, b) = self.limits(phi, g, j);
                ll += c * (logistic(a) - logistic(b)).ln();
            }
        }
        ll
    }

    /// Analytic gradient and Hessian of the log-likelihood.
    pub fn derivatives(&self, phi: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.n_params();
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for g in 0..self.n_groups() {
            let bi = self.beta_index(g);
            for j in 0..self.n_levels() {
                let c = self.counts[g][j];
                if c == 0.0 {
                    continue;
                }
                let (a, b) = self.limits(phi, g, j);
                let (fa_cdf, fb_cdf) = (logistic(a), logistic(b));
                let d = fa_cdf - fb_cdf;
                let dens = |f: f64| f * (1.0 - f);
                let (fa, fb) = (dens(fa_cdf), dens(fb_cdf));
                let (dfa, dfb) = (fa * (1.0 - 2.0 * fa_cdf), fb * (1.0 - 2.0 * fb_cdf));
                let la = fa / d;
                let lb = -fb / d;
                let laa = dfa / d - la * la;
                let lbb = -dfb / d - lb * lb;
                let lab = fa * fb / (d * d);

                // sparse coefficient vectors of a and b in parameter space
                let mut ca: Vec<(usize, f64)> = Vec::with_capacity(2);
                let mut cb: Vec<(usize, f64)> = Vec::with_capacity(2);
                if a.is_finite() {
                    ca.push((j, 1.0));
                    if let Some(i) = bi {
                        ca.push((i, -1.0));
                    }
                }
                if b.is_finite() {
                    cb.push((j - 1, 1.0));
                    if let Some(i) = bi {
                        cb.push((i, -1.0));
                    }
                }
                for &(i, v) in &ca {
                    grad[i] += c * la * v;
                }
                for &(i, v) in &cb {
                    grad[i] += c * lb * v;
                }
                for &(i, vi) in &ca {
                    for &(k, vk) in &ca {
                        hess[(i, k)] += c * laa * vi * vk;
                    }
                    for &(k, vk) in &cb {
                        hess[(i, k)] += c * lab * vi * vk;
                        hess[(k, i)] += c * lab * vi * vk;
                    }
                }
                for &(i, vi) in &cb {
                    for &(k, vk) in &cb {
                        hess[(i, k)] += c * lbb * vi * vk;
                    }
                }
            }
        }
        (grad, hess)
    }

    /// Maximum-likelihood thresholds with all group effects fixed at zero.
    pub fn null_start(&self) -> Vec<f64> {
        let nl = self.n_levels();
        let totals: Vec<f64> = (0..nl).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect();
        let n: f64 = totals.iter().sum();
        let mut phi = vec![0.0; self.n_params()];
        let mut cum = 0.0;
        for j in 0..nl - 1 {
            cum += totals[j];
            let p = cum / n;
            phi[j] = (p / (1.0 - p)).ln();
        }
        phi
    }

    fn names(&self, d: &Dataset) -> Vec<String> {
        let mut names: Vec<String> = self.levels.windows(2).map(|w| format!("{}|{}", w[0], w[1])).collect();
        names.extend(d.groups()[1..].iter().map(|g| format!("group{g}")));
        names
    }
}

/// Newton-Raphson with step halving; covariance from the inverse observed
/// information.
pub fn fit_prop_odds(d: &Dataset) -> Result<FitResult> {
    let model = PropOddsModel::from_dataset(d)?;
    let mut phi = model.null_start();
    let mut ll = model.loglik(&phi);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let (grad, hess) = model.derivatives(&phi);
        if grad.amax() < 1e-9 {
            converged = true;
            break;
        }
        let neg = -&hess;
        let step = match neg.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => match neg.lu().solve(&grad) {
                Some(s) => s,
                None => grad.clone(),
            },
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = phi.iter().zip(step.iter()).map(|(p, s)| p + t * s).collect();
            let cll = model.loglik(&cand);
            if cll.is_finite() && cll >= ll - 1e-12 * ll.abs() {
                let rel = (cll - ll).abs() / (ll.abs() + 0.1);
                phi = cand;
                ll = cll;
                accepted = true;
                if rel < 1e-14 {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || converged {
            converged = converged || model.derivatives(&phi).0.amax() < 1e-6;
            break;
        }
    }

    let (_, hess) = model.derivatives(&phi);
    let cov = sym_inverse(&(-hess)).unwrap_or_else(|| DMatrix::from_element(phi.len(), phi.len(), f64::INFINITY));
    let nt = model.n_levels() - 1;
    let group_coef = (0..d.n_groups()).map(|g| (g > 0).then(|| nt + g - 1)).collect();
    let mut fit = FitResult {
        coef_names: model.names(d),
        coef: phi,
        cov,
        df_residual: Df::Asymptotic,
        dispersion: 1.0,
        converged,
        iterations,
        loglik: Some(ll),
        separated: vec![],
        warnings: vec![],
        blocks: vec![EffectBlock {
            prefix: String::new(),
            group_coef,
        }],
    };
    if !converged {
        fit.warnings
            .push(format!("Newton iterations did not converge in {iterations} steps"));
    }
    fit.detect_separation();
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, SubjectRecord};
    use crate::fit::test_data::green;
    use crate::fit::{fit_glm, treatment_design, Family, GlmOptions};

    #[test]
    fn green_fit_matches_reference() {
        let fit = fit_prop_odds(&green()).unwrap();
        assert!(fit.converged);
        let se = fit.se();
        let b2 = fit.coef_index("group2").unwrap();
        assert!((fit.coef[b2] - 0.9630).abs() < 1e-3, "{}", fit.coef[b2]);
        assert!((se[b2] - 0.7743).abs() < 1e-3, "{}", se[b2]);
    }

    #[test]
    fn identical_groups_have_zero_effect() {
        let mut recs = Vec::new();
        for g in 0..2 {
            for s in [0, 0, 1, 2, 2, 1] {
                recs.push(SubjectRecord {
                    group: g,
                    dose: None,
                    severity: s,
                });
            }
        }
        let d = Dataset::new(vec!["a".into(), "b".into()], vec![0, 1, 2], recs).unwrap();
        let fit = fit_prop_odds(&d).unwrap();
        assert!(fit.coef[2].abs() < 1e-8);
    }

    #[test]
    fn mle_dominates_null() {
        let d = green();
        let model = PropOddsModel::from_dataset(&d).unwrap();
        let fit = fit_prop_odds(&d).unwrap();
        assert!(fit.loglik.unwrap() >= model.loglik(&model.null_start()));
    }

    #[test]
    fn two_levels_match_logistic_regression() {
        let mut recs = Vec::new();
        let data = [[5, 2], [3, 4], [1, 6]];
        for (g, row) in data.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    recs.push(SubjectRecord {
                        group: g,
                        dose: None,
                        severity: j as i64,
                    });
                }
            }
        }
        let d = Dataset::new(vec!["a".into(), "b".into(), "c".into()], vec![0, 1], recs).unwrap();
        let po = fit_prop_odds(&d).unwrap();
        let y: Vec<f64> = d.severities().iter().map(|&s| s as f64).collect();
        let glm = fit_glm(
            &treatment_design(&d),
            &y,
            Family::BinomialLogit,
            vec!["i".into(), "b".into(), "c".into()],
            &GlmOptions::default(),
        )
        .unwrap();
        assert!((po.coef[1] - glm.coef[1]).abs() < 1e-6);
        assert!((po.coef[2] - glm.coef[2]).abs() < 1e-6);
        assert!((po.coef[0] + glm.coef[0]).abs() < 1e-6);
    }

    #[test]
    fn gradient_checks() {
        let d = green();
        let model = PropOddsModel::from_dataset(&d).unwrap();
        let fit = fit_prop_odds(&d).unwrap();
        assert!(model.derivatives(&fit.coef).0.amax() < 1e-6);
        let at = [-0.5, 1.7, 0.4, -0.2, 0.9, 0.3];
        let (grad, hess) = model.derivatives(&at);
        let h = 1e-5;
        for j in 0..at.len() {
            let mut up = at;
            let mut dn = at;
            up[j] += h;
            dn[j] -= h;
            let fd = (model.loglik(&up) - model.loglik(&dn)) / (2.0 * h);
            assert!(
                ((fd - grad[j]) / grad[j].abs().max(1e-3)).abs() < 1e-4,
                "param {j}: {fd} vs {}",
                grad[j]
            );
            let (gu, _) = model.derivatives(&up);
            let (gd, _) = model.derivatives(&dn);
            for k in 0..at.len() {
                let fdh = (gu[k] - gd[k]) / (2.0 * h);
                assert!((fdh - hess[(k, j)]).abs() < 1e-4 * hess[(k, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_level_rejected() {
        let recs = (0..4)
            .map(|i| SubjectRecord {
                group: i % 2,
                dose: None,
                severity: 1,
            })
            .collect();
        let d = Dataset::new(vec!["a".into(), "b".into()], vec![0, 1, 2], recs).unwrap();
        assert!(fit_prop_odds(&d).is_err());
    }
}
